//! Forward and reverse-mode passes.
//!
//! Per bag with instance rows `h_i`:
//!
//! ```text
//! k_i = tanh(V h_i)                  (⊙ sigmoid(U h_i) when gated)
//! e_i = w · k_i,   a = softmax(e),   z = Σ a_i h_i
//! z'  = batchnorm(z)                 (optional)
//! u   = dropout(relu(W1 z' + b1)),   prediction = W2 u + b2
//! ```
//!
//! Softmax and pooling sums are taken in sorted order, which makes eval
//! outputs bit-identical under any permutation of the instances.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::params::{ModelParams, ParamGrads, BN_EPS, BN_MOMENTUM};
use crate::data_model::FeatureBag;
use crate::error::{Error, Result};
use crate::numeric::canonical_sum;

#[derive(Debug, Clone, PartialEq)]
pub struct BagOutput {
    /// Class logits (classification) or a single score (regression).
    pub prediction: Array1<f64>,
    /// Nonnegative, sums to one, one weight per instance.
    pub attention: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct PoolTrace {
    tanh: Array2<f64>,
    gate: Option<Array2<f64>>,
    keys: Array2<f64>,
    pub attention: Array1<f64>,
    pub embedding: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    input: Array1<f64>,
    pre: Array1<f64>,
    mask: Option<Array1<f64>>,
    hidden: Array1<f64>,
    pub prediction: Array1<f64>,
}

#[derive(Debug, Clone)]
enum NormTrace {
    Batch {
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
        mean: Array1<f64>,
        var: Array1<f64>,
    },
    Running {
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub pools: Vec<PoolTrace>,
    norm: Option<NormTrace>,
    pub heads: Vec<HeadTrace>,
}

impl BatchTrace {
    pub fn outputs(&self) -> Vec<BagOutput> {
        self.pools
            .iter()
            .zip(&self.heads)
            .map(|(p, h)| BagOutput {
                prediction: h.prediction.clone(),
                attention: p.attention.clone(),
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_finite(values: impl IntoIterator<Item = f64>, stage: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NumericOverflow(format!("non-finite {stage}")))
    }
}

fn attention_pool(h: ArrayView2<f64>, params: &ModelParams) -> Result<PoolTrace> {
    let (n, d) = h.dim();
    if d != params.config.d {
        return Err(Error::DimensionMismatch(format!(
            "bag width {d}, model width {}",
            params.config.d
        )));
    }
    if n == 0 {
        return Err(Error::Invalid("empty bag".into()));
    }
    let tanh = h.dot(&params.attn_v.t()).mapv(f64::tanh);
    let gate = params.attn_u.as_ref().map(|u| h.dot(&u.t()).mapv(sigmoid));
    let keys = match &gate {
        Some(g) => &tanh * g,
        None => tanh.clone(),
    };
    let logits = keys.dot(&params.attn_w);
    check_finite(logits.iter().copied(), "attention logits")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|e| (e - max).exp());
    let denom = canonical_sum(&mut exps.to_vec());
    let attention = exps / denom;

    let mut embedding = Array1::zeros(d);
    let mut terms = vec![0.0; n];
    for (j, z) in embedding.iter_mut().enumerate() {
        for (i, t) in terms.iter_mut().enumerate() {
            *t = attention[i] * h[[i, j]];
        }
        *z = canonical_sum(&mut terms);
    }
    Ok(PoolTrace {
        tanh,
        gate,
        keys,
        attention,
        embedding,
    })
}

fn head_forward(
    input: Array1<f64>,
    params: &ModelParams,
    mask: Option<&Array1<f64>>,
) -> Result<HeadTrace> {
    let pre = params.head_w1.dot(&input) + &params.head_b1;
    let mut hidden = pre.mapv(|v| v.max(0.0));
    if let Some(m) = mask {
        if m.len() != hidden.len() {
            return Err(Error::DimensionMismatch(format!(
                "dropout mask {} vs hidden {}",
                m.len(),
                hidden.len()
            )));
        }
        hidden *= m;
    }
    let prediction = params.head_w2.dot(&hidden) + &params.head_b2;
    check_finite(prediction.iter().copied(), "prediction")?;
    Ok(HeadTrace {
        input,
        pre,
        mask: mask.cloned(),
        hidden,
        prediction,
    })
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, else
/// `1 / (1 - rate)`. `None` when `rate` is zero.
pub fn sample_dropout_mask<R: Rng + ?Sized>(
    rate: f64,
    len: usize,
    rng: &mut R,
) -> Option<Array1<f64>> {
    (rate > 0.0).then(|| {
        let keep = 1.0 / (1.0 - rate);
        Array1::from_shape_simple_fn(len, || if rng.gen::<f64>() < rate { 0.0 } else { keep })
    })
}

/// Forward pass over a batch of bags. With `batch_stats`, batch
/// normalization (when configured) uses the statistics of this batch;
/// otherwise it uses the running statistics.
pub fn forward_batch(
    bags: &[ArrayView2<f64>],
    params: &ModelParams,
    masks: &[Option<Array1<f64>>],
    batch_stats: bool,
) -> Result<BatchTrace> {
    if masks.len() != bags.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} masks for {} bags",
            masks.len(),
            bags.len()
        )));
    }
    let pools = bags
        .iter()
        .map(|h| attention_pool(*h, params))
        .collect::<Result<Vec<_>>>()?;
    let (inputs, norm) = match &params.norm {
        None => (
            pools
                .iter()
                .map(|p| p.embedding.clone())
                .collect::<Vec<_>>(),
            None,
        ),
        Some(bn) => {
            let d = params.config.d;
            let mut z = Array2::zeros((pools.len(), d));
            for (mut row, p) in z.rows_mut().into_iter().zip(&pools) {
                row.assign(&p.embedding);
            }
            let (mean, var) = if batch_stats {
                let mean = z.mean_axis(Axis(0)).unwrap();
                let var = (&z - &mean).mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
                (mean, var)
            } else {
                (bn.running_mean.clone(), bn.running_var.clone())
            };
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let xhat = (&z - &mean) * &inv_std;
            let out = &xhat * &bn.gamma + &bn.beta;
            let inputs = out.rows().into_iter().map(|r| r.to_owned()).collect();
            let trace = if batch_stats {
                NormTrace::Batch {
                    xhat,
                    inv_std,
                    mean,
                    var,
                }
            } else {
                NormTrace::Running { xhat, inv_std }
            };
            (inputs, Some(trace))
        }
    };
    let heads = inputs
        .into_iter()
        .zip(masks)
        .map(|(x, m)| head_forward(x, params, m.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchTrace { pools, norm, heads })
}

/// Reverse pass: `upstream[b]` is d(objective)/d(prediction) of bag `b`.
pub fn backward_batch(
    bags: &[ArrayView2<f64>],
    trace: &BatchTrace,
    params: &ModelParams,
    upstream: &[Array1<f64>],
) -> Result<ParamGrads> {
    if upstream.len() != bags.len() || trace.heads.len() != bags.len() {
        return Err(Error::DimensionMismatch(
            "upstream gradients do not match the batch".into(),
        ));
    }
    let mut g = ParamGrads::zeros_like(params);

    // head
    let mut d_inputs = Vec::with_capacity(bags.len());
    for (ht, dy) in trace.heads.iter().zip(upstream) {
        if dy.len() != params.out_dim() {
            return Err(Error::DimensionMismatch(format!(
                "upstream width {} vs output {}",
                dy.len(),
                params.out_dim()
            )));
        }
        g.head_b2 += dy;
        g.head_w2 += &outer(dy, &ht.hidden);
        let mut d_hidden = params.head_w2.t().dot(dy);
        if let Some(m) = &ht.mask {
            d_hidden *= m;
        }
        let d_pre = d_hidden * ht.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        g.head_b1 += &d_pre;
        g.head_w1 += &outer(&d_pre, &ht.input);
        d_inputs.push(params.head_w1.t().dot(&d_pre));
    }

    // normalization
    let d_embeddings: Vec<Array1<f64>> = match (&trace.norm, &params.norm) {
        (None, _) => d_inputs,
        (Some(nt), Some(bn)) => {
            let b = d_inputs.len();
            let mut dy = Array2::zeros((b, params.config.d));
            for (mut row, di) in dy.rows_mut().into_iter().zip(&d_inputs) {
                row.assign(di);
            }
            let (xhat, inv_std) = match nt {
                NormTrace::Batch { xhat, inv_std, .. } | NormTrace::Running { xhat, inv_std } => {
                    (xhat, inv_std)
                }
            };
            *g.bn_gamma.as_mut().unwrap() += &(&dy * xhat).sum_axis(Axis(0));
            *g.bn_beta.as_mut().unwrap() += &dy.sum_axis(Axis(0));
            let dxhat = &dy * &bn.gamma;
            let dz = match nt {
                NormTrace::Running { .. } => dxhat * inv_std,
                NormTrace::Batch { .. } => {
                    let bf = b as f64;
                    let sum_dxhat = dxhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                    ((&dxhat * bf - &sum_dxhat) - &(xhat * &sum_dxhat_xhat)) * inv_std / bf
                }
            };
            dz.rows().into_iter().map(|r| r.to_owned()).collect()
        }
        (Some(_), None) => {
            return Err(Error::Invalid(
                "trace has normalization but model does not".into(),
            ))
        }
    };

    // attention pooling
    for ((h, pt), dz) in bags.iter().zip(&trace.pools).zip(&d_embeddings) {
        let da = h.dot(dz);
        let mut terms: Vec<f64> = pt.attention.iter().zip(&da).map(|(a, x)| a * x).collect();
        let mean_da = canonical_sum(&mut terms);
        let de = &pt.attention * &(da - mean_da);
        g.attn_w += &pt.keys.t().dot(&de);
        // dk_i = de_i * w
        let dk = outer(&de, &params.attn_w);
        let dtanh = match &pt.gate {
            None => dk,
            Some(gate) => {
                let dgate = &dk * &pt.tanh;
                let dpre_gate = dgate * &gate.mapv(|s| s * (1.0 - s));
                *g.attn_u.as_mut().unwrap() += &dpre_gate.t().dot(h);
                dk * gate
            }
        };
        let dpre = dtanh * &pt.tanh.mapv(|t| 1.0 - t * t);
        g.attn_v += &dpre.t().dot(h);
    }
    Ok(g)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

/// Folds the batch statistics of a training forward pass into the running
/// statistics (unbiased variance, momentum [`BN_MOMENTUM`]).
pub fn update_running_stats(params: &mut ModelParams, trace: &BatchTrace) {
    if let (Some(bn), Some(NormTrace::Batch { mean, var, .. })) =
        (params.norm.as_mut(), &trace.norm)
    {
        let b = trace.pools.len() as f64;
        let unbiased = if b > 1.0 {
            var * (b / (b - 1.0))
        } else {
            var.clone()
        };
        bn.running_mean = &bn.running_mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
        bn.running_var = &bn.running_var * (1.0 - BN_MOMENTUM) + &unbiased * BN_MOMENTUM;
    }
}

/// Single-bag forward with an explicit dropout mask (`None` = no dropout).
/// Normalization uses running statistics.
pub fn forward_features(
    h: ArrayView2<f64>,
    params: &ModelParams,
    mask: Option<&Array1<f64>>,
) -> Result<BatchTrace> {
    forward_batch(&[h], params, &[mask.cloned()], false)
}

/// Forward pass for one bag. In train mode a dropout mask is drawn from
/// `rng`; normalization always uses running statistics here, batch
/// statistics only exist in [`forward_batch`].
pub fn forward_bag<R: Rng + ?Sized>(
    bag: &FeatureBag,
    params: &ModelParams,
    train_mode: bool,
    rng: &mut R,
) -> Result<BagOutput> {
    let h = bag.features_f64();
    let mask = if train_mode {
        sample_dropout_mask(params.config.dropout_rate, params.config.h_mlp, rng)
    } else {
        None
    };
    let trace = forward_features(h.view(), params, mask.as_ref())?;
    Ok(trace.outputs().pop().unwrap())
}

/// Gradient of `upstream · prediction` for one bag under a fixed dropout
/// mask (`None` = eval mode).
pub fn backward_bag(
    h: ArrayView2<f64>,
    params: &ModelParams,
    mask: Option<&Array1<f64>>,
    upstream: &Array1<f64>,
) -> Result<ParamGrads> {
    let trace = forward_features(h, params, mask)?;
    backward_batch(&[h], &trace, params, std::slice::from_ref(upstream))
}
