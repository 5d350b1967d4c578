use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Two logits, softmax over {negative, positive}.
    Classification,
    /// One scalar score.
    Regression,
}

impl HeadKind {
    pub fn out_dim(self) -> usize {
        match self {
            HeadKind::Classification => 2,
            HeadKind::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub h_att: usize,
    pub h_mlp: usize,
    pub head: HeadKind,
    pub dropout_rate: f64,
    /// Gated attention: `tanh(V h) ⊙ sigmoid(U h)` instead of `tanh(V h)`.
    pub gated: bool,
    /// Batch normalization of the bag embedding before the head.
    pub batch_norm: bool,
}

impl ModelConfig {
    pub fn new(d: usize, head: HeadKind) -> Self {
        Self {
            d,
            h_att: 128,
            h_mlp: 256,
            head,
            dropout_rate: 0.0,
            gated: false,
            batch_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h_att == 0 || self.h_mlp == 0 {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
            running_mean: Array1::zeros(d),
            running_var: Array1::ones(d),
        }
    }
}

/// Attention and head weights of one attention-MIL model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Attention projection, `h_att × d`.
    pub attn_v: Array2<f64>,
    /// Attention gate, `h_att × d`, present only for gated attention.
    pub attn_u: Option<Array2<f64>>,
    /// Attention scorer, `h_att`.
    pub attn_w: Array1<f64>,
    pub norm: Option<BatchNorm>,
    /// `h_mlp × d`
    pub head_w1: Array2<f64>,
    pub head_b1: Array1<f64>,
    /// `out × h_mlp`
    pub head_w2: Array2<f64>,
    pub head_b2: Array1<f64>,
}

fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (1.0 / cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

impl ModelParams {
    /// Kaiming-uniform weights with negative slope sqrt(5), i.e.
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; biases zero.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let attn_v = uniform_fan_in(rng, c.h_att, c.d);
        let attn_u = c.gated.then(|| uniform_fan_in(rng, c.h_att, c.d));
        let attn_w = uniform_fan_in(rng, 1, c.h_att)
            .into_shape_with_order(c.h_att)
            .unwrap();
        let head_w1 = uniform_fan_in(rng, c.h_mlp, c.d);
        let head_w2 = uniform_fan_in(rng, c.head.out_dim(), c.h_mlp);
        Ok(Self {
            attn_v,
            attn_u,
            attn_w,
            norm: c.batch_norm.then(|| BatchNorm::new(c.d)),
            head_w1,
            head_b1: Array1::zeros(c.h_mlp),
            head_w2,
            head_b2: Array1::zeros(c.head.out_dim()),
            config,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.head.out_dim()
    }

    /// Trainable tensors in checkpoint order, flagged `true` when weight
    /// decay applies (weights, not biases or normalization shifts).
    pub fn trainable_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out: Vec<(&mut [f64], bool)> = Vec::new();
        out.push((self.attn_v.as_slice_mut().unwrap(), true));
        if let Some(u) = self.attn_u.as_mut() {
            out.push((u.as_slice_mut().unwrap(), true));
        }
        out.push((self.attn_w.as_slice_mut().unwrap(), true));
        if let Some(bn) = self.norm.as_mut() {
            out.push((bn.gamma.as_slice_mut().unwrap(), false));
            out.push((bn.beta.as_slice_mut().unwrap(), false));
        }
        out.push((self.head_w1.as_slice_mut().unwrap(), true));
        out.push((self.head_b1.as_slice_mut().unwrap(), false));
        out.push((self.head_w2.as_slice_mut().unwrap(), true));
        out.push((self.head_b2.as_slice_mut().unwrap(), false));
        out
    }

    /// Read-only view of [`ModelParams::trainable_mut`].
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.attn_v.as_slice().unwrap()];
        if let Some(u) = &self.attn_u {
            out.push(u.as_slice().unwrap());
        }
        out.push(self.attn_w.as_slice().unwrap());
        if let Some(bn) = &self.norm {
            out.push(bn.gamma.as_slice().unwrap());
            out.push(bn.beta.as_slice().unwrap());
        }
        out.push(self.head_w1.as_slice().unwrap());
        out.push(self.head_b1.as_slice().unwrap());
        out.push(self.head_w2.as_slice().unwrap());
        out.push(self.head_b2.as_slice().unwrap());
        out
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        let stats_finite = self.norm.as_ref().map_or(true, |bn| {
            bn.running_mean
                .iter()
                .chain(bn.running_var.iter())
                .all(|v| v.is_finite())
        });
        stats_finite
            && self
                .trainable()
                .iter()
                .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Gradient of a scalar objective with respect to every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub attn_v: Array2<f64>,
    pub attn_u: Option<Array2<f64>>,
    pub attn_w: Array1<f64>,
    pub bn_gamma: Option<Array1<f64>>,
    pub bn_beta: Option<Array1<f64>>,
    pub head_w1: Array2<f64>,
    pub head_b1: Array1<f64>,
    pub head_w2: Array2<f64>,
    pub head_b2: Array1<f64>,
}

impl ParamGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            attn_v: Array2::zeros(p.attn_v.raw_dim()),
            attn_u: p.attn_u.as_ref().map(|u| Array2::zeros(u.raw_dim())),
            attn_w: Array1::zeros(p.attn_w.raw_dim()),
            bn_gamma: p.norm.as_ref().map(|bn| Array1::zeros(bn.gamma.raw_dim())),
            bn_beta: p.norm.as_ref().map(|bn| Array1::zeros(bn.beta.raw_dim())),
            head_w1: Array2::zeros(p.head_w1.raw_dim()),
            head_b1: Array1::zeros(p.head_b1.raw_dim()),
            head_w2: Array2::zeros(p.head_w2.raw_dim()),
            head_b2: Array1::zeros(p.head_b2.raw_dim()),
        }
    }

    /// Same order as [`ModelParams::trainable_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.attn_v.as_slice().unwrap()];
        if let Some(u) = &self.attn_u {
            out.push(u.as_slice().unwrap());
        }
        out.push(self.attn_w.as_slice().unwrap());
        if let (Some(g), Some(b)) = (&self.bn_gamma, &self.bn_beta) {
            out.push(g.as_slice().unwrap());
            out.push(b.as_slice().unwrap());
        }
        out.push(self.head_w1.as_slice().unwrap());
        out.push(self.head_b1.as_slice().unwrap());
        out.push(self.head_w2.as_slice().unwrap());
        out.push(self.head_b2.as_slice().unwrap());
        out
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        self.attn_v += &other.attn_v;
        if let (Some(a), Some(b)) = (self.attn_u.as_mut(), other.attn_u.as_ref()) {
            *a += b;
        }
        self.attn_w += &other.attn_w;
        if let (Some(a), Some(b)) = (self.bn_gamma.as_mut(), other.bn_gamma.as_ref()) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.bn_beta.as_mut(), other.bn_beta.as_ref()) {
            *a += b;
        }
        self.head_w1 += &other.head_w1;
        self.head_b1 += &other.head_b1;
        self.head_w2 += &other.head_w2;
        self.head_b2 += &other.head_b2;
    }

    pub fn scale(&mut self, c: f64) {
        self.attn_v *= c;
        if let Some(u) = self.attn_u.as_mut() {
            *u *= c;
        }
        self.attn_w *= c;
        if let Some(g) = self.bn_gamma.as_mut() {
            *g *= c;
        }
        if let Some(b) = self.bn_beta.as_mut() {
            *b *= c;
        }
        self.head_w1 *= c;
        self.head_b1 *= c;
        self.head_w2 *= c;
        self.head_b2 *= c;
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}
