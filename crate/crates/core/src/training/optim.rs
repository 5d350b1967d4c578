use crate::attmil::{ModelParams, ParamGrads};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Adam. With `decoupled`, weight decay shrinks the weights directly
    /// (AdamW); otherwise it is added to the gradient.
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        decoupled: bool,
    },
    /// Plain SGD with L2 weight decay added to the gradient.
    Sgd,
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled: true,
        }
    }
}

/// Per-tensor moment estimates, in [`ModelParams::trainable_mut`] order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .trainable()
            .iter()
            .map(|s| vec![0.0; s.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One in-place update of every trainable tensor. Weight decay only
/// touches tensors flagged for decay (weights, not biases or norm shifts).
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    let g_slices = grads.slices();
    let mut p_slices = params.trainable_mut();
    if g_slices.len() != p_slices.len() || state.m.len() != p_slices.len() {
        return Err(Error::DimensionMismatch(
            "optimizer state does not match parameters".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    for (k, ((p, decay), g)) in p_slices.iter_mut().zip(&g_slices).enumerate() {
        let wd = if *decay { weight_decay } else { 0.0 };
        match kind {
            OptimizerKind::Sgd => {
                for (pi, gi) in p.iter_mut().zip(g.iter()) {
                    *pi -= lr * (gi + wd * *pi);
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                eps,
                decoupled,
            } => {
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let (m, v) = (&mut state.m[k], &mut state.v[k]);
                for i in 0..p.len() {
                    let mut gi = g[i];
                    if decoupled {
                        p[i] *= 1.0 - lr * wd;
                    } else {
                        gi += wd * p[i];
                    }
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attmil::{HeadKind, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelParams {
        let mut c = ModelConfig::new(2, HeadKind::Regression);
        c.h_att = 2;
        c.h_mlp = 2;
        ModelParams::init(c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    /// Gradient of `f = θ²` summed over every trainable entry.
    fn square_grads(p: &ModelParams) -> ParamGrads {
        let mut g = ParamGrads::zeros_like(p);
        g.attn_v = p.attn_v.mapv(|x| 2.0 * x);
        g.attn_w = p.attn_w.mapv(|x| 2.0 * x);
        g.head_w1 = p.head_w1.mapv(|x| 2.0 * x);
        g.head_b1 = p.head_b1.mapv(|x| 2.0 * x);
        g.head_w2 = p.head_w2.mapv(|x| 2.0 * x);
        g.head_b2 = p.head_b2.mapv(|x| 2.0 * x);
        g
    }

    /// Scalar Adam written out longhand.
    fn adam_trace(theta0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            th -= lr * mh / (vh.sqrt() + eps);
        }
        th
    }

    #[test]
    fn adam_matches_scalar_trace() {
        let mut p = tiny();
        let start = p.attn_v[[0, 0]];
        let mut st = OptimizerState::new(&p);
        for _ in 0..3 {
            let g = square_grads(&p);
            optimizer_step(&mut p, &g, &mut st, OptimizerKind::adam(), 0.01, 0.0).unwrap();
        }
        assert!((p.attn_v[[0, 0]] - adam_trace(start, 0.01, 3)).abs() < 1e-12);
        // first Adam step moves every nonzero coordinate by exactly lr
        let mut q = tiny();
        let before = q.head_w1.clone();
        let mut st = OptimizerState::new(&q);
        let g = square_grads(&q);
        optimizer_step(&mut q, &g, &mut st, OptimizerKind::adam(), 0.01, 0.0).unwrap();
        for (a, b) in before.iter().zip(q.head_w1.iter()) {
            assert!(((a - b).abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn decoupled_decay_skips_biases() {
        let mut p = tiny();
        p.head_b1.fill(1.0);
        let w_before = p.head_w1.clone();
        let mut st = OptimizerState::new(&p);
        let g = ParamGrads::zeros_like(&p);
        optimizer_step(&mut p, &g, &mut st, OptimizerKind::adam(), 0.1, 0.5).unwrap();
        assert!(p.head_b1.iter().all(|b| *b == 1.0));
        for (a, b) in w_before.iter().zip(p.head_w1.iter()) {
            assert!((a * 0.95 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_step_is_plain_descent() {
        let mut p = tiny();
        let before = p.attn_w.clone();
        let mut st = OptimizerState::new(&p);
        let g = square_grads(&p);
        optimizer_step(&mut p, &g, &mut st, OptimizerKind::Sgd, 0.1, 0.0).unwrap();
        for (a, b) in before.iter().zip(p.attn_w.iter()) {
            assert!((a * 0.8 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = tiny();
        let mut st = OptimizerState::new(&p);
        let mut g = ParamGrads::zeros_like(&p);
        g.head_b2[0] = f64::NAN;
        assert!(matches!(
            optimizer_step(&mut p, &g, &mut st, OptimizerKind::Sgd, 0.1, 0.0),
            Err(Error::Diverged(_))
        ));
    }
}
