use ndarray::Array1;

use crate::error::{Error, Result};
use crate::numeric::{quantile_linear, sample_variance};

/// A loss value together with its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array1<f64>,
}

/// Inverse-frequency class weights `N / (2 * count_c)`.
pub fn class_weights(labels: &[u8]) -> Result<[f64; 2]> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|l| **l == 1).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::DegenerateClassWeights(format!(
            "{neg} negatives and {pos} positives"
        )));
    }
    Ok([n / (2.0 * neg), n / (2.0 * pos)])
}

/// `-weight[label] * log softmax(logits)[label]` for two logits.
pub fn weighted_cross_entropy(
    logits: &Array1<f64>,
    label: u8,
    class_weights: [f64; 2],
) -> Result<LossGrad> {
    if logits.len() != 2 || label > 1 {
        return Err(Error::Invalid(format!(
            "cross-entropy needs 2 logits and a 0/1 label, got {} and {label}",
            logits.len()
        )));
    }
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let w = class_weights[label as usize];
    let loss = -w * (logits[label as usize] - lse);
    let probs = logits.mapv(|z| (z - lse).exp());
    let mut grad = probs * w;
    grad[label as usize] -= w;
    Ok(LossGrad { loss, grad })
}

/// Squared error `(pred - target)^2`.
pub fn mse(pred: f64, target: f64) -> LossGrad {
    let r = pred - target;
    LossGrad {
        loss: r * r,
        grad: Array1::from(vec![2.0 * r]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedMseConfig {
    /// Gaussian noise variance.
    pub sigma2: f64,
    /// Normalizer support, usually every training-fold target.
    pub candidates: Vec<f64>,
}

impl BalancedMseConfig {
    /// Uses every training label as candidate and the squared Silverman
    /// bandwidth of those labels as noise variance.
    pub fn from_train_labels(labels: &[f64]) -> Result<Self> {
        Ok(Self {
            sigma2: silverman_bandwidth(labels)?.powi(2),
            candidates: labels.to_vec(),
        })
    }
}

/// `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, falling back to the standard
/// deviation alone when the IQR is zero.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Invalid("bandwidth needs at least two values".into()));
    }
    let sd = sample_variance(values).sqrt();
    let iqr = quantile_linear(values, 0.75) - quantile_linear(values, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (values.len() as f64).powf(-0.2);
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::DegenerateTarget(
            "zero spread in training labels; bandwidth undefined".into(),
        ));
    }
    Ok(h)
}

/// Balanced MSE with the full-label normalizer:
/// `-log[ N(target; pred, σ²) / Σ_{y∈S} N(y; pred, σ²) ]`.
pub fn balanced_mse(pred: f64, target: f64, cfg: &BalancedMseConfig) -> Result<LossGrad> {
    if cfg.candidates.is_empty() {
        return Err(Error::Invalid(
            "balanced MSE needs a nonempty candidate set".into(),
        ));
    }
    if !(cfg.sigma2 > 0.0 && cfg.sigma2.is_finite()) {
        return Err(Error::Invalid(format!(
            "balanced MSE noise variance {} must be positive",
            cfg.sigma2
        )));
    }
    let two_s2 = 2.0 * cfg.sigma2;
    let scores: Vec<f64> = cfg
        .candidates
        .iter()
        .map(|y| -(pred - y).powi(2) / two_s2)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let lse = max + z.ln();
    let own = -(pred - target).powi(2) / two_s2;
    let loss = lse - own;
    // d/dpred: (pred - target)/σ² - Σ_j softmax_j (pred - y_j)/σ²
    let expected: f64 = weights
        .iter()
        .zip(&cfg.candidates)
        .map(|(w, y)| w * (pred - y))
        .sum::<f64>()
        / z;
    let grad = ((pred - target) - expected) / cfg.sigma2;
    Ok(LossGrad {
        loss,
        grad: Array1::from(vec![grad]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let l = weighted_cross_entropy(&Array1::from(vec![0.0, 0.0]), 1, [1.0, 1.0]).unwrap();
        assert!((l.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l.loss - 0.6931).abs() < 1e-4);
        let confident =
            weighted_cross_entropy(&Array1::from(vec![-30.0, 30.0]), 1, [1.0, 1.0]).unwrap();
        assert!(confident.loss < 1e-20);
        assert!(weighted_cross_entropy(&Array1::from(vec![0.0]), 1, [1.0, 1.0]).is_err());
    }

    #[test]
    fn inverse_class_weights() {
        let w = class_weights(&[1, 0, 0, 0]).unwrap();
        assert_eq!(w[1], 2.0);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            class_weights(&[1, 1]),
            Err(Error::DegenerateClassWeights(_))
        ));
    }

    #[test]
    fn mse_closed_form() {
        assert_eq!(mse(2.5, 2.5).loss, 0.0);
        let l = mse(3.0, 1.0);
        assert_eq!(l.loss, 4.0);
        assert_eq!(l.grad[0], 4.0);
    }

    #[test]
    fn balanced_mse_examples() {
        let single = BalancedMseConfig {
            sigma2: 0.3,
            candidates: vec![1.5],
        };
        for pred in [-3.0, 0.0, 1.5, 8.0] {
            assert_eq!(balanced_mse(pred, 1.5, &single).unwrap().loss, 0.0);
        }
        let cfg = BalancedMseConfig {
            sigma2: 0.5,
            candidates: vec![0.0, 1.0],
        };
        let l = balanced_mse(0.0, 0.0, &cfg).unwrap();
        assert!((l.loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l.loss - 0.3133).abs() < 1e-4);
        assert!(balanced_mse(
            0.0,
            0.0,
            &BalancedMseConfig {
                sigma2: 0.5,
                candidates: vec![]
            }
        )
        .is_err());
    }

    #[test]
    fn silverman_matches_hand_computation() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        // sd = sqrt(2.5), IQR = 2, min(1.5811, 1.4925) = 1.4925
        let expected = 0.9 * (2.0 / 1.34) * 5f64.powf(-0.2);
        assert!((silverman_bandwidth(&v).unwrap() - expected).abs() < 1e-12);
        assert!(silverman_bandwidth(&[2.0, 2.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn cross_entropy_gradient_matches_fd(a in -5.0f64..5.0, b in -5.0f64..5.0, label in 0u8..2, w0 in 0.2f64..3.0, w1 in 0.2f64..3.0) {
            let w = [w0, w1];
            let g = weighted_cross_entropy(&Array1::from(vec![a, b]), label, w).unwrap().grad;
            let f0 = |x: f64| weighted_cross_entropy(&Array1::from(vec![x, b]), label, w).unwrap().loss;
            let f1 = |x: f64| weighted_cross_entropy(&Array1::from(vec![a, x]), label, w).unwrap().loss;
            prop_assert!(rel(g[0], fd(f0, a)) <= 1e-5);
            prop_assert!(rel(g[1], fd(f1, b)) <= 1e-5);
        }

        #[test]
        fn mse_gradient_matches_fd(p in -10.0f64..10.0, t in -10.0f64..10.0) {
            prop_assert!(rel(mse(p, t).grad[0], fd(|x| mse(x, t).loss, p)) <= 1e-6);
        }

        #[test]
        fn balanced_mse_gradient_matches_fd(
            pred in -3.0f64..3.0,
            cands in prop::collection::vec(-2.0f64..2.0, 1..12),
            pick in 0usize..12,
            sigma2 in 0.05f64..2.0,
        ) {
            let target = cands[pick % cands.len()];
            let cfg = BalancedMseConfig { sigma2, candidates: cands };
            let g = balanced_mse(pred, target, &cfg).unwrap().grad[0];
            let n = fd(|x| balanced_mse(x, target, &cfg).unwrap().loss, pred);
            prop_assert!(rel(g, n) <= 1e-5, "analytic {} fd {}", g, n);
        }

        #[test]
        fn balanced_mse_nonnegative_when_target_in_support(
            pred in -5.0f64..5.0,
            cands in prop::collection::vec(-2.0f64..2.0, 1..12),
            pick in 0usize..12,
            sigma2 in 0.01f64..4.0,
        ) {
            let target = cands[pick % cands.len()];
            let cfg = BalancedMseConfig { sigma2, candidates: cands };
            prop_assert!(balanced_mse(pred, target, &cfg).unwrap().loss >= 0.0);
        }

        #[test]
        fn balanced_mse_flat_for_huge_variance(
            pred in -5.0f64..5.0,
            cands in prop::collection::vec(-5.0f64..5.0, 1..12),
            target in -5.0f64..5.0,
        ) {
            let cfg = BalancedMseConfig { sigma2: 1e6, candidates: cands };
            prop_assert!(balanced_mse(pred, target, &cfg).unwrap().grad[0].abs() <= 1e-4);
        }
    }
}
