use crate::error::{Error, Result};
use crate::numeric::{average_ranks, mean, median, min_max_normalize, pearson, quantile_linear};

/// Patient-aligned model scores with binary labels and, optionally, the
/// continuous ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub truth: Option<Vec<f64>>,
}

impl ScoreSet {
    pub fn new(
        ids: Vec<String>,
        scores: Vec<f64>,
        labels: Vec<u8>,
        truth: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = scores.len();
        if ids.len() != n || labels.len() != n || truth.as_ref().map_or(false, |t| t.len() != n) {
            return Err(Error::DimensionMismatch(
                "score set vectors differ in length".into(),
            ));
        }
        if scores
            .iter()
            .chain(truth.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("score set".into()));
        }
        if labels.iter().any(|l| *l > 1) {
            return Err(Error::Invalid("labels must be 0 or 1".into()));
        }
        Ok(Self {
            ids,
            scores,
            labels,
            truth,
        })
    }

    /// Unnamed scores, for tests and ad-hoc use.
    pub fn from_scores(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Self::new(ids, scores, labels, None)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|l| **l == 1).count();
        (self.len() - pos, pos)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (neg, pos) = self.class_counts();
        if neg == 0 || pos == 0 {
            return Err(Error::SingleClass(format!(
                "{neg} negatives and {pos} positives"
            )));
        }
        Ok((neg, pos))
    }

    /// Scores split by label: (negatives, positives).
    pub fn by_class(&self) -> (Vec<f64>, Vec<f64>) {
        let mut neg = Vec::new();
        let mut pos = Vec::new();
        for (s, l) in self.scores.iter().zip(&self.labels) {
            if *l == 1 {
                pos.push(*s)
            } else {
                neg.push(*s)
            }
        }
        (neg, pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryMetrics {
    pub auroc: f64,
    pub auprc: f64,
}

/// Mann-Whitney AUROC from average ranks (ties get half credit).
pub fn auroc(s: &ScoreSet) -> Result<f64> {
    let (neg, pos) = s.require_both_classes()?;
    let ranks = average_ranks(&s.scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(&s.labels)
        .filter(|(_, l)| **l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: `Σ (R_k − R_{k−1}) P_k` over distinct thresholds in
/// decreasing order, so tied scores enter together.
pub fn average_precision(s: &ScoreSet) -> Result<f64> {
    let (_, pos) = s.require_both_classes()?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == t {
            tp += s.labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

pub fn binary_metrics(s: &ScoreSet) -> Result<BinaryMetrics> {
    Ok(BinaryMetrics {
        auroc: auroc(s)?,
        auprc: average_precision(s)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub r2: f64,
    pub spearman_rho: f64,
}

/// R² of scores against the continuous truth and Spearman ρ (Pearson of
/// average ranks; 0 when either side is constant).
pub fn regression_metrics(s: &ScoreSet) -> Result<RegressionMetrics> {
    let truth = s
        .truth
        .as_ref()
        .ok_or_else(|| Error::Invalid("regression metrics need continuous truth".into()))?;
    if s.len() < 3 {
        return Err(Error::Invalid(format!(
            "regression metrics need n >= 3, got {}",
            s.len()
        )));
    }
    let m = mean(truth);
    let ss_tot: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateTarget(
            "constant truth, R² undefined".into(),
        ));
    }
    let ss_res: f64 = truth
        .iter()
        .zip(&s.scores)
        .map(|(t, p)| (t - p).powi(2))
        .sum();
    let rho = pearson(&average_ranks(&s.scores), &average_ranks(truth));
    Ok(RegressionMetrics {
        r2: 1.0 - ss_res / ss_tot,
        spearman_rho: if rho.is_finite() { rho } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separation {
    pub median_neg: f64,
    pub iqr_neg: f64,
    pub median_pos: f64,
    pub iqr_pos: f64,
    pub delta: f64,
}

/// Per-class median and IQR of jointly min-max normalized scores.
pub fn separation_stats(s: &ScoreSet) -> Result<Separation> {
    s.require_both_classes()?;
    let norm = min_max_normalize(&s.scores)
        .ok_or_else(|| Error::DegenerateRange("constant scores".into()))?;
    let normalized = ScoreSet {
        scores: norm,
        ..s.clone()
    };
    let (neg, pos) = normalized.by_class();
    let iqr = |v: &[f64]| quantile_linear(v, 0.75) - quantile_linear(v, 0.25);
    let (median_neg, median_pos) = (median(&neg), median(&pos));
    Ok(Separation {
        median_neg,
        iqr_neg: iqr(&neg),
        median_pos,
        iqr_pos: iqr(&pos),
        delta: (median_pos - median_neg).abs(),
    })
}

/// `100 · (delta_reg − delta_clf) / delta_clf`.
pub fn improvement_pct(delta_reg: f64, delta_clf: f64) -> Result<f64> {
    if delta_clf == 0.0 {
        return Err(Error::Degenerate(
            "classification separation is zero".into(),
        ));
    }
    Ok(100.0 * (delta_reg - delta_clf) / delta_clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, a) in scores.iter().enumerate() {
            for (j, b) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if a > b {
                        num += 1.0;
                    } else if a == b {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn set(scores: &[f64], labels: &[u8]) -> ScoreSet {
        ScoreSet::from_scores(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn binary_examples() {
        let m = binary_metrics(&set(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap();
        assert_eq!((m.auroc, m.auprc), (1.0, 1.0));
        assert_eq!(auroc(&set(&[0.3; 5], &[1, 0, 1, 0, 0])).unwrap(), 0.5);
        assert_eq!(
            auroc(&set(&[0.8, 0.4, 0.6, 0.2], &[1, 0, 0, 1])).unwrap(),
            0.5
        );
        assert!(matches!(
            auroc(&set(&[0.1, 0.2], &[1, 1])),
            Err(Error::SingleClass(_))
        ));
        // ranked 1,0,1: AP = 0.5 * 1 + 0.5 * 2/3
        let ap = average_precision(&set(&[0.9, 0.5, 0.1], &[1, 0, 1])).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn regression_examples() {
        let truth = vec![0.1, 0.5, 0.3, 0.9, 0.7];
        let mk = |scores: Vec<f64>| {
            ScoreSet::new(
                (0..5).map(|i| i.to_string()).collect(),
                scores,
                vec![0, 1, 0, 1, 1],
                Some(truth.clone()),
            )
            .unwrap()
        };
        let same = regression_metrics(&mk(truth.clone())).unwrap();
        assert_eq!((same.r2, same.spearman_rho), (1.0, 1.0));
        let m = mean(&truth);
        assert!(regression_metrics(&mk(vec![m; 5])).unwrap().r2.abs() < 1e-15);
        let neg = regression_metrics(&mk(truth.iter().map(|t| -t).collect())).unwrap();
        assert!((neg.spearman_rho + 1.0).abs() < 1e-15);
        let flat = ScoreSet::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, 2.0, 3.0],
            vec![0, 1, 0],
            Some(vec![2.0; 3]),
        )
        .unwrap();
        assert!(regression_metrics(&flat).is_err());
    }

    #[test]
    fn separation_examples() {
        let neg: Vec<f64> = (0..=10).map(|i| i as f64 / 100.0).collect();
        let pos: Vec<f64> = (0..=10).map(|i| 0.9 + i as f64 / 100.0).collect();
        let labels: Vec<u8> = neg.iter().map(|_| 0).chain(pos.iter().map(|_| 1)).collect();
        let scores: Vec<f64> = neg.iter().chain(&pos).copied().collect();
        assert!(separation_stats(&set(&scores, &labels)).unwrap().delta >= 0.8);
        let same = set(&[0.1, 0.1, 0.5, 0.5, 0.9, 0.9], &[0, 1, 0, 1, 0, 1]);
        assert_eq!(separation_stats(&same).unwrap().delta, 0.0);
        assert!(matches!(
            separation_stats(&set(&[2.0; 4], &[0, 1, 0, 1])),
            Err(Error::DegenerateRange(_))
        ));
    }

    #[test]
    fn improvement_examples() {
        assert_eq!(improvement_pct(0.2, 0.2).unwrap(), 0.0);
        assert_eq!(improvement_pct(0.4, 0.2).unwrap(), 100.0);
        let brca = improvement_pct(0.53 - 0.26, 0.64 - 0.43).unwrap();
        assert!((brca - 29.0).abs() <= 2.0, "{brca}");
        assert!(improvement_pct(0.3, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_oracle(
            data in prop::collection::vec((0u8..20, 0u8..2), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 4.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert_eq!(auroc(&set(&scores, &labels)).unwrap(), pairwise_auroc(&scores, &labels));
        }

        #[test]
        fn auroc_invariant_under_monotone_maps(
            data in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let base = auroc(&set(&scores, &labels)).unwrap();
            let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0).collect();
            prop_assert_eq!(auroc(&set(&cubed, &labels)).unwrap(), base);
            if let Some(norm) = min_max_normalize(&scores) {
                prop_assert_eq!(auroc(&set(&norm, &labels)).unwrap(), base);
            }
        }

        #[test]
        fn spearman_invariant_under_monotone_maps(
            pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let n = scores.len();
            let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            let labels = vec![0u8; n];
            let a = ScoreSet::new(ids.clone(), scores.clone(), labels.clone(), Some(truth.clone())).unwrap();
            prop_assume!(regression_metrics(&a).is_ok());
            let b = ScoreSet::new(ids, scores.iter().map(|s| s.exp()).collect(), labels, Some(truth.iter().map(|t| t * 3.0 - 1.0).collect())).unwrap();
            let (ra, rb) = (regression_metrics(&a).unwrap().spearman_rho, regression_metrics(&b).unwrap().spearman_rho);
            prop_assert!((ra - rb).abs() < 1e-12);
        }
    }
}
