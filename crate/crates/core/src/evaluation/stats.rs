use std::fmt;

use ndarray::{Array2, Axis};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use super::metrics::ScoreSet;
use crate::error::{Error, Result};
use crate::numeric::{mean, sample_variance};

pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    RmAnova,
    PairedTOneSided,
    PairedTTwoSided,
    IndependentTTwoSided,
}

impl StatKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatKind::RmAnova => "rm_anova",
            StatKind::PairedTOneSided => "paired_t_one_sided",
            StatKind::PairedTTwoSided => "paired_t_two_sided",
            StatKind::IndependentTTwoSided => "independent_t_two_sided",
        }
    }
}

impl fmt::Display for StatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Alternative hypothesis of a t-test, on `mean(a) − mean(b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sided {
    Two,
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatResult {
    pub kind: StatKind,
    pub statistic: f64,
    /// Numerator and, for ANOVA, denominator degrees of freedom.
    pub dof: (f64, Option<f64>),
    pub p_value: f64,
    pub alpha_effective: f64,
    /// The test statistic came from a zero-variance sample.
    pub zero_variance: bool,
}

impl StatResult {
    /// Divides the significance level by the number of hypotheses.
    pub fn with_bonferroni(mut self, m: usize) -> Self {
        self.alpha_effective = bonferroni_alpha(m);
        self
    }

    pub fn significant(&self) -> bool {
        self.p_value < self.alpha_effective
    }
}

pub fn bonferroni_alpha(m: usize) -> f64 {
    ALPHA / m.max(1) as f64
}

/// One-way within-subjects ANOVA on an `n_subjects × k_treatments` matrix.
pub fn rm_anova(x: &Array2<f64>) -> Result<StatResult> {
    let (n, k) = x.dim();
    if n < 2 || k < 2 {
        return Err(Error::Invalid(format!(
            "repeated-measures ANOVA needs n, k >= 2, got {n} x {k}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ANOVA matrix".into()));
    }
    let col_means = x.mean_axis(Axis(0)).unwrap();
    let row_means = x.mean_axis(Axis(1)).unwrap();
    // Σ_j (m_j − m̄)² = (1/k) Σ_{j<l} (m_j − m_l)², exactly zero for equal means
    let mut pair_sq = 0.0;
    for j in 0..k {
        for l in j + 1..k {
            pair_sq += (col_means[j] - col_means[l]).powi(2);
        }
    }
    let ss_treat = n as f64 * pair_sq / k as f64;
    let ss_within: f64 = x
        .outer_iter()
        .zip(row_means.iter())
        .map(|(row, m)| row.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let ss_err = (ss_within - ss_treat).max(0.0);
    let df1 = (k - 1) as f64;
    let df2 = ((k - 1) * (n - 1)) as f64;
    if x.iter().all(|v| *v == x[[0, 0]]) {
        return Err(Error::Degenerate("every entry is identical".into()));
    }
    let (f, p, zero) = if ss_treat == 0.0 {
        (0.0, 1.0, false)
    } else if ss_err == 0.0 {
        (f64::INFINITY, 0.0, true)
    } else {
        let f = (ss_treat / df1) / (ss_err / df2);
        let dist = FisherSnedecor::new(df1, df2).map_err(|e| Error::Invalid(e.to_string()))?;
        (f, dist.sf(f).clamp(0.0, 1.0), false)
    };
    Ok(StatResult {
        kind: StatKind::RmAnova,
        statistic: f,
        dof: (df1, Some(df2)),
        p_value: p,
        alpha_effective: ALPHA,
        zero_variance: zero,
    })
}

fn t_p_value(t: f64, df: f64, sided: Sided) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Invalid(e.to_string()))?;
    let p = match sided {
        Sided::Two => 2.0 * dist.sf(t.abs()),
        Sided::Greater => dist.sf(t),
        Sided::Less => dist.cdf(t),
    };
    Ok(p.clamp(0.0, 1.0))
}

/// p-value for an infinite or undefined statistic from zero variance.
fn degenerate_p(t: f64, sided: Sided) -> f64 {
    match sided {
        _ if t == 0.0 => 1.0,
        Sided::Two => 0.0,
        Sided::Greater => {
            if t > 0.0 {
                0.0
            } else {
                1.0
            }
        }
        Sided::Less => {
            if t < 0.0 {
                0.0
            } else {
                1.0
            }
        }
    }
}

fn t_result(kind: StatKind, mean_diff: f64, se: f64, df: f64, sided: Sided) -> Result<StatResult> {
    let (t, p, zero) = if se == 0.0 {
        let t = if mean_diff > 0.0 {
            f64::INFINITY
        } else if mean_diff < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        (t, degenerate_p(t, sided), true)
    } else {
        let t = mean_diff / se;
        (t, t_p_value(t, df, sided)?, false)
    };
    Ok(StatResult {
        kind,
        statistic: t,
        dof: (df, None),
        p_value: p,
        alpha_effective: ALPHA,
        zero_variance: zero,
    })
}

/// Dependent t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64], sided: Sided) -> Result<StatResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Invalid(format!(
            "paired t-test needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let se = (sample_variance(&d) / n).sqrt();
    let kind = if sided == Sided::Two {
        StatKind::PairedTTwoSided
    } else {
        StatKind::PairedTOneSided
    };
    t_result(kind, mean(&d), se, n - 1.0, sided)
}

/// Welch two-sample t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64], sided: Sided) -> Result<StatResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid(format!(
            "independent t-test needs two samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let se = (va + vb).sqrt();
    let df = if se == 0.0 {
        na + nb - 2.0
    } else {
        (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0))
    };
    t_result(
        StatKind::IndependentTTwoSided,
        mean(a) - mean(b),
        se,
        df,
        sided,
    )
}

/// Two-sided Welch test of positive-class against negative-class scores.
pub fn class_score_ttest(s: &ScoreSet) -> Result<StatResult> {
    let (neg, pos) = s.by_class();
    if neg.is_empty() || pos.is_empty() {
        return Err(Error::SingleClass(format!(
            "{} negatives and {} positives",
            neg.len(),
            pos.len()
        )));
    }
    welch_t_test(&pos, &neg, Sided::Two)
}

/// Mean and 95% half-width `1.96 · sd / √n` across folds.
pub fn ci95(values: &[f64]) -> (f64, f64) {
    let m = mean(values);
    if values.len() < 2 {
        return (m, 0.0);
    }
    (
        m,
        1.96 * sample_variance(values).sqrt() / (values.len() as f64).sqrt(),
    )
}
