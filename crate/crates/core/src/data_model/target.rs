use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numeric::{canonical_sum, lower_median};

/// Clinical HRD positivity threshold (positive when score ≥ 42).
pub const HRD_CUTOFF: f64 = 42.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinarizeRule {
    FixedCutoff,
    MedianSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    PositiveIfGe,
    PositiveIfGt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub name: String,
    pub kind: BinarizeRule,
    /// Set for fixed cutoffs; unset for median splits until fitted.
    pub cutoff: Option<f64>,
    pub direction: Direction,
}

impl TargetSpec {
    pub fn hrd() -> Self {
        Self::fixed("HRD", HRD_CUTOFF, Direction::PositiveIfGe)
    }

    pub fn fixed(name: impl Into<String>, cutoff: f64, direction: Direction) -> Self {
        Self {
            name: name.into(),
            kind: BinarizeRule::FixedCutoff,
            cutoff: Some(cutoff),
            direction,
        }
    }

    /// Median split, positive strictly above the fit-set lower median.
    pub fn median_split(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: BinarizeRule::MedianSplit,
            cutoff: None,
            direction: Direction::PositiveIfGt,
        }
    }

    /// Resolves the cutoff, using only `fit_ids` for median splits.
    pub fn fit(
        &self,
        values: &BTreeMap<String, f64>,
        fit_ids: &BTreeSet<String>,
    ) -> Result<FittedCutoff> {
        let cutoff = match self.kind {
            BinarizeRule::FixedCutoff => self.cutoff.ok_or_else(|| {
                Error::Invalid(format!("target {}: fixed cutoff not set", self.name))
            })?,
            BinarizeRule::MedianSplit => {
                if fit_ids.is_empty() {
                    return Err(Error::Invalid(format!(
                        "target {}: empty fit set for median split",
                        self.name
                    )));
                }
                let fit: Vec<f64> = fit_ids
                    .iter()
                    .map(|id| {
                        values.get(id).copied().ok_or_else(|| {
                            Error::Invalid(format!("fit patient {id} has no target value"))
                        })
                    })
                    .collect::<Result<_>>()?;
                if fit.iter().all(|v| *v == fit[0]) {
                    return Err(Error::DegenerateTarget(format!(
                        "all {} fit values of {} are identical; median split impossible",
                        fit.len(),
                        self.name
                    )));
                }
                lower_median(&fit)
            }
        };
        Ok(FittedCutoff {
            cutoff,
            direction: self.direction,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedCutoff {
    pub cutoff: f64,
    pub direction: Direction,
}

impl FittedCutoff {
    pub fn label(&self, value: f64) -> u8 {
        let positive = match self.direction {
            Direction::PositiveIfGe => value >= self.cutoff,
            Direction::PositiveIfGt => value > self.cutoff,
        };
        positive as u8
    }
}

pub fn binarize_target(
    values: &BTreeMap<String, f64>,
    spec: &TargetSpec,
    fit_ids: &BTreeSet<String>,
) -> Result<BTreeMap<String, u8>> {
    let fitted = spec.fit(values, fit_ids)?;
    Ok(values
        .iter()
        .map(|(id, v)| (id.clone(), fitted.label(*v)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrdSubscores {
    pub loh: f64,
    pub tai: f64,
    pub lst: f64,
}

/// HRD composite score: LOH + TAI + LST.
pub fn compose_hrd(sub: HrdSubscores) -> Result<f64> {
    for (name, v) in [("loh", sub.loh), ("tai", sub.tai), ("lst", sub.lst)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Invalid(format!(
                "HRD subscore {name} = {v} must be finite and nonnegative"
            )));
        }
    }
    // summed in sorted order so the composite is exactly symmetric
    Ok(canonical_sum(&mut [sub.loh, sub.tai, sub.lst]))
}
