use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;

use super::cox::{fit_cox, CoxResult, SurvivalDataset};
use crate::attmil::{HeadKind, ModelParams};
use crate::data_model::Cohort;
use crate::error::{Error, Result};
use crate::numeric::lower_median;
use crate::training::bag_score;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Continuous,
    BinarizedAtMedian,
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::Continuous => "continuous",
            ScoreMode::BinarizedAtMedian => "binarized_at_median",
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(ScoreMode::Continuous),
            "binarized_at_median" => Ok(ScoreMode::BinarizedAtMedian),
            _ => Err(Error::Invalid(format!("unknown score mode {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateSet {
    /// Univariate: the model score only.
    None,
    AgeSexStage,
}

/// Mean score of the fold models for every patient with a bag. Classification
/// models contribute the positive-class probability.
pub fn deploy_mean_scores(cohort: &Cohort, models: &[ModelParams]) -> Result<BTreeMap<String, f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Invalid("no fold models to deploy".into()))?;
    if models.iter().any(|m| m.config != first.config) {
        return Err(Error::Invalid("fold models do not share one architecture".into()));
    }
    cohort
        .bags()
        .iter()
        .map(|(id, bag)| {
            let h = bag.features_f64();
            let mut total = 0.0;
            for m in models {
                total += bag_score(m, h.view())?;
            }
            Ok((id.clone(), total / models.len() as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prognosis {
    pub result: CoxResult,
    /// Patients dropped for missing survival data or covariates.
    pub n_deleted: usize,
    /// The score covariate actually entered into the model.
    pub covariate: BTreeMap<String, f64>,
}

/// Deploys the fold models and fits a Cox model on the mean score.
/// Classification models enter as argmax labels; regression scores are kept
/// continuous or split at the cohort (lower) median depending on `mode`.
pub fn score_prognosis(
    cohort: &Cohort,
    models: &[ModelParams],
    mode: ScoreMode,
    covariates: CovariateSet,
) -> Result<Prognosis> {
    let scores = deploy_mean_scores(cohort, models)?;
    let head = models[0].config.head;
    let covariate: BTreeMap<String, f64> = match (head, mode) {
        (HeadKind::Classification, _) => scores
            .iter()
            .map(|(id, &p)| (id.clone(), if p > 0.5 { 1.0 } else { 0.0 }))
            .collect(),
        (HeadKind::Regression, ScoreMode::Continuous) => scores,
        (HeadKind::Regression, ScoreMode::BinarizedAtMedian) => {
            let values: Vec<f64> = scores.values().copied().collect();
            let cut = lower_median(&values);
            scores
                .iter()
                .map(|(id, &s)| (id.clone(), if s > cut { 1.0 } else { 0.0 }))
                .collect()
        }
    };
    let (data, n_deleted) = survival_dataset(cohort, &covariate, covariates)?;
    if n_deleted > 0 {
        log::info!("listwise deletion removed {n_deleted} patients");
    }
    Ok(Prognosis {
        result: fit_cox(&data)?,
        n_deleted,
        covariate,
    })
}

/// Assembles score (+ age, sex, stage) rows with listwise deletion.
pub fn survival_dataset(
    cohort: &Cohort,
    score: &BTreeMap<String, f64>,
    covariates: CovariateSet,
) -> Result<(SurvivalDataset, usize)> {
    let mut names = vec!["score".to_string()];
    if covariates == CovariateSet::AgeSexStage {
        names.extend(["age", "sex", "stage"].map(String::from));
    }
    let mut time = Vec::new();
    let mut event = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut deleted = 0;
    for (id, &s) in score {
        let Some(rec) = cohort.record(id) else {
            deleted += 1;
            continue;
        };
        let (Some(t), Some(e)) = (rec.survival_days, rec.event) else {
            deleted += 1;
            continue;
        };
        let mut row = vec![s];
        if covariates == CovariateSet::AgeSexStage {
            match (rec.age, rec.sex.code(), rec.stage) {
                (Some(a), Some(x), Some(st)) => row.extend([a, x, f64::from(st)]),
                _ => {
                    deleted += 1;
                    continue;
                }
            }
        }
        time.push(t);
        event.push(e);
        rows.extend(row);
    }
    let n = time.len();
    if n == 0 {
        return Err(Error::Invalid("no patients with complete survival data".into()));
    }
    let x = DMatrix::from_row_slice(n, names.len(), &rows);
    Ok((SurvivalDataset::new(names, time, event, x)?, deleted))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SurvivalRow {
    pub model: String,
    pub mode: String,
    pub covariate: String,
    pub hr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p: f64,
    pub n_used: usize,
    pub n_events: usize,
}

pub fn survival_rows(model: &str, mode: &str, r: &CoxResult) -> Vec<SurvivalRow> {
    r.coefficients
        .iter()
        .map(|c| SurvivalRow {
            model: model.into(),
            mode: mode.into(),
            covariate: c.name.clone(),
            hr: c.hr,
            ci_low: c.ci_low,
            ci_high: c.ci_high,
            p: c.p,
            n_used: r.n_used,
            n_events: r.n_events,
        })
        .collect()
}

pub fn write_survival_report(path: &Path, rows: &[SurvivalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
