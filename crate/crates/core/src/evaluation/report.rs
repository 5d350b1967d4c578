use std::path::Path;

use super::metrics::{binary_metrics, regression_metrics, separation_stats, ScoreSet, Separation};
use super::stats::{ci95, class_score_ttest, StatResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub fold: usize,
    pub n: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub r2: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub separation: Separation,
    /// Welch test of positive against negative scores.
    pub class_p_value: f64,
}

pub fn evaluate_scores(fold: usize, s: &ScoreSet) -> Result<MetricReport> {
    let b = binary_metrics(s)?;
    let reg = match &s.truth {
        Some(_) => Some(regression_metrics(s)?),
        None => None,
    };
    let class_p_value = if s.by_class().0.len() >= 2 && s.by_class().1.len() >= 2 {
        class_score_ttest(s)?.p_value
    } else {
        f64::NAN
    };
    Ok(MetricReport {
        fold,
        n: s.len(),
        auroc: b.auroc,
        auprc: b.auprc,
        r2: reg.map(|r| r.r2),
        spearman_rho: reg.map(|r| r.spearman_rho),
        separation: separation_stats(s)?,
        class_p_value,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_fold_metrics(path: &Path, model: &str, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model",
        "fold",
        "n",
        "auroc",
        "auprc",
        "r2",
        "spearman_rho",
        "median_neg",
        "iqr_neg",
        "median_pos",
        "iqr_pos",
        "separation_delta",
        "class_p_value",
    ])?;
    for r in reports {
        let s = &r.separation;
        w.write_record([
            model.to_string(),
            r.fold.to_string(),
            r.n.to_string(),
            r.auroc.to_string(),
            r.auprc.to_string(),
            opt(r.r2),
            opt(r.spearman_rho),
            s.median_neg.to_string(),
            s.iqr_neg.to_string(),
            s.median_pos.to_string(),
            s.iqr_pos.to_string(),
            s.delta.to_string(),
            r.class_p_value.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One model's row of the cohort summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cohort: String,
    pub model: String,
    pub auroc: f64,
    pub auroc_ci95: f64,
    pub auprc: f64,
    pub auprc_ci95: f64,
    pub p_value: f64,
}

/// Fold means with 95% half-widths; the p-value is the class-score test on
/// the pooled out-of-fold scores.
pub fn summarize(
    cohort: &str,
    model: &str,
    folds: &[MetricReport],
    pooled: &ScoreSet,
) -> Result<SummaryRow> {
    if folds.is_empty() {
        return Err(Error::Invalid("no fold reports to summarize".into()));
    }
    let (auroc, auroc_ci95) = ci95(&folds.iter().map(|r| r.auroc).collect::<Vec<_>>());
    let (auprc, auprc_ci95) = ci95(&folds.iter().map(|r| r.auprc).collect::<Vec<_>>());
    Ok(SummaryRow {
        cohort: cohort.into(),
        model: model.into(),
        auroc,
        auroc_ci95,
        auprc,
        auprc_ci95,
        p_value: class_score_ttest(pooled)?.p_value,
    })
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cohort",
        "model",
        "auroc",
        "auroc_ci95",
        "auprc",
        "auprc_ci95",
        "p_value",
    ])?;
    for r in rows {
        w.write_record([
            r.cohort.clone(),
            r.model.clone(),
            r.auroc.to_string(),
            r.auroc_ci95.to_string(),
            r.auprc.to_string(),
            r.auprc_ci95.to_string(),
            r.p_value.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Out-of-fold predictions: one row per tested patient.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreRow {
    pub patient_id: String,
    pub fold: usize,
    pub score: f64,
    pub label: u8,
    pub truth: Option<f64>,
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Builds a score set from rows, keeping only those accepted by `keep`.
pub fn score_set(rows: &[ScoreRow], keep: impl Fn(&ScoreRow) -> bool) -> Result<ScoreSet> {
    let picked: Vec<&ScoreRow> = rows.iter().filter(|r| keep(r)).collect();
    let truth = if picked.iter().all(|r| r.truth.is_some()) && !picked.is_empty() {
        Some(picked.iter().map(|r| r.truth.unwrap()).collect())
    } else {
        None
    };
    ScoreSet::new(
        picked.iter().map(|r| r.patient_id.clone()).collect(),
        picked.iter().map(|r| r.score).collect(),
        picked.iter().map(|r| r.label).collect(),
        truth,
    )
}

/// A labelled statistical test for the comparison tables.
#[derive(Debug, Clone, PartialEq)]
pub struct StatRow {
    pub cohort: String,
    pub comparison: String,
    pub result: StatResult,
}

pub fn write_stat_table(path: &Path, rows: &[StatRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cohort",
        "comparison",
        "test",
        "statistic",
        "dof1",
        "dof2",
        "p_value",
        "alpha_effective",
        "significant",
        "zero_variance",
    ])?;
    for r in rows {
        let s = &r.result;
        w.write_record([
            r.cohort.clone(),
            r.comparison.clone(),
            s.kind.to_string(),
            s.statistic.to_string(),
            s.dof.0.to_string(),
            opt(s.dof.1),
            s.p_value.to_string(),
            s.alpha_effective.to_string(),
            s.significant().to_string(),
            s.zero_variance.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
