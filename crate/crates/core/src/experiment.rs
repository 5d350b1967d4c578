//! The k-fold protocol shared by the CLI and the acceptance suite: train one
//! model per fold, score only that fold's test patients, and compare presets.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use crate::attmil::ModelParams;
use crate::data_model::{Cohort, FittedCutoff, TargetSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_scores, improvement_pct, paired_t_test, rm_anova, score_set, summarize,
    MetricReport, ScoreRow, Separation, Sided, StatRow, SummaryRow,
};
use crate::splitting::FoldPlan;
use crate::training::{bag_score, train_model, TrainOptions, TrainOutcome, TrainPreset};

/// Cutoff for the fold, fitted on its training patients only.
pub fn fold_cutoff(cohort: &Cohort, plan: &FoldPlan, fold: usize, spec: &TargetSpec) -> Result<FittedCutoff> {
    let f = plan.fold(fold)?;
    let fit: BTreeSet<String> = f
        .train_ids
        .iter()
        .filter(|id| cohort.record(id).is_some())
        .cloned()
        .collect();
    spec.fit(&cohort.target_values(), &fit)
}

/// Scores the test patients of `fold`; no other patient's bag is read.
pub fn test_scores(
    cohort: &Cohort,
    plan: &FoldPlan,
    fold: usize,
    params: &ModelParams,
    cutoff: &FittedCutoff,
) -> Result<Vec<ScoreRow>> {
    let f = plan.fold(fold)?;
    f.test_ids
        .iter()
        .filter_map(|id| cohort.bag(id).map(|b| (id, b)))
        .map(|(id, bag)| {
            let truth = cohort
                .record(id)
                .ok_or_else(|| Error::Invalid(format!("test patient {id} has no record")))?
                .target_value;
            Ok(ScoreRow {
                patient_id: id.clone(),
                fold,
                score: bag_score(params, bag.features_f64().view())?,
                label: cutoff.label(truth),
                truth: Some(truth),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CvRun {
    pub preset: TrainPreset,
    pub folds: Vec<usize>,
    pub outcomes: Vec<TrainOutcome>,
    /// Out-of-fold test predictions, ordered by fold then patient.
    pub scores: Vec<ScoreRow>,
}

impl CvRun {
    pub fn fold_reports(&self) -> Result<Vec<MetricReport>> {
        self.folds
            .iter()
            .map(|&f| evaluate_scores(f, &score_set(&self.scores, |r| r.fold == f)?))
            .collect()
    }
}

/// Training seed of `fold`, so that folds differ but do not depend on which
/// other folds run alongside.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add(fold as u64)
}

/// Runs `work` for each fold on up to `jobs` threads, returning results in
/// the order of `folds`.
pub fn par_folds<T: Send>(
    folds: &[usize],
    jobs: usize,
    work: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(folds.len());
    for chunk in folds.chunks(jobs.max(1)) {
        let done: Vec<Result<T>> = std::thread::scope(|s| {
            let work = &work;
            let handles: Vec<_> = chunk.iter().map(|&f| s.spawn(move || work(f))).collect();
            handles.into_iter().map(|h| h.join().expect("fold worker panicked")).collect()
        });
        for r in done {
            out.push(r?);
        }
    }
    Ok(out)
}

pub fn train_folds(
    cohort: &Cohort,
    plan: &FoldPlan,
    preset: &TrainPreset,
    opts: &TrainOptions,
    folds: &[usize],
    jobs: usize,
) -> Result<Vec<TrainOutcome>> {
    par_folds(folds, jobs, |fold| {
        let fold_opts = TrainOptions {
            seed: fold_seed(opts.seed, fold),
            ..opts.clone()
        };
        train_model(cohort, plan, fold, preset, &fold_opts)
    })
}

/// Trains and scores each requested fold. Results do not depend on `jobs`.
pub fn cross_validate(
    cohort: &Cohort,
    plan: &FoldPlan,
    preset: &TrainPreset,
    opts: &TrainOptions,
    folds: &[usize],
    jobs: usize,
) -> Result<CvRun> {
    let outcomes = train_folds(cohort, plan, preset, opts, folds, jobs)?;
    let mut scores = Vec::new();
    for (&fold, out) in folds.iter().zip(&outcomes) {
        let cut = fold_cutoff(cohort, plan, fold, &opts.target)?;
        scores.extend(test_scores(cohort, plan, fold, &out.params, &cut)?);
    }
    Ok(CvRun {
        preset: preset.clone(),
        folds: folds.to_vec(),
        outcomes,
        scores,
    })
}

/// One model's class separation, as in the improvement table.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationRow {
    pub cohort: String,
    pub model: String,
    pub separation: Separation,
    /// Against the classification model, for regression rows.
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub summary: Vec<SummaryRow>,
    pub stats: Vec<StatRow>,
    pub separation: Vec<SeparationRow>,
}

/// Summary per model, repeated-measures ANOVA over fold AUROCs, one-sided
/// paired t-tests of `focus` against every other model (Bonferroni over
/// those), and pooled score separation.
pub fn compare_runs(cohort: &str, runs: &[(&str, &[ScoreRow])], focus: &str, reference: &str) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::Invalid("comparison needs at least two models".into()));
    }
    let mut summary = Vec::new();
    let mut auroc_by_model: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut separation = Vec::new();
    for (name, rows) in runs {
        let folds: BTreeSet<usize> = rows.iter().map(|r| r.fold).collect();
        let reports: Vec<MetricReport> = folds
            .iter()
            .map(|&f| evaluate_scores(f, &score_set(rows, |r| r.fold == f)?))
            .collect::<Result<_>>()?;
        let pooled = score_set(rows, |_| true)?;
        summary.push(summarize(cohort, name, &reports, &pooled)?);
        auroc_by_model.insert(name, reports.iter().map(|r| r.auroc).collect());
        separation.push(SeparationRow {
            cohort: cohort.into(),
            model: name.to_string(),
            separation: evaluate_scores(0, &pooled)?.separation,
            improvement_pct: None,
        });
    }
    let n = auroc_by_model.values().next().map_or(0, Vec::len);
    if auroc_by_model.values().any(|v| v.len() != n) {
        return Err(Error::DimensionMismatch("models were evaluated on different folds".into()));
    }

    let names: Vec<&str> = runs.iter().map(|r| r.0).collect();
    let mut x = Array2::zeros((n, names.len()));
    for (j, name) in names.iter().enumerate() {
        for (i, v) in auroc_by_model[name].iter().enumerate() {
            x[[i, j]] = *v;
        }
    }
    let mut stats = vec![StatRow {
        cohort: cohort.into(),
        comparison: format!("rm_anova auroc ({})", names.join(", ")),
        result: rm_anova(&x)?,
    }];
    let others: Vec<&str> = names.iter().copied().filter(|m| *m != focus).collect();
    let focus_auroc = auroc_by_model
        .get(focus)
        .ok_or_else(|| Error::Invalid(format!("focus model {focus} is not among the runs")))?;
    for other in &others {
        let r = paired_t_test(focus_auroc, &auroc_by_model[other], Sided::Greater)?
            .with_bonferroni(others.len());
        stats.push(StatRow {
            cohort: cohort.into(),
            comparison: format!("{focus} > {other} auroc"),
            result: r,
        });
    }

    let ref_delta = separation
        .iter()
        .find(|s| s.model == reference)
        .map(|s| s.separation.delta);
    for s in separation.iter_mut().filter(|s| s.model != reference) {
        s.improvement_pct = ref_delta.and_then(|d| improvement_pct(s.separation.delta, d).ok());
    }
    Ok(Comparison {
        summary,
        stats,
        separation,
    })
}

pub fn write_separation_table(path: &std::path::Path, rows: &[SeparationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cohort",
        "model",
        "median_neg",
        "iqr_neg",
        "median_pos",
        "iqr_pos",
        "separation_delta",
        "improvement_pct",
    ])?;
    for r in rows {
        let s = &r.separation;
        w.write_record([
            r.cohort.clone(),
            r.model.clone(),
            s.median_neg.to_string(),
            s.iqr_neg.to_string(),
            s.median_pos.to_string(),
            s.iqr_pos.to_string(),
            s.delta.to_string(),
            r.improvement_pct.map_or_else(String::new, |v| v.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::binarize_target;
    use crate::splitting::site_aware_folds;
    use crate::synth::{generate_cohort, SynthConfig};

    fn setup() -> (Cohort, FoldPlan) {
        let s = generate_cohort(&SynthConfig {
            n_patients: 60,
            n_sites: 6,
            instances_per_bag: (4, 8),
            d: 6,
            signal_dim_count: 3,
            signal_strength: 2.0,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let values = s.cohort.target_values();
        let ids = values.keys().cloned().collect();
        let labels = binarize_target(&values, &TargetSpec::median_split("t"), &ids).unwrap();
        let plan = site_aware_folds(&s.cohort, &labels, 3, 0.2, 5, 0.2).unwrap();
        (s.cohort, plan)
    }

    fn opts() -> TrainOptions {
        TrainOptions {
            h_att: 8,
            h_mlp: 8,
            seed: 4,
            ..TrainOptions::default()
        }
    }

    fn short(mut p: TrainPreset) -> TrainPreset {
        p.epochs = 3;
        p
    }

    #[test]
    fn scores_cover_each_test_patient_once() {
        let (cohort, plan) = setup();
        let run = cross_validate(&cohort, &plan, &short(TrainPreset::camil_regression()), &opts(), &[0, 1, 2], 2).unwrap();
        let ids: Vec<&String> = run.scores.iter().map(|r| &r.patient_id).collect();
        let unique: BTreeSet<&String> = ids.iter().copied().collect();
        assert_eq!(ids.len(), unique.len());
        assert_eq!(unique.len(), cohort.len());
        for r in &run.scores {
            assert!(plan.fold(r.fold).unwrap().test_ids.contains(&r.patient_id));
        }
        assert_eq!(run.fold_reports().unwrap().len(), 3);
    }

    #[test]
    fn fold_results_do_not_depend_on_jobs() {
        let (cohort, plan) = setup();
        let p = short(TrainPreset::camil_regression());
        let a = cross_validate(&cohort, &plan, &p, &opts(), &[0, 1, 2], 1).unwrap();
        let b = cross_validate(&cohort, &plan, &p, &opts(), &[0, 1, 2], 3).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn test_scoring_ignores_non_test_bags() {
        // scoring only needs the test bags: dropping train/val bags leaves it unchanged
        let (cohort, plan) = setup();
        let p = short(TrainPreset::camil_regression());
        let run = cross_validate(&cohort, &plan, &p, &opts(), &[0], 1).unwrap();
        let cut = fold_cutoff(&cohort, &plan, 0, &TargetSpec::median_split("t")).unwrap();
        let test = &plan.fold(0).unwrap().test_ids;
        let bags: Vec<_> = cohort.bags().values().filter(|b| test.contains(&b.patient_id)).cloned().collect();
        let recs: Vec<_> = cohort.records().values().cloned().collect();
        let only_test = Cohort::new("t", bags, recs).unwrap();
        let rows = test_scores(&only_test, &plan, 0, &run.outcomes[0].params, &cut).unwrap();
        assert_eq!(rows, run.scores);
    }

    #[test]
    fn comparison_tables() {
        let (cohort, plan) = setup();
        let o = opts();
        let folds = [0, 1, 2];
        let reg = cross_validate(&cohort, &plan, &short(TrainPreset::camil_regression()), &o, &folds, 3).unwrap();
        let clf = cross_validate(&cohort, &plan, &short(TrainPreset::camil_classification()), &o, &folds, 3).unwrap();
        let gz = cross_validate(&cohort, &plan, &short(TrainPreset::graziani_regression()), &o, &folds, 3).unwrap();
        let c = compare_runs(
            "synthetic",
            &[
                ("camil_classification", &clf.scores),
                ("graziani_regression", &gz.scores),
                ("camil_regression", &reg.scores),
            ],
            "camil_regression",
            "camil_classification",
        )
        .unwrap();
        assert_eq!(c.summary.len(), 3);
        assert_eq!(c.stats.len(), 3);
        assert_eq!(c.stats[0].result.dof, (2.0, Some(4.0)));
        assert!(c.stats[1..].iter().all(|s| s.result.alpha_effective == 0.025));
        let reg_row = c.separation.iter().find(|s| s.model == "camil_regression").unwrap();
        let clf_row = c.separation.iter().find(|s| s.model == "camil_classification").unwrap();
        assert!(clf_row.improvement_pct.is_none());
        let want = improvement_pct(reg_row.separation.delta, clf_row.separation.delta).unwrap();
        assert_eq!(reg_row.improvement_pct, Some(want));
        let dir = tempfile::tempdir().unwrap();
        write_separation_table(&dir.path().join("sep.csv"), &c.separation).unwrap();

        let labels: BTreeMap<String, u8> = reg.scores.iter().map(|r| (r.patient_id.clone(), r.label)).collect();
        let same: BTreeMap<String, u8> = clf.scores.iter().map(|r| (r.patient_id.clone(), r.label)).collect();
        assert_eq!(labels, same);
    }
}
