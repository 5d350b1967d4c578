//! Stage implementations. Each stage first resolves its settings and checks
//! that its inputs exist, so configuration problems surface before any
//! output directory is created.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use camil_core::attmil::{load_checkpoint, save_checkpoint, HeadKind, ModelParams};
use camil_core::data_model::{
    binarize_target, load_cohort, Cohort, Direction, FittedCutoff, LoadOptions, TargetSpec,
};
use camil_core::evaluation::{
    evaluate_scores, score_set, summarize, write_fold_metrics, write_scores, write_stat_table,
    write_summary, MetricReport, ScoreRow,
};
use camil_core::experiment::{
    compare_runs, cross_validate, fold_cutoff, test_scores, train_folds, write_separation_table,
};
use camil_core::heatmaps::{select_top_expressers, write_review_bundle, Colormap};
use camil_core::splitting::{read_fold_plan, site_aware_folds, validate_folds, write_fold_plan, FoldPlan};
use camil_core::survival::{score_prognosis, survival_rows, write_survival_report, CovariateSet, ScoreMode};
use camil_core::synth::{generate_cohort, write_synth_cohort, SynthConfig};
use camil_core::tile_prep::{preprocess_dir, CannyConfig, PreprocessConfig, StainProfile};
use camil_core::training::{ablate, write_train_log, Ablation, PresetName, TrainOptions, TrainPreset};

use crate::config::Config;
use crate::CliError;

pub const CUTOFFS_FILE: &str = "cutoffs.csv";
pub const FOLD_PLAN_FILE: &str = "fold_plan.csv";

/// Work left to do once inputs are validated; writes into the given
/// output directory.
pub type StageFn = Box<dyn FnOnce(&Path) -> Result<(), CliError>>;

pub struct Stage {
    pub out: PathBuf,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub run: StageFn,
}

fn require(paths: &[&Path]) -> Result<(), CliError> {
    for p in paths {
        if !p.exists() {
            return Err(CliError::MissingInput(p.display().to_string()));
        }
    }
    Ok(())
}

fn parse_direction(s: &str) -> Result<Direction, CliError> {
    match s {
        "ge" => Ok(Direction::PositiveIfGe),
        "gt" => Ok(Direction::PositiveIfGt),
        _ => Err(CliError::Config(format!("direction {s:?}: expected ge or gt"))),
    }
}

fn direction_str(d: Direction) -> &'static str {
    match d {
        Direction::PositiveIfGe => "ge",
        Direction::PositiveIfGt => "gt",
    }
}

fn target_spec(cfg: &Config) -> Result<TargetSpec, CliError> {
    let name = cfg.raw("cohort.target").to_string();
    match cfg.raw("cohort.binarize") {
        "median" => Ok(TargetSpec::median_split(name)),
        "hrd" => Ok(TargetSpec::hrd()),
        "fixed" => {
            let cutoff = cfg
                .get_opt::<f64>("cohort.cutoff")?
                .ok_or_else(|| CliError::Config("cohort.cutoff is required for fixed binarization".into()))?;
            Ok(TargetSpec::fixed(name, cutoff, parse_direction(cfg.raw("cohort.direction"))?))
        }
        other => Err(CliError::Config(format!(
            "cohort.binarize {other:?}: expected median, fixed or hrd"
        ))),
    }
}

struct CohortSource {
    features: PathBuf,
    clinical: PathBuf,
    name: String,
    target: TargetSpec,
    opts: LoadOptions,
}

impl CohortSource {
    fn from_config(cfg: &Config) -> Result<Self, CliError> {
        let src = Self {
            features: cfg.path("cohort.features")?,
            clinical: cfg.path("cohort.clinical")?,
            name: cfg.raw("cohort.name").to_string(),
            target: target_spec(cfg)?,
            opts: LoadOptions {
                merge_slides: cfg.get("cohort.merge_slides")?,
                expected_dim: cfg.get_opt("cohort.feature_dim")?,
                only: None,
            },
        };
        require(&[&src.features, &src.clinical])?;
        Ok(src)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.features.clone(), self.clinical.clone()]
    }

    fn load(&self, only: Option<BTreeSet<String>>) -> Result<Cohort, CliError> {
        let opts = LoadOptions { only, ..self.opts.clone() };
        let (mut cohort, report) = load_cohort(&self.features, &self.clinical, &self.target, &opts)?;
        log::info!("{report}");
        cohort.name = self.name.clone();
        Ok(cohort)
    }
}

fn train_options(cfg: &Config, target: TargetSpec, seed: u64) -> Result<TrainOptions, CliError> {
    Ok(TrainOptions {
        seed,
        target,
        h_att: cfg.get("model.h_att")?,
        h_mlp: cfg.get("model.h_mlp")?,
        gated: cfg.get("model.gated")?,
        max_instances: cfg.get("model.max_instances")?,
        adam_decoupled: cfg.get("model.adam_decoupled")?,
        sigma2: cfg.get_opt("model.sigma2")?,
        ..TrainOptions::default()
    })
}

fn preset(cfg: &Config, name: &str) -> Result<TrainPreset, CliError> {
    let name: PresetName = name.parse().map_err(|e| CliError::Config(format!("{e}")))?;
    let mut p = TrainPreset::named(name);
    if let Some(epochs) = cfg.get_opt("model.epochs")? {
        p.epochs = epochs;
    }
    Ok(p)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn build(command: &str, cfg: &Config) -> Result<Stage, CliError> {
    let seed: u64 = cfg.get("run.seed")?;
    let jobs: usize = cfg.get("run.jobs")?;
    if jobs == 0 {
        return Err(CliError::Config("run.jobs must be at least 1".into()));
    }
    let out = cfg.path(&format!("{command}.out"))?;
    let (inputs, run): (Vec<PathBuf>, StageFn) = match command {
        "synth" => synth(cfg, seed)?,
        "preprocess" => preprocess(cfg, jobs)?,
        "split" => split(cfg, seed)?,
        "train" => train(cfg, seed, jobs)?,
        "evaluate" => evaluate(cfg)?,
        "compare" => compare(cfg, seed, jobs)?,
        "survival" => survival(cfg)?,
        "heatmap" => heatmap(cfg)?,
        other => return Err(CliError::Config(format!("unknown command {other}"))),
    };
    Ok(Stage { out, seed, inputs, run })
}

type Prepared = (Vec<PathBuf>, StageFn);

fn synth(cfg: &Config, seed: u64) -> Result<Prepared, CliError> {
    let sc = SynthConfig {
        n_patients: cfg.get("synth.n_patients")?,
        n_sites: cfg.get("synth.n_sites")?,
        instances_per_bag: (cfg.get("synth.instances_min")?, cfg.get("synth.instances_max")?),
        d: cfg.get("synth.d")?,
        signal_dim_count: cfg.get("synth.signal_dim_count")?,
        signal_strength: cfg.get("synth.signal_strength")?,
        label_noise_sd: cfg.get("synth.label_noise_sd")?,
        hazard_coef: cfg.get("synth.hazard_coef")?,
        base_hazard: cfg.get("synth.base_hazard")?,
        site_shift_sd: cfg.get("synth.site_shift_sd")?,
        seed,
    };
    sc.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok((
        vec![],
        Box::new(move |out| {
            let s = generate_cohort(&sc)?;
            write_synth_cohort(out, &s)?;
            log::info!("wrote {} synthetic patients", s.cohort.len());
            Ok(())
        }),
    ))
}

fn preprocess(cfg: &Config, jobs: usize) -> Result<Prepared, CliError> {
    let input = cfg.path("preprocess.input")?;
    let profile = cfg.get_opt::<PathBuf>("preprocess.target_profile")?;
    require(&[&input])?;
    if let Some(p) = &profile {
        require(&[p])?;
    }
    let mut pc = PreprocessConfig {
        source_mpp: cfg.get("preprocess.source_mpp")?,
        canny: CannyConfig {
            sigma: cfg.get("preprocess.canny_sigma")?,
            low: cfg.get("preprocess.canny_low")?,
            high: cfg.get("preprocess.canny_high")?,
            min_segment_len: cfg.get("preprocess.min_segment_len")?,
            max_rejected_segments: cfg.get("preprocess.max_rejected_segments")?,
        },
        alpha: cfg.get("preprocess.alpha")?,
        beta: cfg.get("preprocess.beta")?,
        ..PreprocessConfig::default()
    };
    let mut inputs = vec![input.clone()];
    if let Some(p) = profile {
        pc.target = StainProfile::read(&p)?;
        inputs.push(p);
    }
    Ok((
        inputs,
        Box::new(move |out| {
            let s = preprocess_dir(&input, out, &pc, jobs)?;
            log::info!("{} slides, {} tiles, {} kept", s.slides, s.tiles, s.kept);
            Ok(())
        }),
    ))
}

fn split(cfg: &Config, seed: u64) -> Result<Prepared, CliError> {
    let src = CohortSource::from_config(cfg)?;
    let k: usize = cfg.get("split.k")?;
    let val_frac: f64 = cfg.get("split.val_frac")?;
    let tol: f64 = cfg.get("split.tol")?;
    Ok((
        src.inputs(),
        Box::new(move |out| {
            let cohort = src.load(None)?;
            let values = cohort.target_values();
            let all: BTreeSet<String> = values.keys().cloned().collect();
            let labels = binarize_target(&values, &src.target, &all)?;
            let plan = site_aware_folds(&cohort, &labels, k, val_frac, seed, tol)?;
            let report = validate_folds(&plan, &cohort, &labels, tol);
            let report_path = out.join("split_report.txt");
            fs::write(&report_path, report.to_string()).map_err(|e| io_err(&report_path, e))?;
            if !report.is_ok() {
                return Err(CliError::Stage(camil_core::Error::Invalid(format!(
                    "fold invariants violated: {}",
                    report.failures.join("; ")
                ))));
            }
            write_fold_plan(&out.join(FOLD_PLAN_FILE), &plan)?;
            Ok(())
        }),
    ))
}

fn read_plan(path: &Path, seed: u64) -> Result<FoldPlan, CliError> {
    Ok(read_fold_plan(path, seed)?)
}

fn model_label(preset: &TrainPreset, ablation: Option<Ablation>) -> String {
    match ablation {
        Some(a) => format!("{}+{}", preset.name, a.as_str()),
        None => preset.name.to_string(),
    }
}

fn train(cfg: &Config, seed: u64, jobs: usize) -> Result<Prepared, CliError> {
    let src = CohortSource::from_config(cfg)?;
    let plan_path = cfg.path("train.fold_plan")?;
    require(&[&plan_path])?;
    let mut p = preset(cfg, cfg.raw("train.preset"))?;
    let ablation = match cfg.raw("train.ablation") {
        "none" | "" => None,
        a => Some(a.parse::<Ablation>().map_err(|e| CliError::Config(e.to_string()))?),
    };
    if let Some(a) = ablation {
        p = ablate(&p, a).map_err(|e| CliError::Config(e.to_string()))?;
    }
    p.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let opts = train_options(cfg, src.target.clone(), seed)?;
    let fold_key = cfg.raw("train.folds").to_string();
    let cfg = cfg.clone();
    let mut inputs = src.inputs();
    inputs.push(plan_path.clone());
    Ok((
        inputs,
        Box::new(move |out| {
            let plan = read_plan(&plan_path, seed)?;
            let folds = cfg.folds("train.folds", plan.k)?;
            log::info!("training {} on folds {fold_key}", p.name);
            let cohort = src.load(None)?;
            let outcomes = train_folds(&cohort, &plan, &p, &opts, &folds, jobs)?;
            let label = model_label(&p, ablation);
            let cut_path = out.join(CUTOFFS_FILE);
            let mut w = csv::Writer::from_path(&cut_path).map_err(|e| io_err(&cut_path, e))?;
            w.write_record(["fold", "cutoff", "direction"]).map_err(|e| io_err(&cut_path, e))?;
            for (&fold, o) in folds.iter().zip(&outcomes) {
                save_checkpoint(&out.join(format!("fold{fold}.ckpt")), &label, &o.params)?;
                write_train_log(&out.join(format!("fold{fold}_log.csv")), &o.log)?;
                let c = fold_cutoff(&cohort, &plan, fold, &src.target)?;
                w.write_record([fold.to_string(), c.cutoff.to_string(), direction_str(c.direction).into()])
                    .map_err(|e| io_err(&cut_path, e))?;
            }
            w.flush().map_err(|e| io_err(&cut_path, e))
        }),
    ))
}

fn read_cutoffs(path: &Path) -> Result<BTreeMap<usize, FittedCutoff>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let bad = || CliError::Io(format!("{}: malformed row {rec:?}", path.display()));
        let fold: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let cutoff: f64 = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let direction = parse_direction(rec.get(2).unwrap_or_default()).map_err(|_| bad())?;
        out.insert(fold, FittedCutoff { cutoff, direction });
    }
    Ok(out)
}

fn evaluate(cfg: &Config) -> Result<Prepared, CliError> {
    let src = CohortSource::from_config(cfg)?;
    let train_dir = cfg.path("evaluate.train_dir")?;
    let plan_path = cfg.path("evaluate.fold_plan")?;
    let cut_path = train_dir.join(CUTOFFS_FILE);
    require(&[&plan_path, &cut_path])?;
    let cutoffs = read_cutoffs(&cut_path)?;
    let plan = read_plan(&plan_path, 0)?;
    let folds: Vec<usize> = if cfg.raw("evaluate.folds") == "all" {
        cutoffs.keys().copied().collect()
    } else {
        cfg.folds("evaluate.folds", plan.k)?
    };
    let mut inputs = src.inputs();
    inputs.extend([plan_path, cut_path]);
    for &f in &folds {
        if !cutoffs.contains_key(&f) {
            return Err(CliError::MissingInput(format!("fold {f} was not trained in {}", train_dir.display())));
        }
        let ckpt = train_dir.join(format!("fold{f}.ckpt"));
        require(&[&ckpt])?;
        inputs.push(ckpt);
    }
    Ok((
        inputs,
        Box::new(move |out| {
            // only the selected folds' test patients are loaded
            let mut test_ids = BTreeSet::new();
            for &f in &folds {
                test_ids.extend(plan.fold(f)?.test_ids.iter().cloned());
            }
            let cohort = src.load(Some(test_ids))?;
            let mut rows: Vec<ScoreRow> = Vec::new();
            let mut reports: Vec<MetricReport> = Vec::new();
            let mut model = String::new();
            for &f in &folds {
                let ck = load_checkpoint(&train_dir.join(format!("fold{f}.ckpt")))?;
                model = ck.preset.clone();
                let fold_rows = test_scores(&cohort, &plan, f, &ck.params, &cutoffs[&f])?;
                reports.push(evaluate_scores(f, &score_set(&fold_rows, |_| true)?)?);
                rows.extend(fold_rows);
            }
            write_scores(&out.join("scores.csv"), &rows)?;
            write_fold_metrics(&out.join("fold_metrics.csv"), &model, &reports)?;
            let summary = summarize(&src.name, &model, &reports, &score_set(&rows, |_| true)?)?;
            write_summary(&out.join("summary.csv"), &[summary])?;
            Ok(())
        }),
    ))
}

fn compare(cfg: &Config, seed: u64, jobs: usize) -> Result<Prepared, CliError> {
    let src = CohortSource::from_config(cfg)?;
    let plan_path = cfg.path("compare.fold_plan")?;
    require(&[&plan_path])?;
    let presets: Vec<TrainPreset> = cfg
        .list("compare.presets")
        .iter()
        .map(|n| preset(cfg, n))
        .collect::<Result<_, _>>()?;
    if presets.len() < 2 {
        return Err(CliError::Config("compare.presets needs at least two presets".into()));
    }
    let focus = cfg.raw("compare.focus").to_string();
    let reference = cfg.raw("compare.reference").to_string();
    for m in [&focus, &reference] {
        if !presets.iter().any(|p| p.name.as_str() == m) {
            return Err(CliError::Config(format!("{m} is not in compare.presets")));
        }
    }
    let opts = train_options(cfg, src.target.clone(), seed)?;
    let cfg = cfg.clone();
    let mut inputs = src.inputs();
    inputs.push(plan_path.clone());
    Ok((
        inputs,
        Box::new(move |out| {
            let plan = read_plan(&plan_path, seed)?;
            let folds = cfg.folds("compare.folds", plan.k)?;
            let cohort = src.load(None)?;
            let mut runs = Vec::new();
            for p in &presets {
                log::info!("cross-validating {}", p.name);
                let run = cross_validate(&cohort, &plan, p, &opts, &folds, jobs)?;
                let name = p.name.as_str();
                for (&f, o) in folds.iter().zip(&run.outcomes) {
                    save_checkpoint(&out.join(format!("{name}_fold{f}.ckpt")), name, &o.params)?;
                }
                write_scores(&out.join(format!("scores_{name}.csv")), &run.scores)?;
                write_fold_metrics(&out.join(format!("fold_metrics_{name}.csv")), name, &run.fold_reports()?)?;
                runs.push((name, run.scores));
            }
            let views: Vec<(&str, &[ScoreRow])> = runs.iter().map(|(n, s)| (*n, s.as_slice())).collect();
            let c = compare_runs(&src.name, &views, &focus, &reference)?;
            write_summary(&out.join("summary.csv"), &c.summary)?;
            write_stat_table(&out.join("stats.csv"), &c.stats)?;
            write_separation_table(&out.join("separation.csv"), &c.separation)?;
            Ok(())
        }),
    ))
}

fn checkpoints_in(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    Ok(files)
}

fn parse_covariates(s: &str) -> Result<CovariateSet, CliError> {
    match s {
        "none" => Ok(CovariateSet::None),
        "age_sex_stage" => Ok(CovariateSet::AgeSexStage),
        _ => Err(CliError::Config(format!("covariate set {s:?}: expected none or age_sex_stage"))),
    }
}

fn survival(cfg: &Config) -> Result<Prepared, CliError> {
    let src = CohortSource::from_config(cfg)?;
    let modes: Vec<ScoreMode> = cfg
        .list("survival.modes")
        .iter()
        .map(|m| m.parse().map_err(|e: camil_core::Error| CliError::Config(e.to_string())))
        .collect::<Result<_, _>>()?;
    let covs: Vec<(String, CovariateSet)> = cfg
        .list("survival.covariates")
        .into_iter()
        .map(|c| parse_covariates(&c).map(|s| (c, s)))
        .collect::<Result<_, _>>()?;
    if modes.is_empty() || covs.is_empty() {
        return Err(CliError::Config("survival.modes and survival.covariates must be non-empty".into()));
    }
    let mut inputs = src.inputs();
    for d in cfg.list("survival.models") {
        let d = PathBuf::from(d);
        require(&[&d])?;
        let found = checkpoints_in(&d)?;
        if found.is_empty() {
            return Err(CliError::MissingInput(format!("no checkpoints in {}", d.display())));
        }
        inputs.extend(found);
    }
    if inputs.len() == 2 {
        return Err(CliError::Config("survival.models lists no directories".into()));
    }
    let ckpts = inputs[2..].to_vec();
    Ok((
        inputs,
        Box::new(move |out| {
            let mut families: BTreeMap<String, Vec<ModelParams>> = BTreeMap::new();
            for p in &ckpts {
                let ck = load_checkpoint(p)?;
                families.entry(ck.preset).or_default().push(ck.params);
            }
            let cohort = src.load(None)?;
            let mut rows = Vec::new();
            for (model, params) in &families {
                let model_modes: Vec<(String, ScoreMode)> = if params[0].config.head == HeadKind::Classification {
                    vec![("label".into(), ScoreMode::Continuous)]
                } else {
                    modes.iter().map(|m| (m.to_string(), *m)).collect()
                };
                for (mode_name, mode) in &model_modes {
                    for (cov_name, cov) in &covs {
                        let label = if *cov == CovariateSet::None {
                            mode_name.clone()
                        } else {
                            format!("{mode_name}+{cov_name}")
                        };
                        match score_prognosis(&cohort, params, *mode, *cov) {
                            Ok(p) => rows.extend(survival_rows(model, &label, &p.result)),
                            Err(e) => log::warn!("{model} {label}: Cox fit skipped: {e}"),
                        }
                    }
                }
            }
            if rows.is_empty() {
                return Err(CliError::Stage(camil_core::Error::Invalid(
                    "no Cox model could be fitted".into(),
                )));
            }
            write_survival_report(&out.join("survival.csv"), &rows)?;
            Ok(())
        }),
    ))
}

fn heatmap(cfg: &Config) -> Result<Prepared, CliError> {
    let src = CohortSource::from_config(cfg)?;
    let clf = cfg.path("heatmap.classifier")?;
    let reg = cfg.path("heatmap.regressor")?;
    require(&[&clf, &reg])?;
    let colormap: Colormap = cfg.get("heatmap.colormap")?;
    let cell_px: u32 = cfg.get("heatmap.cell_px")?;
    let top_n: usize = cfg.get("heatmap.top_n")?;
    let listed = cfg.list("heatmap.patients");
    if cell_px == 0 {
        return Err(CliError::Config("heatmap.cell_px must be positive".into()));
    }
    let mut inputs = src.inputs();
    inputs.extend([clf.clone(), reg.clone()]);
    Ok((
        inputs,
        Box::new(move |out| {
            let classifier = load_checkpoint(&clf)?.params;
            let regressor = load_checkpoint(&reg)?.params;
            let cohort = src.load(None)?;
            let patients = if listed.is_empty() {
                let with_bags: BTreeMap<String, f64> = cohort
                    .target_values()
                    .into_iter()
                    .filter(|(id, _)| cohort.bag(id).is_some())
                    .collect();
                select_top_expressers(&with_bags, top_n.min(with_bags.len()))?
            } else {
                listed
            };
            write_review_bundle(out, &cohort, &classifier, &regressor, &patients, colormap, cell_px)?;
            Ok(())
        }),
    ))
}
