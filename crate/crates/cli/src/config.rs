//! Flat `section.key = value` run configuration. Files are INI; a top-level
//! `include = other.ini` is loaded first (relative to the including file)
//! and then overridden by the including file, the CLI flags and finally
//! explicit `section.key=value` arguments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::CliError;

const MAX_INCLUDE_DEPTH: usize = 16;

/// Every recognised key with its default. An empty value means unset.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "7"),
    ("run.jobs", "1"),
    ("cohort.name", "synthetic"),
    ("cohort.features", "runs/synth/features"),
    ("cohort.clinical", "runs/synth/clinical.csv"),
    ("cohort.target", "target"),
    ("cohort.binarize", "median"),
    ("cohort.cutoff", ""),
    ("cohort.direction", "gt"),
    ("cohort.merge_slides", "true"),
    ("cohort.feature_dim", ""),
    ("model.h_att", "128"),
    ("model.h_mlp", "256"),
    ("model.gated", "false"),
    ("model.max_instances", "512"),
    ("model.adam_decoupled", "true"),
    ("model.sigma2", ""),
    ("model.epochs", ""),
    ("synth.out", "runs/synth"),
    ("synth.n_patients", "200"),
    ("synth.n_sites", "8"),
    ("synth.instances_min", "16"),
    ("synth.instances_max", "48"),
    ("synth.d", "32"),
    ("synth.signal_dim_count", "8"),
    ("synth.signal_strength", "1"),
    ("synth.label_noise_sd", "0.05"),
    ("synth.hazard_coef", "-2"),
    ("synth.base_hazard", "0.0006666666666666666"),
    ("synth.site_shift_sd", "0.1"),
    ("preprocess.input", "slides"),
    ("preprocess.out", "runs/preprocess"),
    ("preprocess.source_mpp", "0.5"),
    ("preprocess.canny_sigma", "1.4"),
    ("preprocess.canny_low", "50"),
    ("preprocess.canny_high", "150"),
    ("preprocess.min_segment_len", "10"),
    ("preprocess.max_rejected_segments", "2"),
    ("preprocess.alpha", "1"),
    ("preprocess.beta", "0.15"),
    ("preprocess.target_profile", ""),
    ("split.out", "runs/split"),
    ("split.k", "5"),
    ("split.val_frac", "0.2"),
    ("split.tol", "0.1"),
    ("train.out", "runs/train"),
    ("train.fold_plan", "runs/split/fold_plan.csv"),
    ("train.preset", "camil_regression"),
    ("train.ablation", "none"),
    ("train.folds", "all"),
    ("evaluate.out", "runs/evaluate"),
    ("evaluate.train_dir", "runs/train"),
    ("evaluate.fold_plan", "runs/split/fold_plan.csv"),
    ("evaluate.folds", "all"),
    ("compare.out", "runs/compare"),
    ("compare.fold_plan", "runs/split/fold_plan.csv"),
    (
        "compare.presets",
        "camil_classification,graziani_regression,camil_regression",
    ),
    ("compare.focus", "camil_regression"),
    ("compare.reference", "camil_classification"),
    ("compare.folds", "all"),
    ("survival.out", "runs/survival"),
    ("survival.models", "runs/train"),
    ("survival.modes", "continuous,binarized_at_median"),
    ("survival.covariates", "none,age_sex_stage"),
    ("heatmap.out", "runs/heatmap"),
    ("heatmap.classifier", "runs/compare/camil_classification_fold0.ckpt"),
    ("heatmap.regressor", "runs/compare/camil_regression_fold0.ckpt"),
    ("heatmap.patients", ""),
    ("heatmap.top_n", "5"),
    ("heatmap.colormap", "reds"),
    ("heatmap.cell_px", "16"),
];

/// Sections each command reads, in print order.
pub fn sections_for(command: &str) -> &'static [&'static str] {
    match command {
        "synth" => &["run", "synth"],
        "preprocess" => &["run", "preprocess"],
        "split" => &["run", "cohort", "split"],
        "train" => &["run", "cohort", "model", "train"],
        "evaluate" => &["run", "cohort", "evaluate"],
        "compare" => &["run", "cohort", "model", "compare"],
        "survival" => &["run", "cohort", "survival"],
        "heatmap" => &["run", "cohort", "heatmap"],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn check_key(key: &str, origin: &str) -> Result<(), CliError> {
    if DEFAULTS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(CliError::Config(format!("{origin}: unknown key {key}")))
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let mut seen = BTreeSet::new();
            cfg.merge_file(p, &mut seen, 0)?;
        }
        Ok(cfg)
    }

    fn merge_file(&mut self, path: &Path, seen: &mut BTreeSet<PathBuf>, depth: usize) -> Result<(), CliError> {
        let canonical = path
            .canonicalize()
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        if depth > MAX_INCLUDE_DEPTH || !seen.insert(canonical.clone()) {
            return Err(CliError::Config(format!(
                "include cycle at {}",
                path.display()
            )));
        }
        let ini = Ini::load_from_file_noescape(&canonical)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let origin = path.display().to_string();
        if let Some(inc) = ini.general_section().get("include") {
            let base = canonical.parent().unwrap_or(Path::new("."));
            for name in inc.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                self.merge_file(&base.join(name), seen, depth + 1)?;
            }
        }
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    None if k == "include" => continue,
                    None => k.to_string(),
                    Some(s) => format!("{s}.{k}"),
                };
                check_key(&key, &origin)?;
                self.values.insert(key, v.trim().to_string());
            }
        }
        seen.remove(&canonical);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        check_key(key, "override")?;
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Applies a `section.key=value` argument.
    pub fn apply_override(&mut self, arg: &str) -> Result<(), CliError> {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {arg:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key {key} has no default"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("{key} = {raw:?}: {e}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        match self.raw(key) {
            "" => Err(CliError::Config(format!("{key} is not set"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    /// `all` or a comma-separated list of fold indices.
    pub fn folds(&self, key: &str, k: usize) -> Result<Vec<usize>, CliError> {
        if self.raw(key) == "all" {
            return Ok((0..k).collect());
        }
        let mut folds = Vec::new();
        for s in self.list(key) {
            let f: usize = s
                .parse()
                .map_err(|_| CliError::Config(format!("{key}: bad fold index {s:?}")))?;
            if f >= k {
                return Err(CliError::Config(format!(
                    "{key}: fold {f} out of range for k = {k}"
                )));
            }
            folds.push(f);
        }
        if folds.is_empty() {
            return Err(CliError::Config(format!("{key} selects no folds")));
        }
        folds.sort_unstable();
        folds.dedup();
        Ok(folds)
    }

    /// Key/value pairs of the given sections.
    pub fn snapshot(&self, sections: &[&str]) -> BTreeMap<String, String> {
        self.values
            .iter()
            .filter(|(k, _)| sections.iter().any(|s| k.split('.').next() == Some(*s)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// INI text of the given sections, readable back by [`Config::load`].
    pub fn render(&self, sections: &[&str]) -> String {
        let mut out = String::new();
        for s in sections {
            let _ = writeln!(out, "[{s}]");
            for (k, _) in DEFAULTS.iter().filter(|(k, _)| k.split('.').next() == Some(*s)) {
                let _ = writeln!(out, "{} = {}", &k[s.len() + 1..], self.values[*k]);
            }
            out.push('\n');
        }
        out
    }
}
