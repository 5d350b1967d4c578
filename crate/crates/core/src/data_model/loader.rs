use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};

use crate::data_model::{read_clinical_csv, read_feature_file, Cohort, FeatureBag, TargetSpec};
use crate::error::{Error, Result};

pub const FEATURE_FILE_EXT: &str = "milf";

/// Separates the patient id from a slide tag in feature file stems,
/// e.g. `P001__slide2.milf`.
const SLIDE_SEPARATOR: &str = "__";

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Concatenate the instances of all slides of a patient into one bag.
    /// When false, a second slide for a patient is an error.
    pub merge_slides: bool,
    /// Expected feature width; `None` accepts whatever the files declare.
    pub expected_dim: Option<usize>,
    /// When set, feature files and clinical rows of other patients are
    /// skipped without being read.
    pub only: Option<BTreeSet<String>>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            merge_slides: true,
            expected_dim: None,
            only: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub feature_files: usize,
    pub patients_with_features: usize,
    pub clinical_rows: usize,
    pub rows_with_target: usize,
    /// Patients with both features and a non-missing target.
    pub target_overlap: usize,
    pub features_without_record: Vec<String>,
    pub records_without_features: Vec<String>,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "slides: {}, patients with features: {}, clinical rows: {} ({} with target), target overlap: {}",
            self.feature_files,
            self.patients_with_features,
            self.clinical_rows,
            self.rows_with_target,
            self.target_overlap
        )
    }
}

fn patient_of(stem: &str) -> &str {
    stem.split_once(SLIDE_SEPARATOR).map_or(stem, |(p, _)| p)
}

fn feature_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| {
        Error::Invalid(format!(
            "cannot read features directory {}: {e}",
            dir.display()
        ))
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == FEATURE_FILE_EXT) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

type RawSlides = Vec<(Array2<f32>, Option<Vec<(i32, i32)>>)>;

/// Loads every patient having both a feature file and a non-missing target.
pub fn load_cohort(
    features_dir: &Path,
    clinical_table: &Path,
    target: &TargetSpec,
    opts: &LoadOptions,
) -> Result<(Cohort, LoadReport)> {
    let wanted = |id: &str| opts.only.as_ref().map_or(true, |s| s.contains(id));
    let files: Vec<PathBuf> = feature_files(features_dir)?
        .into_iter()
        .filter(|p| wanted(patient_of(p.file_stem().and_then(|s| s.to_str()).unwrap_or_default())))
        .collect();
    let mut slides: BTreeMap<String, RawSlides> = BTreeMap::new();
    for path in &files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let patient = patient_of(stem).to_string();
        let (features, coords) = read_feature_file(path)?;
        if let Some(d) = opts.expected_dim {
            if features.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "{}: width {} but expected {d}",
                    path.display(),
                    features.ncols()
                )));
            }
        }
        let entry = slides.entry(patient.clone()).or_default();
        if !entry.is_empty() && !opts.merge_slides {
            return Err(Error::DuplicatePatient(patient));
        }
        entry.push((features, coords));
    }

    let mut rows = read_clinical_csv(clinical_table)?;
    rows.retain(|r| wanted(&r.patient_id));
    let mut report = LoadReport {
        feature_files: files.len(),
        patients_with_features: slides.len(),
        clinical_rows: rows.len(),
        rows_with_target: rows.iter().filter(|r| r.target.is_some()).count(),
        ..Default::default()
    };
    report.records_without_features = rows
        .iter()
        .filter(|r| !slides.contains_key(&r.patient_id))
        .map(|r| r.patient_id.clone())
        .collect();
    report.features_without_record = slides
        .keys()
        .filter(|k| !rows.iter().any(|r| &r.patient_id == *k))
        .cloned()
        .collect();

    let mut bags = Vec::new();
    let mut records = Vec::new();
    for row in rows {
        let Some(record) = row.into_record() else {
            continue;
        };
        let Some(parts) = slides.remove(&record.patient_id) else {
            records.push(record);
            continue;
        };
        bags.push(merge_slides(&record.patient_id, &record.site_id, parts)?);
        records.push(record);
    }
    report.target_overlap = bags.len();
    let name = features_dir
        .canonicalize()
        .ok()
        .and_then(|p| {
            p.parent()
                .and_then(|q| q.file_name())
                .map(|n| n.to_string_lossy().into_owned())
        })
        .unwrap_or_else(|| "cohort".to_string());
    log::debug!("target {} binarized with {:?}", target.name, target.kind);
    let cohort = Cohort::new(name, bags, records)?;
    log::info!("loaded cohort {}: {report}", cohort.name);
    Ok((cohort, report))
}

fn merge_slides(patient: &str, site: &str, mut parts: RawSlides) -> Result<FeatureBag> {
    if parts.len() == 1 {
        let (f, c) = parts.pop().unwrap();
        return FeatureBag::new(patient, site, f, c);
    }
    let d = parts[0].0.ncols();
    if parts.iter().any(|(f, _)| f.ncols() != d) {
        return Err(Error::DimensionMismatch(format!(
            "slides of {patient} have different widths"
        )));
    }
    let views: Vec<_> = parts.iter().map(|(f, _)| f.view()).collect();
    let features =
        concatenate(Axis(0), &views).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    // Grid positions are slide-local, so they cannot be merged into one grid.
    FeatureBag::new(patient, site, features, None)
}
