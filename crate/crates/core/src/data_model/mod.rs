//! Cohorts, feature bags, clinical records and targets.

mod clinical;
mod feature_file;
mod loader;
mod target;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use crate::error::{Error, Result};

pub use clinical::{read_clinical_csv, write_clinical_csv, ClinicalRow};
pub use feature_file::{
    read_feature_file, write_feature_file, FEATURE_FILE_VERSION, FEATURE_MAGIC,
};
pub use loader::{load_cohort, LoadOptions, LoadReport, FEATURE_FILE_EXT};
pub use target::{
    binarize_target, compose_hrd, BinarizeRule, Direction, FittedCutoff, HrdSubscores, TargetSpec,
    HRD_CUTOFF,
};

/// Default instance feature width.
pub const DEFAULT_FEATURE_DIM: usize = 2048;

/// One patient's instance-feature matrix, the unit of weak supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub patient_id: String,
    pub site_id: String,
    features: Array2<f32>,
    tile_coords: Option<Vec<(i32, i32)>>,
}

impl FeatureBag {
    pub fn new(
        patient_id: impl Into<String>,
        site_id: impl Into<String>,
        features: Array2<f32>,
        tile_coords: Option<Vec<(i32, i32)>>,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if features.nrows() == 0 {
            return Err(Error::Invalid(format!("bag {patient_id} has no instances")));
        }
        if features.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "bag {patient_id} has zero feature width"
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            let d = features.ncols();
            return Err(Error::NonFinite(format!(
                "bag {patient_id}, instance {}, feature {}",
                pos / d,
                pos % d
            )));
        }
        if let Some(coords) = &tile_coords {
            if coords.len() != features.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "bag {patient_id}: {} coords for {} instances",
                    coords.len(),
                    features.nrows()
                )));
            }
            let unique: BTreeSet<_> = coords.iter().collect();
            if unique.len() != coords.len() {
                return Err(Error::Invalid(format!(
                    "bag {patient_id}: duplicate tile coordinates"
                )));
            }
        }
        Ok(Self {
            patient_id,
            site_id: site_id.into(),
            features,
            tile_coords,
        })
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn tile_coords(&self) -> Option<&[(i32, i32)]> {
        self.tile_coords.as_deref()
    }

    pub fn n_instances(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Features widened to f64, the precision the model computes in.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

impl Sex {
    /// Covariate coding: female 0, male 1.
    pub fn code(self) -> Option<f64> {
        match self {
            Sex::Female => Some(0.0),
            Sex::Male => Some(1.0),
            Sex::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub site_id: String,
    pub target_value: f64,
    pub age: Option<f64>,
    pub sex: Sex,
    /// 1..=4 when known.
    pub stage: Option<u8>,
    pub survival_days: Option<f64>,
    pub event: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohort {
    pub name: String,
    bags: BTreeMap<String, FeatureBag>,
    records: BTreeMap<String, PatientRecord>,
}

impl Cohort {
    /// Every bag must have a record with the same patient and site. Records
    /// without a bag are kept and reported by [`Cohort::records_without_bag`].
    pub fn new(
        name: impl Into<String>,
        bags: impl IntoIterator<Item = FeatureBag>,
        records: impl IntoIterator<Item = PatientRecord>,
    ) -> Result<Self> {
        let mut rec_map = BTreeMap::new();
        for r in records {
            if rec_map.contains_key(&r.patient_id) {
                return Err(Error::DuplicatePatient(r.patient_id));
            }
            rec_map.insert(r.patient_id.clone(), r);
        }
        let mut bag_map = BTreeMap::new();
        let mut width = None;
        for b in bags {
            let rec = rec_map.get(&b.patient_id).ok_or_else(|| {
                Error::Invalid(format!("bag {} has no clinical record", b.patient_id))
            })?;
            if rec.site_id != b.site_id {
                return Err(Error::Invalid(format!(
                    "bag {} site {} disagrees with record site {}",
                    b.patient_id, b.site_id, rec.site_id
                )));
            }
            match width {
                None => width = Some(b.dim()),
                Some(d) if d != b.dim() => {
                    return Err(Error::DimensionMismatch(format!(
                        "bag {} has width {}, cohort width is {d}",
                        b.patient_id,
                        b.dim()
                    )))
                }
                _ => {}
            }
            if bag_map.contains_key(&b.patient_id) {
                return Err(Error::DuplicatePatient(b.patient_id));
            }
            bag_map.insert(b.patient_id.clone(), b);
        }
        Ok(Self {
            name: name.into(),
            bags: bag_map,
            records: rec_map,
        })
    }

    pub fn bags(&self) -> &BTreeMap<String, FeatureBag> {
        &self.bags
    }

    pub fn records(&self) -> &BTreeMap<String, PatientRecord> {
        &self.records
    }

    pub fn bag(&self, id: &str) -> Option<&FeatureBag> {
        self.bags.get(id)
    }

    pub fn record(&self, id: &str) -> Option<&PatientRecord> {
        self.records.get(id)
    }

    /// Patients having both a bag and a record, sorted.
    pub fn patient_ids(&self) -> Vec<String> {
        self.bags.keys().cloned().collect()
    }

    pub fn records_without_bag(&self) -> Vec<String> {
        self.records
            .keys()
            .filter(|k| !self.bags.contains_key(*k))
            .cloned()
            .collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.bags.values().next().map(FeatureBag::dim)
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Continuous targets of all patients with a bag.
    pub fn target_values(&self) -> BTreeMap<String, f64> {
        self.bags
            .keys()
            .map(|id| (id.clone(), self.records[id].target_value))
            .collect()
    }

    pub fn site_of(&self, id: &str) -> Option<&str> {
        self.records.get(id).map(|r| r.site_id.as_str())
    }
}
