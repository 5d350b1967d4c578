//! Synthetic cohorts with known instance-level signal.
//!
//! Every instance is unit Gaussian noise plus a per-site mean shift. A bag
//! draws a signal fraction `f ~ U(0, 1)` and exactly `round(f * n)` of its
//! instances get `signal_strength` added to the first `signal_dim_count`
//! dimensions. The continuous target is the realized signal fraction plus
//! Gaussian label noise, and survival is exponential with rate
//! `base_hazard * exp(hazard_coef * fraction)`, censored at ten years.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::data_model::{
    write_clinical_csv, write_feature_file, Cohort, FeatureBag, PatientRecord, Sex,
    FEATURE_FILE_EXT,
};
use crate::error::{Error, Result};

/// Administrative censoring horizon in days (ten years of follow-up).
pub const CENSOR_DAYS: f64 = 3650.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_sites: usize,
    /// Inclusive range of instances per bag.
    pub instances_per_bag: (usize, usize),
    pub d: usize,
    pub signal_dim_count: usize,
    pub signal_strength: f64,
    pub label_noise_sd: f64,
    pub hazard_coef: f64,
    /// Daily event rate at signal fraction 0.
    pub base_hazard: f64,
    /// Standard deviation of the per-site feature mean shift.
    pub site_shift_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 200,
            n_sites: 8,
            instances_per_bag: (16, 48),
            d: 32,
            signal_dim_count: 8,
            signal_strength: 1.0,
            label_noise_sd: 0.05,
            hazard_coef: -2.0,
            base_hazard: 1.0 / 1500.0,
            site_shift_sd: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.instances_per_bag;
        let bad = |m: &str| Err(Error::Invalid(format!("synth config: {m}")));
        if self.n_patients == 0 || self.n_sites == 0 || self.d == 0 || self.signal_dim_count == 0 {
            return bad("counts must be positive");
        }
        if self.n_sites > self.n_patients {
            return bad("more sites than patients");
        }
        if lo == 0 || lo > hi {
            return bad("instances_per_bag must be a nonempty positive range");
        }
        if self.signal_dim_count > self.d {
            return bad("signal_dim_count exceeds d");
        }
        if !(self.signal_strength.is_finite()
            && self.label_noise_sd >= 0.0
            && self.base_hazard > 0.0)
            || !self.hazard_coef.is_finite()
            || self.site_shift_sd < 0.0
        {
            return bad("non-finite or negative parameters");
        }
        Ok(())
    }
}

/// Generator-side facts hidden from the model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthTruth {
    /// Realized fraction of signal instances per patient.
    pub signal_fraction: BTreeMap<String, f64>,
    pub instance_signal: BTreeMap<String, Vec<bool>>,
}

impl SynthTruth {
    /// Share of a bag's attention mass placed on signal instances.
    pub fn attention_on_signal(&self, patient_id: &str, attention: &[f64]) -> Option<f64> {
        let flags = self.instance_signal.get(patient_id)?;
        (flags.len() == attention.len()).then(|| {
            flags
                .iter()
                .zip(attention)
                .filter(|(s, _)| **s)
                .map(|(_, a)| a)
                .sum()
        })
    }
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub cohort: Cohort,
    pub truth: SynthTruth,
}

fn site_name(i: usize) -> String {
    format!("S{:02}", i + 1)
}

pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).unwrap();

    let shifts: Vec<Vec<f64>> = (0..cfg.n_sites)
        .map(|_| {
            (0..cfg.d)
                .map(|_| cfg.site_shift_sd * unit.sample(&mut rng))
                .collect()
        })
        .collect();
    let weights: Vec<f64> = (0..cfg.n_sites).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total_w: f64 = weights.iter().sum();

    let mut bags = Vec::with_capacity(cfg.n_patients);
    let mut records = Vec::with_capacity(cfg.n_patients);
    let mut truth = SynthTruth::default();
    let width = (cfg.n_patients as f64).log10().floor() as usize + 1;

    for p in 0..cfg.n_patients {
        let id = format!("P{:0width$}", p + 1, width = width.max(4));
        // every site gets at least one patient
        let site = if p < cfg.n_sites {
            p
        } else {
            let mut u = rng.gen_range(0.0..total_w);
            let mut s = 0;
            while s + 1 < cfg.n_sites && u >= weights[s] {
                u -= weights[s];
                s += 1;
            }
            s
        };

        let n = rng.gen_range(cfg.instances_per_bag.0..=cfg.instances_per_bag.1);
        let f: f64 = rng.gen_range(0.0..1.0);
        let k = (f * n as f64).round() as usize;
        let mut flags = vec![false; n];
        for i in rand::seq::index::sample(&mut rng, n, k).iter() {
            flags[i] = true;
        }
        let mut features = Array2::<f32>::zeros((n, cfg.d));
        for (i, mut row) in features.rows_mut().into_iter().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let mut x = unit.sample(&mut rng) + shifts[site][j];
                if flags[i] && j < cfg.signal_dim_count {
                    x += cfg.signal_strength;
                }
                *v = x as f32;
            }
        }
        let grid_w = ((n as f64 * 1.5).sqrt().ceil() as usize).max(1);
        let mut cells: Vec<usize> = (0..grid_w * grid_w).collect();
        cells.shuffle(&mut rng);
        let coords: Vec<(i32, i32)> = cells[..n]
            .iter()
            .map(|c| ((c % grid_w) as i32, (c / grid_w) as i32))
            .collect();

        let fraction = k as f64 / n as f64;
        let noise = if cfg.label_noise_sd > 0.0 {
            cfg.label_noise_sd * unit.sample(&mut rng)
        } else {
            0.0
        };
        let target = fraction + noise;

        let rate = cfg.base_hazard * (cfg.hazard_coef * fraction).exp();
        let t: f64 = Exp::new(rate)
            .map_err(|e| Error::Invalid(e.to_string()))?
            .sample(&mut rng);
        let (survival_days, event) = if t > CENSOR_DAYS {
            (CENSOR_DAYS, false)
        } else {
            (t.max(1e-3), true)
        };
        let age = (68.0 + 10.0 * unit.sample(&mut rng)).clamp(18.0, 100.0);
        let sex = if rng.gen_bool(0.5) {
            Sex::Male
        } else {
            Sex::Female
        };
        let stage = rng.gen_range(1..=4u8);

        bags.push(FeatureBag::new(
            id.clone(),
            site_name(site),
            features,
            Some(coords),
        )?);
        records.push(PatientRecord {
            patient_id: id.clone(),
            site_id: site_name(site),
            target_value: target,
            age: Some(age),
            sex,
            stage: Some(stage),
            survival_days: Some(survival_days),
            event: Some(event),
        });
        truth.signal_fraction.insert(id.clone(), fraction);
        truth.instance_signal.insert(id, flags);
    }
    let cohort = Cohort::new(format!("synth-{}", cfg.seed), bags, records)?;
    Ok(SynthCohort { cohort, truth })
}

/// Writes `features/<id>.milf`, `clinical.csv` and `truth.csv` under `dir`.
pub fn write_synth_cohort(dir: &Path, synth: &SynthCohort) -> Result<()> {
    let fdir = dir.join("features");
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    for (id, bag) in synth.cohort.bags() {
        write_feature_file(
            &fdir.join(format!("{id}.{FEATURE_FILE_EXT}")),
            bag.features(),
            bag.tile_coords(),
        )?;
    }
    let records: Vec<PatientRecord> = synth.cohort.records().values().cloned().collect();
    write_clinical_csv(&dir.join("clinical.csv"), &records)?;
    write_truth_csv(&dir.join("truth.csv"), &synth.truth)
}

pub fn write_truth_csv(path: &Path, truth: &SynthTruth) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "patient_id",
        "signal_fraction",
        "instance_index",
        "is_signal",
    ])?;
    for (id, flags) in &truth.instance_signal {
        let frac = truth.signal_fraction[id].to_string();
        for (i, s) in flags.iter().enumerate() {
            w.write_record([
                id.as_str(),
                frac.as_str(),
                &i.to_string(),
                if *s { "1" } else { "0" },
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truth_csv(path: &Path) -> Result<SynthTruth> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut truth = SynthTruth::default();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = || Error::Csv(format!("{}: malformed truth row", path.display()));
        let id = rec.get(0).ok_or_else(bad)?.to_string();
        let frac: f64 = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let idx: usize = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let flag = rec.get(3).ok_or_else(bad)? == "1";
        truth.signal_fraction.insert(id.clone(), frac);
        let flags = truth.instance_signal.entry(id).or_default();
        if flags.len() != idx {
            return Err(bad());
        }
        flags.push(flag);
    }
    Ok(truth)
}
