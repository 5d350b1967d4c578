use std::collections::BTreeSet;
use std::path::Path;

use crate::data_model::{PatientRecord, Sex};
use crate::error::{Error, Result};

pub const CLINICAL_COLUMNS: [&str; 8] = [
    "patient_id",
    "site_id",
    "target",
    "age",
    "sex",
    "stage",
    "survival_days",
    "event",
];

/// One clinical table row; `target` may be missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalRow {
    pub patient_id: String,
    pub site_id: String,
    pub target: Option<f64>,
    pub age: Option<f64>,
    pub sex: Sex,
    pub stage: Option<u8>,
    pub survival_days: Option<f64>,
    pub event: Option<bool>,
}

impl ClinicalRow {
    pub fn into_record(self) -> Option<PatientRecord> {
        Some(PatientRecord {
            target_value: self.target?,
            patient_id: self.patient_id,
            site_id: self.site_id,
            age: self.age,
            sex: self.sex,
            stage: self.stage,
            survival_days: self.survival_days,
            event: self.event,
        })
    }
}

fn opt_f64(cell: &str, col: &str, line: u64) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| Error::Csv(format!("line {line}: column {col}: cannot parse {cell:?}")))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("line {line}: column {col}")));
    }
    Ok(Some(v))
}

fn parse_sex(cell: &str, line: u64) -> Result<Sex> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "" | "unknown" | "na" => Ok(Sex::Unknown),
        "0" | "female" | "f" => Ok(Sex::Female),
        "1" | "male" | "m" => Ok(Sex::Male),
        other => Err(Error::Csv(format!("line {line}: sex {other:?}"))),
    }
}

fn parse_event(cell: &str, line: u64) -> Result<Option<bool>> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "" => Ok(None),
        "0" | "false" => Ok(Some(false)),
        "1" | "true" => Ok(Some(true)),
        other => Err(Error::Csv(format!("line {line}: event {other:?}"))),
    }
}

pub fn read_clinical_csv(path: &Path) -> Result<Vec<ClinicalRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Invalid(format!(
                "cannot open clinical table {}: {e}",
                path.display()
            )),
            _ => Error::from(e),
        })?;
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 8];
    for (slot, name) in idx.iter_mut().zip(CLINICAL_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("{}: missing column {name}", path.display())))?;
    }
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let patient_id = get(0).to_string();
        if patient_id.is_empty() {
            return Err(Error::Csv(format!("line {line}: empty patient_id")));
        }
        if !seen.insert(patient_id.clone()) {
            return Err(Error::DuplicatePatient(patient_id));
        }
        let age = opt_f64(get(3), "age", line)?;
        if age.is_some_and(|a| a < 0.0) {
            return Err(Error::Csv(format!("line {line}: negative age")));
        }
        let stage = match opt_f64(get(5), "stage", line)? {
            None => None,
            Some(s) if s.fract() == 0.0 && (1.0..=4.0).contains(&s) => Some(s as u8),
            Some(s) => return Err(Error::Csv(format!("line {line}: stage {s} outside 1..=4"))),
        };
        let survival_days = opt_f64(get(6), "survival_days", line)?;
        if survival_days.is_some_and(|t| t < 0.0) {
            return Err(Error::Csv(format!("line {line}: negative survival_days")));
        }
        rows.push(ClinicalRow {
            site_id: get(1).to_string(),
            target: opt_f64(get(2), "target", line)?,
            age,
            sex: parse_sex(get(4), line)?,
            stage,
            survival_days,
            event: parse_event(get(7), line)?,
            patient_id,
        });
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_clinical_csv(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CLINICAL_COLUMNS)?;
    for r in records {
        w.write_record([
            r.patient_id.clone(),
            r.site_id.clone(),
            r.target_value.to_string(),
            fmt_opt(r.age),
            r.sex
                .code()
                .map(|c| (c as u8).to_string())
                .unwrap_or_default(),
            r.stage.map(|s| s.to_string()).unwrap_or_default(),
            fmt_opt(r.survival_days),
            r.event.map(|e| (e as u8).to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
