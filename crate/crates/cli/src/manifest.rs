use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    /// First 64 bits of the SHA-256 of the content, hex.
    pub digest: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputDigest>,
    /// Relative to the artifact directory.
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Files of `path` in sorted order; a file is its own list.
pub fn list_files(path: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    if path.is_dir() {
        files_under(path, &mut files)?;
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    Ok(files)
}

/// Content digest of a file, or of a directory as its sorted relative
/// names and contents.
pub fn digest(path: &Path) -> Result<String, CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for f in list_files(path).map_err(io)? {
        if path.is_dir() {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
        }
        buf.clear();
        fs::File::open(&f).and_then(|mut r| r.read_to_end(&mut buf)).map_err(io)?;
        h.update((buf.len() as u64).to_le_bytes());
        h.update(&buf);
    }
    let bytes = h.finalize();
    Ok(bytes[..8].iter().map(|b| format!("{b:02x}")).collect())
}

pub fn digest_inputs(paths: &[PathBuf]) -> Result<Vec<InputDigest>, CliError> {
    paths
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                digest: digest(p)?,
            })
        })
        .collect()
}

/// Output files of `dir` other than the manifest, relative and sorted.
pub fn collect_outputs(dir: &Path) -> Result<Vec<String>, CliError> {
    let files = list_files(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(files
        .iter()
        .filter_map(|f| f.strip_prefix(dir).ok())
        .filter(|r| *r != Path::new(MANIFEST_FILE))
        .map(|r| r.to_string_lossy().replace('\\', "/"))
        .collect())
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
