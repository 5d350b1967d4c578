//! Per-patient binary feature file.
//!
//! Layout, all little-endian:
//!
//! | field       | type            |
//! |-------------|-----------------|
//! | magic       | `b"MILF"`       |
//! | version     | u16             |
//! | n_instances | u32             |
//! | d           | u32             |
//! | coord_flag  | u8 (0 or 1)     |
//! | coords      | n × 2 i32, only when coord_flag = 1 |
//! | features    | n × d f32, row-major |

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MILF";
pub const FEATURE_FILE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 1;

pub fn write_feature_file(
    path: &Path,
    features: &Array2<f32>,
    coords: Option<&[(i32, i32)]>,
) -> Result<()> {
    let (n, d) = features.dim();
    if let Some(c) = coords {
        if c.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} coords for {n} instances",
                c.len()
            )));
        }
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + n * 8 + n * d * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_FILE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.push(coords.is_some() as u8);
    if let Some(c) = coords {
        for &(x, y) in c {
            buf.extend_from_slice(&x.to_le_bytes());
            buf.extend_from_slice(&y.to_le_bytes());
        }
    }
    for v in features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<(Array2<f32>, Option<Vec<(i32, i32)>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

fn decode(bytes: &[u8], what: &str) -> Result<(Array2<f32>, Option<Vec<(i32, i32)>>)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic(what.to_string()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_FILE_VERSION {
        return Err(Error::UnsupportedVersion {
            what: what.to_string(),
            found: version,
        });
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let has_coords = match bytes[14] {
        0 => false,
        1 => true,
        f => return Err(Error::Invalid(format!("{what}: coord_flag {f}"))),
    };
    let coord_len = if has_coords { n * 8 } else { 0 };
    let expected = HEADER_LEN + coord_len + n * d * 4;
    if bytes.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "{what}: header declares {n}x{d} ({expected} bytes) but file has {} bytes",
            bytes.len()
        )));
    }
    let mut cursor = HEADER_LEN;
    let coords = has_coords.then(|| {
        (0..n)
            .map(|i| {
                let o = cursor + i * 8;
                let x = i32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
                let y = i32::from_le_bytes(bytes[o + 4..o + 8].try_into().unwrap());
                (x, y)
            })
            .collect::<Vec<_>>()
    });
    cursor += coord_len;
    let values: Vec<f32> = bytes[cursor..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{what}: instance {}, feature {}",
            pos / d.max(1),
            pos % d.max(1)
        )));
    }
    let features = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::DimensionMismatch(format!("{what}: {e}")))?;
    Ok((features, coords))
}
