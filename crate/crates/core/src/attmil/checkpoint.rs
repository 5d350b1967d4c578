//! Model checkpoint file.
//!
//! Little-endian header: magic `b"MILM"`, version u16, d u32, h_att u32,
//! h_mlp u32, out u32, preset name (u16 byte length + UTF-8), flags u8
//! (bit 0 gated attention, bit 1 batch norm), dropout rate f32. Then f32
//! tensors in order: V, [U], w, [bn gamma, bn beta, bn running mean,
//! bn running var], W1, b1, W2, b2.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::params::{BatchNorm, HeadKind, ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MILM";
pub const CHECKPOINT_VERSION: u16 = 1;

const FLAG_GATED: u8 = 1;
const FLAG_BATCH_NORM: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub preset: String,
    pub params: ModelParams,
}

fn push_tensor<'a>(buf: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(preset: &str, p: &ModelParams) -> Vec<u8> {
    let c = &p.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.d, c.h_att, c.h_mlp, c.head.out_dim()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(preset.len() as u16).to_le_bytes());
    buf.extend_from_slice(preset.as_bytes());
    let flags =
        if c.gated { FLAG_GATED } else { 0 } | if c.batch_norm { FLAG_BATCH_NORM } else { 0 };
    buf.push(flags);
    buf.extend_from_slice(&(c.dropout_rate as f32).to_le_bytes());
    push_tensor(&mut buf, p.attn_v.iter());
    if let Some(u) = &p.attn_u {
        push_tensor(&mut buf, u.iter());
    }
    push_tensor(&mut buf, p.attn_w.iter());
    if let Some(bn) = &p.norm {
        push_tensor(&mut buf, bn.gamma.iter());
        push_tensor(&mut buf, bn.beta.iter());
        push_tensor(&mut buf, bn.running_mean.iter());
        push_tensor(&mut buf, bn.running_var.iter());
    }
    push_tensor(&mut buf, p.head_w1.iter());
    push_tensor(&mut buf, p.head_b1.iter());
    push_tensor(&mut buf, p.head_w2.iter());
    push_tensor(&mut buf, p.head_b2.iter());
    buf
}

pub fn save_checkpoint(path: &Path, preset: &str, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(preset, params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}: checkpoint truncated",
                self.what
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        let v: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{}: checkpoint tensor",
                self.what
            )));
        }
        Ok(v)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_vec((rows, cols), self.f32s(rows * cols)?).unwrap())
    }

    fn vector(&mut self, n: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.f32s(n)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8], what: &str) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what,
    };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::BadMagic(what.to_string()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: what.to_string(),
            found: version,
        });
    }
    let (d, h_att, h_mlp, out) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let head = match out {
        1 => HeadKind::Regression,
        2 => HeadKind::Classification,
        o => {
            return Err(Error::Invalid(format!(
                "{what}: unsupported output width {o}"
            )))
        }
    };
    let name_len = r.u16()? as usize;
    let preset = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Invalid(format!("{what}: preset name is not UTF-8")))?;
    let flags = r.take(1)?[0];
    let dropout_rate = f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64;
    let config = ModelConfig {
        d,
        h_att,
        h_mlp,
        head,
        dropout_rate,
        gated: flags & FLAG_GATED != 0,
        batch_norm: flags & FLAG_BATCH_NORM != 0,
    };
    config.validate()?;
    let attn_v = r.matrix(h_att, d)?;
    let attn_u = if config.gated {
        Some(r.matrix(h_att, d)?)
    } else {
        None
    };
    let attn_w = r.vector(h_att)?;
    let norm = if config.batch_norm {
        Some(BatchNorm {
            gamma: r.vector(d)?,
            beta: r.vector(d)?,
            running_mean: r.vector(d)?,
            running_var: r.vector(d)?,
        })
    } else {
        None
    };
    let head_w1 = r.matrix(h_mlp, d)?;
    let head_b1 = r.vector(h_mlp)?;
    let head_w2 = r.matrix(out, h_mlp)?;
    let head_b2 = r.vector(out)?;
    if r.pos != bytes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        preset,
        params: ModelParams {
            config,
            attn_v,
            attn_u,
            attn_w,
            norm,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        },
    })
}
