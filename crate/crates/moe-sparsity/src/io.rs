//! Binary file formats and atomic file writing.
//!
//! Model file (`.moe`), little-endian throughout:
//!
//! ```text
//! magic "MOE1" | version u32 = 1
//! n_layers u32 | d_model u32 | d_ff u32 | top_k u32 | rms_eps f64
//! expert count u32 per layer
//! per layer:
//!   norm_gain   d_model f32
//!   router      n_l x d_model f32, row-major
//!   logit_bias  n_l f32
//!   per expert: w_gate (d_ff x d_model), w_up (d_ff x d_model),
//!               w_down (d_model x d_ff), all f32 row-major
//! ```
//!
//! Calibration token file (`.cal`): magic "CAL1", version u32 = 1,
//! n_tokens u32, d_model u32, then n_tokens x d_model f32 row-major.
//!
//! Loading upcasts storage f32 to the f64 computation precision; saving
//! truncates f64 to f32 by round-to-nearest-even (Rust `as` semantics), so
//! save -> load -> save is byte-identical.

use crate::error::{Error, Result};
use crate::moe::{Expert, MoELayer, MoEModel, ModelConfig};
use crate::numerics::{Matrix, Vector};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

pub const MOE_MAGIC: &[u8; 4] = b"MOE1";
pub const CAL_MAGIC: &[u8; 4] = b"CAL1";
pub const FORMAT_VERSION: u32 = 1;

/// Writes via a temporary file in the destination directory plus rename, so
/// interrupted runs never leave partial outputs at the final path.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))
        .map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32_from(&mut self, values: &[f64]) {
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                wanted: self.pos + n - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Serializes a model to the `.moe` byte layout.
pub fn model_to_bytes(model: &MoEModel) -> Vec<u8> {
    let cfg = &model.config;
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(MOE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(cfg.n_layers as u32);
    w.u32(cfg.d_model as u32);
    w.u32(cfg.d_ff as u32);
    w.u32(cfg.top_k as u32);
    w.f64(cfg.rms_eps);
    for &n in &cfg.experts_per_layer {
        w.u32(n as u32);
    }
    for layer in &model.layers {
        w.f32_from(layer.norm_gain.as_slice());
        w.f32_from(layer.router.data());
        w.f32_from(layer.logit_bias.as_slice());
        for e in &layer.experts {
            w.f32_from(e.w_gate.data());
            w.f32_from(e.w_up.data());
            w.f32_from(e.w_down.data());
        }
    }
    w.buf
}

pub fn save_model(model: &MoEModel, path: &Path) -> Result<()> {
    model.validate()?;
    write_atomic(path, &model_to_bytes(model))
}

pub fn load_model(path: &Path) -> Result<MoEModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, path)
}

pub fn model_from_bytes(bytes: &[u8], path: &Path) -> Result<MoEModel> {
    let mut r = ByteReader {
        buf: bytes,
        pos: 0,
        path,
    };
    let magic = r.take(4)?;
    if magic != MOE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "MOE1",
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n_layers = r.u32()? as usize;
    let d_model = r.u32()? as usize;
    let d_ff = r.u32()? as usize;
    let top_k = r.u32()? as usize;
    let rms_eps = r.f64()?;
    let mut experts_per_layer = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        experts_per_layer.push(r.u32()? as usize);
    }

    // Check the payload size against the header before allocating tensors,
    // so corrupt headers fail cleanly instead of over-allocating.
    let per_expert = (2 * d_ff * d_model + d_model * d_ff) as u64;
    let expected: u64 = experts_per_layer
        .iter()
        .map(|&n| (d_model + n * d_model + n) as u64 + n as u64 * per_expert)
        .sum::<u64>()
        * 4;
    let remaining = r.remaining() as u64;
    if remaining < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            wanted: (expected - remaining) as usize,
        });
    }
    if remaining > expected {
        return Err(Error::ShapeInconsistency {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes after declared payload", remaining - expected),
        });
    }

    let config = ModelConfig {
        n_layers,
        d_model,
        d_ff,
        experts_per_layer: experts_per_layer.clone(),
        top_k,
        rms_eps,
    };
    let mut layers = Vec::with_capacity(n_layers);
    for &n in &experts_per_layer {
        let norm_gain = Vector::from_vec(r.f32s(d_model)?);
        let router = Matrix::from_vec(n, d_model, r.f32s(n * d_model)?)?;
        let logit_bias = Vector::from_vec(r.f32s(n)?);
        let mut experts = Vec::with_capacity(n);
        for _ in 0..n {
            experts.push(Expert {
                w_gate: Matrix::from_vec(d_ff, d_model, r.f32s(d_ff * d_model)?)?,
                w_up: Matrix::from_vec(d_ff, d_model, r.f32s(d_ff * d_model)?)?,
                w_down: Matrix::from_vec(d_model, d_ff, r.f32s(d_model * d_ff)?)?,
            });
        }
        layers.push(MoELayer {
            router,
            logit_bias,
            experts,
            norm_gain,
        });
    }
    let model = MoEModel { config, layers };
    model.validate().map_err(|e| Error::ShapeInconsistency {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(model)
}

/// Serializes a token matrix to the `.cal` byte layout.
pub fn calib_to_bytes(tokens: &Matrix) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(CAL_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(tokens.n_rows() as u32);
    w.u32(tokens.n_cols() as u32);
    w.f32_from(tokens.data());
    w.buf
}

pub fn save_calib(tokens: &Matrix, path: &Path) -> Result<()> {
    write_atomic(path, &calib_to_bytes(tokens))
}

pub fn load_calib(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader {
        buf: &bytes,
        pos: 0,
        path,
    };
    let magic = r.take(4)?;
    if magic != CAL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "CAL1",
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n_tokens = r.u32()? as usize;
    let d_model = r.u32()? as usize;
    let expected = (n_tokens * d_model * 4) as u64;
    let remaining = r.remaining() as u64;
    if remaining < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            wanted: (expected - remaining) as usize,
        });
    }
    if remaining > expected {
        return Err(Error::ShapeInconsistency {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes after declared payload", remaining - expected),
        });
    }
    Matrix::from_vec(n_tokens, d_model, r.f32s(n_tokens * d_model)?)
}
