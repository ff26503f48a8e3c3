//! Binary tensor files.
//!
//! Layout (all integers little-endian `u64` unless noted):
//!
//! ```text
//! magic        8 bytes ("WCLRPARM" for parameters, "WCLROPTM" for optimizer moments)
//! version      u32
//! config_len   then `config_len` bytes of JSON (the EncoderConfig)
//! n_tensors
//! per tensor:  rows, cols, rows*cols little-endian f64 values
//! ```
//!
//! A plain-text sidecar (`<file>.txt`) lists `name\trows\tcols` per tensor.
//! No timestamps are written, so identical parameters give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::params::{EncoderConfig, EncoderParameters};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 8] = b"WCLRPARM";
pub const OPTIM_MAGIC: &[u8; 8] = b"WCLROPTM";
pub const VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

pub fn encode_tensors(magic: &[u8; 8], config: &EncoderConfig, tensors: &[&Array2<f64>]) -> Vec<u8> {
    let cfg = serde_json::to_vec(config).expect("config serializes");
    let n_values: usize = tensors.iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(32 + cfg.len() + 16 * tensors.len() + 8 * n_values);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(magic: &[u8; 8], buf: &[u8]) -> Result<(EncoderConfig, Vec<Array2<f64>>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != magic {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = r.u64()? as usize;
    let config: EncoderConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    let n = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("tensor shape overflow".into()))?;
        let bytes = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor shape overflow".into()))?)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((config, tensors))
}

fn write_sidecar(path: &Path, names: &[String], tensors: &[&Array2<f64>]) -> Result<()> {
    let mut s = String::new();
    for (name, t) in names.iter().zip(tensors) {
        s.push_str(&format!("{name}\t{}\t{}\n", t.nrows(), t.ncols()));
    }
    let side = sidecar_path(path);
    fs::write(&side, s).map_err(|e| Error::io(&side, e))
}

pub fn save_params(params: &EncoderParameters, path: &Path) -> Result<()> {
    let tensors = params.tensors();
    fs::write(path, encode_tensors(PARAMS_MAGIC, &params.config, &tensors)).map_err(|e| Error::io(path, e))?;
    write_sidecar(path, &params.tensor_names(), &tensors)
}

pub fn load_params(path: &Path) -> Result<EncoderParameters> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, tensors) = decode_tensors(PARAMS_MAGIC, &buf)?;
    EncoderParameters::from_tensors(config, tensors)
}

/// Adam first and second moments, stored as two parameter-shaped blocks.
pub fn save_moments(m: &EncoderParameters, v: &EncoderParameters, path: &Path) -> Result<()> {
    let mut tensors = m.tensors();
    tensors.extend(v.tensors());
    fs::write(path, encode_tensors(OPTIM_MAGIC, &m.config, &tensors)).map_err(|e| Error::io(path, e))?;
    let mut names: Vec<String> = m.tensor_names().into_iter().map(|n| format!("m.{n}")).collect();
    names.extend(v.tensor_names().into_iter().map(|n| format!("v.{n}")));
    write_sidecar(path, &names, &tensors)
}

pub fn load_moments(path: &Path) -> Result<(EncoderParameters, EncoderParameters)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, mut tensors) = decode_tensors(OPTIM_MAGIC, &buf)?;
    if tensors.len() % 2 != 0 {
        return Err(Error::Checkpoint("odd moment tensor count".into()));
    }
    let v = tensors.split_off(tensors.len() / 2);
    Ok((
        EncoderParameters::from_tensors(config, tensors)?,
        EncoderParameters::from_tensors(config, v)?,
    ))
}
