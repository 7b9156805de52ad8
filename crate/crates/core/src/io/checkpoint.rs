//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "FHKD" | version u32 | config_len u32 | config (TOML, UTF-8)
//! | tensor_count u32 | tensor*
//! | has_optimizer u8 | [step u64 | m tensor* | v tensor*]
//! | crc64 u64   (CRC-64/XZ over every preceding byte)
//!
//! tensor := name_len u32 | name | ndim u32 | dim u32 * ndim | f32 * numel
//! ```
//!
//! Payloads are stored as `f32`; `f64` models are rounded on save.

use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::distill::OptimizerState;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FHKD";
pub const CHECKPOINT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("field {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor<T: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.ndim())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for &x in t.data() {
        let x = x.to_f32().expect("finite float converts to f32");
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

/// Serializes `model` (and optionally the optimizer moments) to bytes.
pub fn write_checkpoint<T: Element>(
    model: &Model<T>,
    optimizer: Option<&OptimizerState<T>>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = model.config.to_toml()?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(config.as_bytes());
    put_u32(&mut out, model.params.len())?;
    for p in model.params.iter() {
        put_tensor(&mut out, &p.name, &p.value)?;
    }
    match optimizer {
        None => out.push(0),
        Some(state) => {
            if state.m.len() != model.params.len() || state.v.len() != model.params.len() {
                return Err(Error::Checkpoint(
                    "optimizer state does not match the parameters".into(),
                ));
            }
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            for (p, m) in model.params.iter().zip(&state.m) {
                put_tensor(&mut out, &p.name, m)?;
            }
            for (p, v) in model.params.iter().zip(&state.v) {
                put_tensor(&mut out, &p.name, v)?;
            }
        }
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?)
            .map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }

    fn tensor<T: Element>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.str()?.to_string();
        let ndim = self.u32()?;
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("shape of `{name}` overflows")))?;
        let bytes = self.take(numel.saturating_mul(4))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::c(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let t = Tensor::from_vec(&shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

/// Parses bytes produced by [`write_checkpoint`].
pub fn read_checkpoint<T: Element>(bytes: &[u8]) -> Result<(Model<T>, Option<OptimizerState<T>>)> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing FHKD magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut cur = Cursor { buf: body, pos: 8 };
    let config = ModelConfig::from_toml(cur.str()?)?;
    let count = cur.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let (name, t) = cur.tensor::<T>()?;
        params.insert(name, t)?;
    }
    let optimizer = match cur.u8()? {
        0 => None,
        1 => {
            let step = cur.u64()?;
            let mut read_all = || -> Result<Vec<Tensor<T>>> {
                (0..count)
                    .map(|_| cur.tensor::<T>().map(|(_, t)| t))
                    .collect()
            };
            let m = read_all()?;
            let v = read_all()?;
            Some(OptimizerState { step, m, v })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if cur.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            body.len() - cur.pos
        )));
    }
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let model = Model::from_parts(config, params)?;
    Ok((model, optimizer))
}

pub fn save_checkpoint<T: Element>(
    model: &Model<T>,
    optimizer: Option<&OptimizerState<T>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(model, optimizer)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(
    path: impl AsRef<Path>,
) -> Result<(Model<T>, Option<OptimizerState<T>>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
