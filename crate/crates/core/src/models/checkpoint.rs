//! Checkpoint container.
//!
//! ```text
//! "VCKP" | u16 version | u32 n | n bytes JSON {spec, info}
//! u32 P | P x (u16 len, name, u8 ndim, ndim x u32, f32 values)
//! u32 S | S x (u16 len, name, u32 channels, f32 mean[c], f32 var[c])
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::{Model, ModelSpec};

const MAGIC: [u8; 4] = *b"VCKP";
const VERSION: u16 = 1;
const WHAT: &str = "checkpoint";

/// Provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub seed: u64,
    /// Sample ids the weights were fit on; consulted by the leakage guard.
    pub train_ids: Vec<String>,
    /// Free-form training record (optimizer settings, epoch of selection).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: ModelSpec,
    info: CheckpointInfo,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    let len = u16::try_from(name.len()).expect("parameter names fit in u16");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_f32s<F: Float>(out: &mut Vec<u8>, vals: &[F]) {
    for v in vals {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint<F: Float>(model: &Model<F>, info: &CheckpointInfo) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        spec: model.spec.clone(),
        info: info.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + meta.len() + 4 * model.params.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        put_name(&mut out, &p.name);
        out.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, p.value.data());
    }
    out.extend_from_slice(&(model.stats.len() as u32).to_le_bytes());
    for s in model.stats.iter() {
        put_name(&mut out, &s.name);
        out.extend_from_slice(&(s.mean.len() as u32).to_le_bytes());
        put_f32s(&mut out, &s.mean);
        put_f32s(&mut out, &s.var);
    }
    Ok(out)
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
            .ok_or(Error::Truncated {
                what: WHAT,
                expected: self.pos.saturating_add(n),
                actual: self.buf.len(),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Corrupt {
            what: WHAT,
            msg: format!("name is not UTF-8: {e}"),
        })
    }

    fn f32s<F: Float>(&mut self, n: usize) -> Result<Vec<F>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect())
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt {
        what: WHAT,
        msg: msg.into(),
    }
}

/// Rebuild the model named in the container and overwrite every weight and statistic.
pub fn decode_checkpoint<F: Float>(bytes: &[u8]) -> Result<(Model<F>, CheckpointInfo)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::BadMagic {
        what: WHAT,
        expected: MAGIC,
        found: bytes.to_vec(),
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: WHAT,
            expected: MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { what: WHAT, version });
    }
    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
    let mut model = Model::<F>::build(meta.spec, 0)?;

    let n_params = r.u32()? as usize;
    if n_params != model.params.len() {
        return Err(corrupt(format!(
            "{n_params} parameters stored, architecture has {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; n_params];
    for _ in 0..n_params {
        let name = r.name()?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("shape overflow"))?;
        let values = r.f32s::<F>(numel)?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| corrupt(format!("unknown parameter {name:?}")))?;
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(corrupt(format!("parameter {name:?} stored twice")));
        }
        let p = model.params.get_mut(id);
        if p.value.shape() != shape.as_slice() {
            return Err(Error::shape("checkpoint parameter", p.value.shape(), &shape));
        }
        p.value = Tensor::from_vec(&shape, values)?;
    }

    let n_stats = r.u32()? as usize;
    if n_stats != model.stats.len() {
        return Err(corrupt(format!(
            "{n_stats} batch-norm entries stored, architecture has {}",
            model.stats.len()
        )));
    }
    for entry in model.stats.iter_mut() {
        let name = r.name()?;
        if name != entry.name {
            return Err(corrupt(format!(
                "expected statistics for {:?}, found {name:?}",
                entry.name
            )));
        }
        let c = r.u32()? as usize;
        if c != entry.mean.len() {
            return Err(Error::shape("checkpoint statistics", &[entry.mean.len()], &[c]));
        }
        entry.mean = r.f32s(c)?;
        entry.var = r.f32s(c)?;
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((model, meta.info))
}

pub fn write_checkpoint<F: Float>(path: &Path, model: &Model<F>, info: &CheckpointInfo) -> Result<()> {
    let bytes = encode_checkpoint(model, info)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<F: Float>(path: &Path) -> Result<(Model<F>, CheckpointInfo)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
