//! VOLR raw container: a 38-byte little-endian header followed by a z-major payload.
//!
//! ```text
//! "VOLR" | version u16 | D,H,W u32 | spacing 3 x f32 | 8 reserved zero bytes | payload
//! ```
//! Version 1 carries i16 Hounsfield units, version 2 carries f32 values.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VOLR";
pub const HEADER_LEN: usize = 38;
pub const VERSION_HU: u16 = 1;
pub const VERSION_F32: u16 = 2;
pub const MIN_EDGE: usize = 8;
pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

/// A CT grid in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    values: Vec<i16>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], values: Vec<i16>) -> Result<Self> {
        if dims.iter().any(|&d| d < MIN_EDGE) {
            return Err(Error::Data(format!(
                "volume dims {dims:?} below the minimum edge {MIN_EDGE}"
            )));
        }
        check_grid(dims, spacing, values.len())?;
        if let Some(v) = values.iter().find(|v| !(HU_MIN..=HU_MAX).contains(v)) {
            return Err(Error::Data(format!("HU value {v} outside [{HU_MIN}, {HU_MAX}]")));
        }
        Ok(Self { dims, spacing, values })
    }

    /// Round and clamp real-valued HU into a valid volume.
    pub fn from_f64(dims: [usize; 3], spacing: [f32; 3], values: &[f64]) -> Result<Self> {
        let v = values
            .iter()
            .map(|x| x.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16)
            .collect();
        Self::new(dims, spacing, v)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[i16] {
        &self.values
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> i16 {
        self.values[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A real-valued grid stored with the f32 payload variant (heatmaps).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatGrid {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub values: Vec<f32>,
}

impl FloatGrid {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], values: Vec<f32>) -> Result<Self> {
        check_grid(dims, spacing, values.len())?;
        Ok(Self { dims, spacing, values })
    }
}

fn check_grid(dims: [usize; 3], spacing: [f32; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
        return Err(Error::Data(format!("invalid grid dims {dims:?}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Data(format!(
            "voxel spacing {spacing:?} must be positive and finite"
        )));
    }
    let n: usize = dims.iter().product();
    if n != len {
        return Err(Error::shape("volume", &dims, &[len]));
    }
    Ok(())
}

fn header(version: u16, dims: [usize; 3], spacing: [f32; 3], payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&[0u8; 8]);
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(VERSION_HU, v.dims, v.spacing, 2 * v.values.len());
    for x in &v.values {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_float_grid(g: &FloatGrid) -> Vec<u8> {
    let mut out = header(VERSION_F32, g.dims, g.spacing, 4 * g.values.len());
    for x in &g.values {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Header {
    version: u16,
    dims: [usize; 3],
    spacing: [f32; 3],
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            what: "volume",
            expected: MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            what: "volume header",
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION_HU && version != VERSION_F32 {
        return Err(Error::UnsupportedVersion {
            what: "volume",
            version,
        });
    }
    let dims = [0, 1, 2].map(|i| le_u32(&bytes[6 + 4 * i..10 + 4 * i]) as usize);
    let spacing = [0, 1, 2].map(|i| f32::from_le_bytes(bytes[18 + 4 * i..22 + 4 * i].try_into().expect("4 bytes")));
    if bytes[30..38].iter().any(|&b| b != 0) {
        return Err(Error::Corrupt {
            what: "volume",
            msg: "reserved header bytes are not zero".into(),
        });
    }
    Ok(Header { version, dims, spacing })
}

/// Payload byte count implied by the header; a short payload is a truncation, an
/// over-long one a length mismatch.
fn payload<'a>(h: &Header, bytes: &'a [u8], width: usize) -> Result<&'a [u8]> {
    let expected = h
        .dims
        .iter()
        .try_fold(width, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Corrupt {
            what: "volume",
            msg: format!("dims {:?} overflow", h.dims),
        })?;
    let actual = bytes.len() - HEADER_LEN;
    if actual < expected {
        return Err(Error::Truncated {
            what: "volume payload",
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(Error::LengthMismatch {
            what: "volume",
            expected,
            actual,
        });
    }
    Ok(&bytes[HEADER_LEN..])
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let h = parse_header(bytes)?;
    if h.version != VERSION_HU {
        return Err(Error::UnsupportedVersion {
            what: "HU volume",
            version: h.version,
        });
    }
    let p = payload(&h, bytes, 2)?;
    let values = p.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
    Volume::new(h.dims, h.spacing, values)
}

pub fn decode_float_grid(bytes: &[u8]) -> Result<FloatGrid> {
    let h = parse_header(bytes)?;
    if h.version != VERSION_F32 {
        return Err(Error::UnsupportedVersion {
            what: "f32 volume",
            version: h.version,
        });
    }
    let p = payload(&h, bytes, 4)?;
    let values = p
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FloatGrid::new(h.dims, h.spacing, values)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&read_bytes(path)?)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_bytes(path, &encode_volume(v))
}

pub fn read_float_grid(path: &Path) -> Result<FloatGrid> {
    decode_float_grid(&read_bytes(path)?)
}

pub fn write_float_grid(path: &Path, g: &FloatGrid) -> Result<()> {
    write_bytes(path, &encode_float_grid(g))
}
