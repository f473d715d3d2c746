//! Volume container, preprocessing, manifests and the chest-phantom generator.

mod manifest;
mod phantom;
mod preprocess;
mod volume;

use log::warn;

use crate::error::Result;
use crate::tensor::Tensor;

pub use manifest::{read_manifest, write_manifest, Manifest, ManifestRow, Split};
pub use phantom::{
    generate_phantoms, phantom_id, phantom_params, read_sidecar, render, sidecar_path, tissue_hu, Ellipsoid, Interval,
    PhantomParams, PhantomSpec, MANIFEST_NAME, VOLUME_DIR,
};
pub use preprocess::{
    crop, extract_voi, normalize_for_network, preprocess, resample_to_cube, BoundingBox, PreprocessConfig,
    Preprocessed, Voi, VoiConfig, NORM_WINDOW,
};
pub use volume::{
    decode_float_grid, decode_volume, encode_float_grid, encode_volume, read_float_grid, read_volume, write_float_grid,
    write_volume, FloatGrid, Volume, HEADER_LEN, HU_MAX, HU_MIN, MAGIC, MIN_EDGE, VERSION_F32, VERSION_HU,
};

/// A network-ready example: `tensor` has shape `[1, 1, D, H, W]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: u8,
    pub tensor: Tensor<f32>,
}

/// Where a sample's network grid came from in its source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub id: String,
    pub source_dims: [usize; 3],
    pub voi: BoundingBox,
    pub fallback: bool,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedSplit {
    pub samples: Vec<Sample>,
    pub meta: Vec<SampleMeta>,
}

impl LoadedSplit {
    pub fn fallback_ids(&self) -> Vec<String> {
        self.meta.iter().filter(|m| m.fallback).map(|m| m.id.clone()).collect()
    }
}

pub fn load_row(manifest: &Manifest, row: &ManifestRow, cfg: &PreprocessConfig) -> Result<(Sample, SampleMeta)> {
    let v = read_volume(&manifest.resolve(row))?;
    let p = preprocess(&v, cfg)?;
    if p.fallback {
        warn!("{}: lungs not found, using the full volume", row.id);
    }
    Ok((
        Sample {
            id: row.id.clone(),
            label: row.label,
            tensor: p.tensor,
        },
        SampleMeta {
            id: row.id.clone(),
            source_dims: v.dims(),
            voi: p.bbox,
            fallback: p.fallback,
        },
    ))
}

/// Read and preprocess every row of one split, in manifest order.
pub fn load_split(manifest: &Manifest, split: Split, cfg: &PreprocessConfig) -> Result<LoadedSplit> {
    let mut out = LoadedSplit::default();
    for row in manifest.split(split) {
        let (s, m) = load_row(manifest, row, cfg)?;
        out.samples.push(s);
        out.meta.push(m);
    }
    Ok(out)
}

/// Map a source-voxel coordinate into the network grid produced by `preprocess`.
pub fn to_network_coords(p: [f64; 3], voi: &BoundingBox, edge: usize) -> [f64; 3] {
    let e = voi.extent();
    [0, 1, 2].map(|a| (p[a] - voi.lo[a] as f64 + 0.5) * edge as f64 / e[a] as f64 - 0.5)
}
