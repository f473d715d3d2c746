//! Lung-based VOI crop, cubic trilinear resampling and intensity normalization.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{Error, Result};
use crate::layers::{linear_taps, trilinear};
use crate::tensor::Tensor;

/// Normalization window in HU; values map linearly onto [0, 1].
pub const NORM_WINDOW: (f32, f32) = (-1000.0, 400.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoiConfig {
    /// Inclusive HU window classifying a voxel as lung.
    pub lung_window: (i16, i16),
    /// Minimum component size as a fraction of the grid.
    pub min_component_fraction: f64,
    /// Bounding-box dilation per side, in voxels.
    pub dilation: usize,
}

impl Default for VoiConfig {
    fn default() -> Self {
        Self {
            lung_window: (-1000, -400),
            min_component_fraction: 0.01,
            dilation: 8,
        }
    }
}

/// Half-open voxel box `[lo, hi)` per axis (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn full(dims: [usize; 3]) -> Self {
        Self { lo: [0; 3], hi: dims }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] < self.hi[a])
    }

    fn include(&mut self, p: [usize; 3]) {
        for a in 0..3 {
            self.lo[a] = self.lo[a].min(p[a]);
            self.hi[a] = self.hi[a].max(p[a] + 1);
        }
    }

    fn union(a: Self, b: Self) -> Self {
        Self {
            lo: [0, 1, 2].map(|i| a.lo[i].min(b.lo[i])),
            hi: [0, 1, 2].map(|i| a.hi[i].max(b.hi[i])),
        }
    }

    fn dilate(self, by: usize, dims: [usize; 3]) -> Self {
        Self {
            lo: self.lo.map(|l| l.saturating_sub(by)),
            hi: [0, 1, 2].map(|a| (self.hi[a] + by).min(dims[a])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voi {
    pub volume: Volume,
    pub bbox: BoundingBox,
    /// Set when fewer than two lung components qualified and the full grid was kept.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy)]
struct Component {
    size: usize,
    bbox: BoundingBox,
}

/// 6-connected components of the voxels inside the lung window, largest first.
fn lung_components(v: &Volume, window: (i16, i16)) -> Vec<Component> {
    let [d, h, w] = v.dims();
    let vals = v.values();
    let inside = |i: usize| (window.0..=window.1).contains(&vals[i]);
    let mut seen = vec![false; vals.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..vals.len() {
        if seen[start] || !inside(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut c = Component {
            size: 0,
            bbox: BoundingBox {
                lo: [usize::MAX; 3],
                hi: [0; 3],
            },
        };
        while let Some(i) = queue.pop_front() {
            let p = [i / (h * w), (i / w) % h, i % w];
            c.size += 1;
            c.bbox.include(p);
            let mut visit = |j: usize| {
                if !seen[j] && inside(j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if p[0] > 0 {
                visit(i - h * w);
            }
            if p[0] + 1 < d {
                visit(i + h * w);
            }
            if p[1] > 0 {
                visit(i - w);
            }
            if p[1] + 1 < h {
                visit(i + w);
            }
            if p[2] > 0 {
                visit(i - 1);
            }
            if p[2] + 1 < w {
                visit(i + 1);
            }
        }
        comps.push(c);
    }
    // stable: equal sizes keep scan order
    comps.sort_by(|a, b| b.size.cmp(&a.size));
    comps
}

pub fn crop(v: &Volume, bbox: BoundingBox) -> Result<Volume> {
    let [_, h, w] = v.dims();
    let e = bbox.extent();
    let mut out = Vec::with_capacity(e.iter().product());
    for z in bbox.lo[0]..bbox.hi[0] {
        for y in bbox.lo[1]..bbox.hi[1] {
            let row = (z * h + y) * w;
            out.extend_from_slice(&v.values()[row + bbox.lo[2]..row + bbox.hi[2]]);
        }
    }
    Volume::new(e, v.spacing(), out)
}

/// Crop to the dilated joint bounding box of the two largest lung components.
pub fn extract_voi(v: &Volume, cfg: &VoiConfig) -> Result<Voi> {
    let min_size = (cfg.min_component_fraction * v.len() as f64).ceil() as usize;
    let comps: Vec<Component> = lung_components(v, cfg.lung_window)
        .into_iter()
        .filter(|c| c.size >= min_size.max(1))
        .take(2)
        .collect();
    if comps.len() < 2 {
        return Ok(Voi {
            volume: v.clone(),
            bbox: BoundingBox::full(v.dims()),
            fallback: true,
        });
    }
    let bbox = BoundingBox::union(comps[0].bbox, comps[1].bbox).dilate(cfg.dilation, v.dims());
    // the crop must remain a valid volume
    let bbox = widen_to_min(bbox, v.dims());
    Ok(Voi {
        volume: crop(v, bbox)?,
        bbox,
        fallback: false,
    })
}

fn widen_to_min(mut b: BoundingBox, dims: [usize; 3]) -> BoundingBox {
    let min = super::volume::MIN_EDGE;
    for a in 0..3 {
        while b.hi[a] - b.lo[a] < min.min(dims[a]) {
            if b.hi[a] < dims[a] {
                b.hi[a] += 1;
            } else {
                b.lo[a] -= 1;
            }
        }
    }
    b
}

/// Trilinear (half-pixel) resample onto an `edge`^3 grid; spacing scales with the extent.
pub fn resample_to_cube(v: &Volume, edge: usize) -> Result<Volume> {
    if edge < super::volume::MIN_EDGE {
        return Err(Error::Config(format!(
            "resample edge {edge} below the minimum {}",
            super::volume::MIN_EDGE
        )));
    }
    let dims = v.dims();
    let spacing = [0, 1, 2].map(|a| v.spacing()[a] * dims[a] as f32 / edge as f32);
    if dims == [edge; 3] {
        return Volume::new(dims, spacing, v.values().to_vec());
    }
    let src: Vec<f64> = v.values().iter().map(|&x| x as f64).collect();
    let taps = [0, 1, 2].map(|a| linear_taps(dims[a], edge));
    let out = trilinear(&src, 1, dims, &taps);
    Volume::from_f64([edge; 3], spacing, &out)
}

/// Clamp HU to the normalization window and map to [0, 1]; shape `[1, 1, D, H, W]`.
pub fn normalize_for_network(v: &Volume) -> Tensor<f32> {
    let (lo, hi) = NORM_WINDOW;
    let data = v
        .values()
        .iter()
        .map(|&x| ((x as f32).clamp(lo, hi) - lo) / (hi - lo))
        .collect();
    let [d, h, w] = v.dims();
    Tensor::from_vec(&[1, 1, d, h, w], data).expect("dims match payload")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub edge: usize,
    #[serde(default)]
    pub voi: VoiConfig,
}

impl PreprocessConfig {
    pub fn new(edge: usize) -> Self {
        Self {
            edge,
            voi: VoiConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub tensor: Tensor<f32>,
    pub bbox: BoundingBox,
    pub fallback: bool,
}

/// VOI crop, then resample, then normalize.
pub fn preprocess(v: &Volume, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let voi = extract_voi(v, &cfg.voi)?;
    let cube = resample_to_cube(&voi.volume, cfg.edge)?;
    Ok(Preprocessed {
        tensor: normalize_for_network(&cube),
        bbox: voi.bbox,
        fallback: voi.fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(dims: [usize; 3], hu: i16) -> Volume {
        Volume::new(dims, [1.0; 3], vec![hu; dims.iter().product()]).unwrap()
    }

    #[test]
    fn normalization_endpoints() {
        let v = Volume::new([8, 8, 8], [1.0; 3], [-1000, 400, -300, 2000].repeat(128)).unwrap();
        let t = normalize_for_network(&v);
        assert_eq!(t.shape(), &[1, 1, 8, 8, 8]);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 0.5, 1.0]);
    }

    #[test]
    fn uniform_volumes_fall_back() {
        for hu in [-1000, 0] {
            let v = filled([12, 12, 12], hu);
            let voi = extract_voi(&v, &VoiConfig::default()).unwrap();
            assert!(voi.fallback);
            assert_eq!(voi.volume, v);
        }
    }

    #[test]
    fn two_blobs_give_dilated_joint_box() {
        let dims = [20, 30, 40];
        let mut vals = vec![40i16; 20 * 30 * 40];
        let mut put = |z: usize, y: usize, x: usize| vals[(z * 30 + y) * 40 + x] = -850;
        for z in 9..12 {
            for y in 12..16 {
                for x in 10..14 {
                    put(z, y, x);
                }
                for x in 25..28 {
                    put(z, y, x);
                }
            }
        }
        let v = Volume::new(dims, [1.0; 3], vals).unwrap();
        let voi = extract_voi(
            &v,
            &VoiConfig {
                min_component_fraction: 0.001,
                dilation: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!voi.fallback);
        assert_eq!(
            voi.bbox,
            BoundingBox {
                lo: [7, 10, 8],
                hi: [15, 18, 30]
            }
        );
        assert_eq!(voi.volume.dims(), [8, 8, 22]);
    }

    #[test]
    fn identity_and_constant_resample() {
        let v = Volume::new([8, 8, 8], [1.0; 3], (0..512).map(|i| (i % 97) as i16).collect()).unwrap();
        assert_eq!(resample_to_cube(&v, 8).unwrap().values(), v.values());
        let c = resample_to_cube(&filled([9, 11, 13], 123), 16).unwrap();
        assert!(c.values().iter().all(|&x| x == 123));
        assert_eq!(c.spacing(), [9.0 / 16.0, 11.0 / 16.0, 13.0 / 16.0]);
    }
}
