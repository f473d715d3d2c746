//! Synthetic chest phantoms: two lungs, and a heart of two contrast-filled chambers
//! between them. The label is 1 iff the RV/LV chamber volume ratio exceeds a threshold.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestRow, Split};
use super::volume::{write_volume, Volume, MIN_EDGE};
use crate::error::{Error, Result};
use crate::rng::derive_rng;

const STREAM_LABELS: u64 = 10;
const STREAM_GEOMETRY: u64 = 11;
const STREAM_NOISE: u64 = 12;
const STREAM_SPLIT: u64 = 13;

pub const VOLUME_DIR: &str = "volumes";
pub const MANIFEST_NAME: &str = "manifest.csv";

/// Closed interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    fn valid(self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }
}

/// Geometry is given in fractions of the cube edge; semi-axes are (z, y, x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dim: usize,
    pub positives: usize,
    pub negatives: usize,
    pub lung_semi_axes: [Interval; 3],
    /// Distance of each lung centre from the mid-sagittal plane.
    pub lung_offset: Interval,
    pub lv_semi_axes: [Interval; 3],
    /// Extra shape jitter of the RV before it is rescaled to its volume ratio.
    pub rv_shape_jitter: Interval,
    pub positive_ratio: Interval,
    pub negative_ratio: Interval,
    pub rv_lv_ratio_threshold: f64,
    /// Background gap between the chambers (interventricular septum).
    pub septum: f64,
    pub noise_sigma: Interval,
    pub max_offset: f64,
    pub max_rotation_deg: f64,
    pub background_hu: f64,
    pub lung_hu: f64,
    pub blood_hu: f64,
    pub field_of_view_mm: f64,
    /// train / val / test fractions, applied per class.
    pub split_fractions: [f64; 3],
}

impl PhantomSpec {
    pub fn new(seed: u64, dim: usize, positives: usize, negatives: usize) -> Self {
        Self {
            seed,
            dim,
            positives,
            negatives,
            lung_semi_axes: [Interval(0.28, 0.34), Interval(0.22, 0.27), Interval(0.10, 0.13)],
            lung_offset: Interval(0.27, 0.30),
            lv_semi_axes: [Interval(0.085, 0.095), Interval(0.085, 0.095), Interval(0.075, 0.085)],
            rv_shape_jitter: Interval(0.9, 1.1),
            positive_ratio: Interval(1.3, 2.0),
            negative_ratio: Interval(0.6, 0.85),
            rv_lv_ratio_threshold: 1.0,
            septum: 0.025,
            noise_sigma: Interval(15.0, 20.0),
            max_offset: 0.03,
            max_rotation_deg: 10.0,
            background_hu: 40.0,
            lung_hu: -850.0,
            blood_hu: 150.0,
            field_of_view_mm: 320.0,
            split_fractions: [0.68, 0.12, 0.20],
        }
    }

    /// `count` phantoms of which a quarter (rounded) are positive.
    pub fn with_count(seed: u64, dim: usize, count: usize) -> Self {
        let pos = (count as f64 * 0.25).round() as usize;
        Self::new(seed, dim, pos, count - pos)
    }

    pub fn count(&self) -> usize {
        self.positives + self.negatives
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < MIN_EDGE {
            return Err(Error::Config(format!(
                "phantom dim {} below the minimum {MIN_EDGE}",
                self.dim
            )));
        }
        if self.count() == 0 {
            return Err(Error::Config("phantom count must be >= 1".into()));
        }
        let intervals = self.lung_semi_axes.iter().chain(&self.lv_semi_axes).chain([
            &self.lung_offset,
            &self.rv_shape_jitter,
            &self.positive_ratio,
            &self.negative_ratio,
            &self.noise_sigma,
        ]);
        for i in intervals {
            if !i.valid() || i.0 < 0.0 {
                return Err(Error::Config(format!("invalid phantom interval {i:?}")));
            }
        }
        let t = self.rv_lv_ratio_threshold;
        if !(self.positive_ratio.0 > t && self.negative_ratio.1 <= t) {
            return Err(Error::Config(format!(
                "ratio ranges {:?} / {:?} do not straddle the threshold {t}",
                self.positive_ratio, self.negative_ratio
            )));
        }
        // lungs must stay inside the grid under the worst offset and rotation
        let [az, ay, ax] = self.lung_semi_axes.map(|i| i.1);
        let off = self.lung_offset.1;
        let (s, c) = self.max_rotation_deg.min(90.0).to_radians().sin_cos();
        let reach_y = off * s + (ay * c).hypot(ax * s);
        let reach_x = off * c.max(s) + (ay * s).hypot(ax * c).max(ax);
        if az.max(reach_y).max(reach_x) + self.max_offset >= 0.5 {
            return Err(Error::Config("lung ranges reach outside the volume".into()));
        }
        let f = self.split_fractions;
        if f.iter().any(|&x| x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {f:?} must be >= 0 and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Ellipsoid in voxel coordinates, rotated by `rotation_deg` about the z axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub rotation_deg: f64,
}

impl Ellipsoid {
    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.semi_axes.iter().product::<f64>()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        // rotate the offset back into the ellipsoid frame
        let local = [d[0], c * d[1] + s * d[2], -s * d[1] + c * d[2]];
        local
            .iter()
            .zip(&self.semi_axes)
            .map(|(v, a)| (v / a).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Axis-aligned half extents of the rotated ellipsoid.
    pub fn half_extents(&self) -> [f64; 3] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let [az, ay, ax] = self.semi_axes;
        [az, (ay * c).hypot(ax * s), (ay * s).hypot(ax * c)]
    }
}

/// Everything needed to re-render a phantom and re-derive its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub id: String,
    pub index: usize,
    pub label: u8,
    pub dim: usize,
    pub rv_lv_ratio_threshold: f64,
    pub lungs: [Ellipsoid; 2],
    pub lv: Ellipsoid,
    pub rv: Ellipsoid,
    pub noise_sigma: f64,
    pub offset: [f64; 3],
    pub rotation_deg: f64,
    pub background_hu: f64,
    pub lung_hu: f64,
    pub blood_hu: f64,
}

impl PhantomParams {
    pub fn rv_lv_ratio(&self) -> f64 {
        self.rv.volume() / self.lv.volume()
    }

    /// The generator's label rule applied to the stored geometry.
    pub fn derived_label(&self) -> u8 {
        u8::from(self.rv_lv_ratio() > self.rv_lv_ratio_threshold)
    }

    /// Voxel-space box `[lo, hi]` (inclusive, real-valued) enclosing both chambers.
    pub fn heart_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for e in [self.lv, self.rv] {
            let h = e.half_extents();
            for a in 0..3 {
                lo[a] = lo[a].min(e.center[a] - h[a]);
                hi[a] = hi[a].max(e.center[a] + h[a]);
            }
        }
        (lo, hi)
    }
}

fn rotate_about(p: [f64; 3], pivot: [f64; 3], deg: f64) -> [f64; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let (dy, dx) = (p[1] - pivot[1], p[2] - pivot[2]);
    [p[0], pivot[1] + c * dy - s * dx, pivot[2] + s * dy + c * dx]
}

fn draw_params(spec: &PhantomSpec, index: usize, label: u8) -> PhantomParams {
    let mut rng = derive_rng(spec.seed, &[STREAM_GEOMETRY, index as u64]);
    let n = spec.dim as f64;
    let mid = (n - 1.0) / 2.0;
    let offset = [0; 3].map(|_| rng.random_range(-spec.max_offset..=spec.max_offset) * n);
    let rotation_deg = rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg);
    let pivot = [mid + offset[0], mid + offset[1], mid + offset[2]];
    let place = |p: [f64; 3], rot: f64| Ellipsoid {
        center: rotate_about([p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]], pivot, rot),
        semi_axes: [0.0; 3],
        rotation_deg: rot,
    };

    let mut lungs = [Ellipsoid {
        center: [0.0; 3],
        semi_axes: [0.0; 3],
        rotation_deg: 0.0,
    }; 2];
    for (side, lung) in lungs.iter_mut().enumerate() {
        let axes = spec.lung_semi_axes.map(|i| i.sample(&mut rng) * n);
        let dx = spec.lung_offset.sample(&mut rng) * n * if side == 0 { -1.0 } else { 1.0 };
        *lung = Ellipsoid {
            semi_axes: axes,
            ..place([mid, mid, mid + dx], rotation_deg)
        };
    }

    let lv_axes = spec.lv_semi_axes.map(|i| i.sample(&mut rng) * n);
    let ratio = if label == 1 {
        spec.positive_ratio.sample(&mut rng)
    } else {
        spec.negative_ratio.sample(&mut rng)
    };
    let shape = [0; 3].map(|_| spec.rv_shape_jitter.sample(&mut rng));
    let raw: [f64; 3] = [0, 1, 2].map(|a| lv_axes[a] * shape[a]);
    // scale the jittered shape so the volume ratio is exact
    let k = (ratio * lv_axes.iter().product::<f64>() / raw.iter().product::<f64>()).cbrt();
    let rv_axes = raw.map(|a| a * k);
    let heart = [mid - 0.02 * n, mid + 0.05 * n, mid];
    let gap = spec.septum * n / 2.0;
    // patient left (LV) at +x, right (RV) at -x
    let lv_c = [heart[0], heart[1], heart[2] + lv_axes[2] + gap];
    let rv_c = [heart[0], heart[1], heart[2] - rv_axes[2] - gap];
    let lv = Ellipsoid {
        semi_axes: lv_axes,
        ..place(lv_c, rotation_deg)
    };
    let rv = Ellipsoid {
        semi_axes: rv_axes,
        ..place(rv_c, rotation_deg)
    };
    PhantomParams {
        id: phantom_id(index),
        index,
        label,
        dim: spec.dim,
        rv_lv_ratio_threshold: spec.rv_lv_ratio_threshold,
        lungs,
        lv,
        rv,
        noise_sigma: spec.noise_sigma.sample(&mut rng),
        offset,
        rotation_deg,
        background_hu: spec.background_hu,
        lung_hu: spec.lung_hu,
        blood_hu: spec.blood_hu,
    }
}

pub fn phantom_id(index: usize) -> String {
    format!("phantom-{index:04}")
}

/// Noise-free tissue value at a voxel centre.
pub fn tissue_hu(p: &PhantomParams, at: [f64; 3]) -> f64 {
    if p.lv.contains(at) || p.rv.contains(at) {
        p.blood_hu
    } else if p.lungs.iter().any(|l| l.contains(at)) {
        p.lung_hu
    } else {
        p.background_hu
    }
}

/// Render a phantom; noise comes from its own stream so geometry and noise are separable.
pub fn render(p: &PhantomParams, seed: u64, spacing_mm: f32) -> Result<Volume> {
    let n = p.dim;
    let mut rng = derive_rng(seed, &[STREAM_NOISE, p.index as u64]);
    let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let mut values = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let base = tissue_hu(p, [z as f64, y as f64, x as f64]);
                values.push(base + noise.sample(&mut rng));
            }
        }
    }
    Volume::from_f64([n; 3], [spacing_mm; 3], &values)
}

/// Stratified split: each class is shuffled and cut by the configured fractions.
fn assign_splits(spec: &PhantomSpec, labels: &[u8]) -> Vec<Split> {
    let mut rng = derive_rng(spec.seed, &[STREAM_SPLIT]);
    let mut out = vec![Split::Train; labels.len()];
    for class in [1u8, 0] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (n * spec.split_fractions[0]).round() as usize;
        let n_val = ((n * spec.split_fractions[1]).round() as usize).min(idx.len() - n_train);
        for (k, &i) in idx.iter().enumerate() {
            out[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out
}

/// Label assignment: exactly `positives` ones, placed by a seeded shuffle.
fn assign_labels(spec: &PhantomSpec) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..spec.count()).map(|i| u8::from(i < spec.positives)).collect();
    labels.shuffle(&mut derive_rng(spec.seed, &[STREAM_LABELS]));
    labels
}

pub fn phantom_params(spec: &PhantomSpec) -> Vec<PhantomParams> {
    assign_labels(spec)
        .into_iter()
        .enumerate()
        .map(|(i, l)| draw_params(spec, i, l))
        .collect()
}

/// Write volumes, per-sample JSON sidecars and `manifest.csv` under `out_dir`.
pub fn generate_phantoms(spec: &PhantomSpec, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    let vol_dir = out_dir.join(VOLUME_DIR);
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let params = phantom_params(spec);
    let labels: Vec<u8> = params.iter().map(|p| p.label).collect();
    let splits = assign_splits(spec, &labels);
    let spacing = (spec.field_of_view_mm / spec.dim as f64) as f32;
    let mut rows = Vec::with_capacity(params.len());
    for (p, split) in params.iter().zip(splits) {
        let volume = render(p, spec.seed, spacing)?;
        let rel = format!("{VOLUME_DIR}/{}.volr", p.id);
        write_volume(&out_dir.join(&rel), &volume)?;
        let sidecar = sidecar_path(&out_dir.join(&rel));
        let text = serde_json::to_string_pretty(p)? + "\n";
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
        rows.push(ManifestRow {
            id: p.id.clone(),
            path: rel,
            label: p.label,
            split,
        });
    }
    write_manifest(&out_dir.join(MANIFEST_NAME), &rows)?;
    Ok(rows)
}

pub fn sidecar_path(volume_path: &Path) -> std::path::PathBuf {
    volume_path.with_extension("json")
}

pub fn read_sidecar(volume_path: &Path) -> Result<PhantomParams> {
    let p = sidecar_path(volume_path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}
