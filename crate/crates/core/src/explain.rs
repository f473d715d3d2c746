//! 3-D Grad-CAM over named taps, multiplicative multi-layer aggregation, heatmap
//! export and a localization statistic for phantom positives.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_float_grid, to_network_coords, write_float_grid, FloatGrid, PhantomParams, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::evaluation::LocalizationSummary;
use crate::layers::{linear_taps, trilinear};
use crate::models::Model;
use crate::nn::Mode;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub taps: Vec<String>,
    pub sample_id: String,
}

/// Values in [0, 1] on the network input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub dims: [usize; 3],
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

impl Heatmap {
    pub fn new(dims: [usize; 3], values: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::shape("heatmap", &dims, &[values.len()]));
        }
        Ok(Self {
            dims,
            values,
            provenance,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Intensity-weighted centroid in voxel coordinates; `None` for an all-zero map.
    pub fn center_of_mass(&self) -> Option<[f64; 3]> {
        let [_, h, w] = self.dims;
        let mut acc = [0.0; 3];
        let mut mass = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            let v = v as f64;
            if v > 0.0 {
                let p = [i / (h * w), (i / w) % h, i % w];
                for a in 0..3 {
                    acc[a] += v * p[a] as f64;
                }
                mass += v;
            }
        }
        (mass > 0.0).then(|| acc.map(|c| c / mass))
    }
}

/// Min-max normalization to [0, 1]. A constant map becomes all ones when its value is
/// positive and all zeros otherwise, so an all-zero map stays all-zero.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        return vec![fill; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// One sample's Grad-CAM at one tap, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub tap: String,
    pub tap_dims: [usize; 3],
    /// ReLU of the gradient-weighted channel sum at tap resolution.
    pub coarse: Vec<f64>,
    /// `coarse` trilinearly resampled to the input grid.
    pub upsampled: Vec<f64>,
}

impl CamMap {
    pub fn heatmap(&self, input_dims: [usize; 3], provenance: Provenance) -> Heatmap {
        let values = min_max_normalize(&self.upsampled)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        Heatmap {
            dims: input_dims,
            values,
            provenance,
        }
    }
}

/// Grad-CAM for every sample of `batch` at each tap; the outer index is the sample.
///
/// The backward pass runs from the sum of the batch's logits. In eval mode samples do
/// not interact, so each sample receives exactly its own logit's gradient.
pub fn gradcam_maps<F: Float>(model: &Model<F>, batch: &Tensor<F>, taps: &[String]) -> Result<Vec<Vec<CamMap>>> {
    let [n, _, d, h, w] = batch.dims5("gradcam")?;
    let valid = model.spec.tap_names();
    if let Some(bad) = taps.iter().find(|t| !valid.contains(t)) {
        return Err(Error::UnknownTap {
            name: bad.clone(),
            valid,
        });
    }
    let mut f = model.forward_ctx(Mode::Eval);
    let x = f.input(batch.clone(), false);
    let logits = model.forward_logit(&mut f, x)?;
    let vars: Vec<_> = taps
        .iter()
        .map(|t| {
            f.tap_var(t).ok_or_else(|| Error::UnknownTap {
                name: t.clone(),
                valid: valid.clone(),
            })
        })
        .collect::<Result<_>>()?;
    for &v in &vars {
        f.tape.retain_grad(v);
    }
    let total = f.tape.sum(logits);
    f.backward(total)?;

    let mut out: Vec<Vec<CamMap>> = (0..n).map(|_| Vec::with_capacity(taps.len())).collect();
    for (tap, &v) in taps.iter().zip(&vars) {
        let a = f.value(v);
        let [_, c, td, th, tw] = a.dims5("gradcam")?;
        let vol = td * th * tw;
        let zeros;
        let g: &[F] = match f.tape.grad_slice(v) {
            Some(g) => g,
            None => {
                zeros = vec![F::zero(); a.numel()];
                &zeros
            }
        };
        let taps3 = [linear_taps(td, d), linear_taps(th, h), linear_taps(tw, w)];
        for (s, maps) in out.iter_mut().enumerate() {
            let mut cam = vec![0.0f64; vol];
            for ch in 0..c {
                let base = (s * c + ch) * vol;
                let alpha = g[base..base + vol].iter().map(|x| x.f64()).sum::<f64>() / vol as f64;
                if alpha == 0.0 {
                    continue;
                }
                for (o, x) in cam.iter_mut().zip(&a.data()[base..base + vol]) {
                    *o += alpha * x.f64();
                }
            }
            cam.iter_mut().for_each(|v| *v = v.max(0.0));
            let upsampled = trilinear(&cam, 1, [td, th, tw], &taps3);
            maps.push(CamMap {
                tap: tap.clone(),
                tap_dims: [td, th, tw],
                coarse: cam,
                upsampled,
            });
        }
    }
    Ok(out)
}

/// Normalized Grad-CAM heatmap of a single-sample input at `tap`.
pub fn gradcam_layer<F: Float>(model: &Model<F>, input: &Tensor<F>, tap: &str) -> Result<Heatmap> {
    let [n, _, d, h, w] = input.dims5("gradcam_layer")?;
    if n != 1 {
        return Err(Error::invalid("gradcam_layer", format!("expected one sample, got {n}")));
    }
    let maps = gradcam_maps(model, input, &[tap.to_string()])?;
    Ok(maps[0][0].heatmap(
        [d, h, w],
        Provenance {
            taps: vec![tap.to_string()],
            ..Default::default()
        },
    ))
}

/// Voxelwise product of the maps, then min-max normalization.
pub fn gradcam_aggregate(maps: &[Heatmap]) -> Result<Heatmap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Data("cannot aggregate an empty list of heatmaps".into()))?;
    let mut prod: Vec<f64> = vec![1.0; first.values.len()];
    let mut taps = Vec::new();
    for m in maps {
        if m.dims != first.dims {
            return Err(Error::shape("gradcam_aggregate", &first.dims, &m.dims));
        }
        prod.iter_mut().zip(&m.values).for_each(|(p, &v)| *p *= v as f64);
        taps.extend(m.provenance.taps.iter().cloned());
    }
    Ok(Heatmap {
        dims: first.dims,
        values: min_max_normalize(&prod).into_iter().map(|v| v as f32).collect(),
        provenance: Provenance {
            taps,
            ..first.provenance.clone()
        },
    })
}

pub fn provenance_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Write the map as an f32 VOLR volume plus a JSON provenance record beside it.
pub fn export_heatmap(h: &Heatmap, path: &Path) -> Result<()> {
    write_float_grid(path, &FloatGrid::new(h.dims, [1.0; 3], h.values.clone())?)?;
    let side = provenance_path(path);
    let text = serde_json::to_string_pretty(&h.provenance)? + "\n";
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_heatmap(path: &Path) -> Result<Heatmap> {
    let g = read_float_grid(path)?;
    let side = provenance_path(path);
    let provenance = match std::fs::read_to_string(&side) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Provenance::default(),
        Err(e) => return Err(Error::io(&side, e)),
    };
    Heatmap::new(g.dims, g.values, provenance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationConfig {
    /// Positives count only when their predicted probability exceeds this.
    pub probability_floor: f64,
    /// Per-side dilation of the heart box, as a fraction of the grid edge.
    pub box_margin_fraction: f64,
    pub required_fraction: f64,
    /// Taps aggregated into the map whose centre of mass is tested; empty means all stages.
    #[serde(default)]
    pub taps: Vec<String>,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            probability_floor: 0.9,
            box_margin_fraction: 0.25,
            required_fraction: 0.7,
            taps: Vec::new(),
        }
    }
}

/// Inputs for one test case of the localization statistic.
pub struct LocalizationCase<'a> {
    pub sample: &'a Sample,
    pub meta: &'a SampleMeta,
    pub phantom: &'a PhantomParams,
    pub probability: f64,
}

/// Heart box of a phantom in network coordinates, dilated by `margin` voxels per side.
pub fn network_heart_box(p: &PhantomParams, meta: &SampleMeta, edge: usize, margin: f64) -> ([f64; 3], [f64; 3]) {
    let (lo, hi) = p.heart_box();
    let lo = to_network_coords(lo, &meta.voi, edge);
    let hi = to_network_coords(hi, &meta.voi, edge);
    (lo.map(|v| v - margin), hi.map(|v| v + margin))
}

/// Fraction of confidently detected positives whose aggregated heatmap centre of mass
/// lies in the dilated heart box.
pub fn localization_statistic(
    model: &Model<f32>,
    cases: &[LocalizationCase<'_>],
    cfg: &LocalizationConfig,
) -> Result<LocalizationSummary> {
    let taps = if cfg.taps.is_empty() {
        (1..=model.spec.deepest_stage()).map(|k| format!("stage{k}")).collect()
    } else {
        cfg.taps.clone()
    };
    let edge = model.spec.input_spatial[0];
    let margin = cfg.box_margin_fraction * edge as f64;
    let (mut candidates, mut inside) = (0, 0);
    for c in cases {
        if c.sample.label != 1 || c.probability <= cfg.probability_floor {
            continue;
        }
        candidates += 1;
        let [_, _, d, h, w] = c.sample.tensor.dims5("localization")?;
        let maps = gradcam_maps(model, &c.sample.tensor, &taps)?;
        let heatmaps: Vec<Heatmap> = maps[0]
            .iter()
            .map(|m| m.heatmap([d, h, w], Provenance::default()))
            .collect();
        let agg = gradcam_aggregate(&heatmaps)?;
        let (lo, hi) = network_heart_box(c.phantom, c.meta, edge, margin);
        if let Some(com) = agg.center_of_mass() {
            if (0..3).all(|a| lo[a] <= com[a] && com[a] <= hi[a]) {
                inside += 1;
            }
        }
    }
    let fraction = (candidates > 0).then(|| inside as f64 / candidates as f64);
    Ok(LocalizationSummary {
        candidates,
        inside,
        fraction,
        required_fraction: cfg.required_fraction,
        probability_floor: cfg.probability_floor,
        box_margin_fraction: cfg.box_margin_fraction,
        taps,
        passed: fraction.map(|f| f >= cfg.required_fraction),
    })
}
