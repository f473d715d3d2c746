use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Spatial axes (0 = depth, 1 = height, 2 = width) that may be flipped, each with p = 1/2.
    pub flip_axes: Vec<usize>,
    /// Draw a uniform quarter-turn count in the axial (height, width) plane.
    pub rotation_quarter_turns: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_axes: vec![0, 1, 2],
            rotation_quarter_turns: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip_axes: Vec::new(),
            rotation_quarter_turns: false,
        }
    }
}

/// A concrete augmentation, separated from its random draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentDraw {
    pub flips: [bool; 3],
    pub quarter_turns: u8,
}

impl AugmentDraw {
    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut draw = Self::default();
        for axis in 0..3 {
            if cfg.flip_axes.contains(&axis) {
                draw.flips[axis] = rng.random_bool(0.5);
            }
        }
        if cfg.rotation_quarter_turns {
            draw.quarter_turns = rng.random_range(0..4u8);
        }
        draw
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

/// Apply `draw` to the trailing three (spatial) axes of `x`.
/// Quarter turns need square axial slices; on non-square slices odd turns are ignored.
pub fn apply_augment<F: Float>(x: &Tensor<F>, draw: AugmentDraw) -> Tensor<F> {
    let s = x.shape();
    assert!(s.len() >= 3, "augment needs at least three spatial axes");
    let [d, h, w] = [s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]];
    let vol = d * h * w;
    let turns = if h == w {
        draw.quarter_turns % 4
    } else {
        (draw.quarter_turns % 4) & 2
    };
    let src = x.data();
    let mut out = vec![F::zero(); src.len()];
    for plane in 0..src.len() / vol {
        let base = plane * vol;
        for z in 0..d {
            let sz = if draw.flips[0] { d - 1 - z } else { z };
            for y in 0..h {
                for xx in 0..w {
                    // output (y, xx) reads the rotated, then flipped, source position
                    let (ry, rx) = match turns {
                        0 => (y, xx),
                        1 => (xx, w - 1 - y),
                        2 => (h - 1 - y, w - 1 - xx),
                        _ => (h - 1 - xx, y),
                    };
                    let sy = if draw.flips[1] { h - 1 - ry } else { ry };
                    let sx = if draw.flips[2] { w - 1 - rx } else { rx };
                    out[base + (z * h + y) * w + xx] = src[base + (sz * h + sy) * w + sx];
                }
            }
        }
    }
    Tensor::from_vec(s, out).expect("shape preserved")
}

pub fn augment<F: Float, R: Rng>(x: &Tensor<F>, cfg: &AugmentConfig, rng: &mut R) -> Tensor<F> {
    let draw = AugmentDraw::sample(cfg, rng);
    if draw.is_identity() {
        return x.clone();
    }
    apply_augment(x, draw)
}
