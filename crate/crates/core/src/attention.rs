//! Trunk/mask attention blocks and their two composition rules.
//!
//! A block maps `x` to `A(x)` with the same shape. The mask branch is an
//! encoder/decoder ending in a sigmoid, so every mask voxel lies in (0, 1).

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv3dSpec, PoolSpec};
use crate::nn::{BatchNorm3d, Builder, Conv3d, Forward, ParamId, ResidualUnit};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    /// `A = M * T`
    Multiplicative,
    /// `A = (1 + M) * T`
    Residual,
}

fn default_min_bottom() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionBlockSpec {
    pub channels: usize,
    pub pooling_depth: usize,
    pub trunk_units: usize,
    pub pre_units: usize,
    pub post_units: usize,
    pub composition: Composition,
    /// Smallest spatial extent the encoder may reach. 2 unless a clamp had to relax it.
    #[serde(default = "default_min_bottom")]
    pub min_bottom: usize,
}

impl AttentionBlockSpec {
    pub fn new(channels: usize, pooling_depth: usize, composition: Composition) -> Self {
        Self {
            channels,
            pooling_depth,
            trunk_units: 2,
            pre_units: 1,
            post_units: 1,
            composition,
            min_bottom: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("attention block needs at least one channel".into()));
        }
        if self.pooling_depth == 0 {
            return Err(Error::Config("attention pooling_depth must be >= 1".into()));
        }
        if self.min_bottom == 0 {
            return Err(Error::Config("attention min_bottom must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial extents at each encoder level, from the input (level 0) down to the bottom.
    pub fn level_extents(&self, spatial: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        self.validate()?;
        let factor = 1usize << self.pooling_depth;
        for &e in &spatial {
            if e % factor != 0 || e / factor < self.min_bottom {
                return Err(Error::Config(format!(
                    "attention block with pooling depth {} needs spatial extents divisible by {factor} \
                     with quotient >= {}, got {spatial:?}",
                    self.pooling_depth, self.min_bottom
                )));
            }
        }
        Ok((0..=self.pooling_depth).map(|k| spatial.map(|e| e >> k)).collect())
    }
}

/// Largest depth <= `preferred` that keeps every extent at or above 2 after pooling,
/// floored at 1. The second value reports whether the preferred depth was reduced.
pub fn clamp_depth(preferred: usize, spatial: [usize; 3]) -> (usize, bool) {
    let mut d = preferred.max(1);
    while d > 1 {
        let f = 1usize << d;
        if spatial.iter().all(|&e| e % f == 0 && e / f >= 2) {
            break;
        }
        d -= 1;
    }
    (d, d != preferred)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub attended: Var,
    pub mask: Var,
    pub trunk: Var,
}

fn same_shape<F: Float>(tape: &Tape<F>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

pub fn compose_multiplicative<F: Float>(tape: &mut Tape<F>, mask: Var, trunk: Var) -> Result<Var> {
    same_shape(tape, "compose_multiplicative", mask, trunk)?;
    tape.mul(mask, trunk)
}

pub fn compose_residual<F: Float>(tape: &mut Tape<F>, mask: Var, trunk: Var) -> Result<Var> {
    same_shape(tape, "compose_residual", mask, trunk)?;
    tape.residual_gate(mask, trunk)
}

#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub spec: AttentionBlockSpec,
    pub name: String,
    trunk: Vec<ResidualUnit>,
    down: Vec<Vec<ResidualUnit>>,
    up: Vec<Vec<ResidualUnit>>,
    head_bn1: BatchNorm3d,
    head_conv1: Conv3d,
    head_bn2: BatchNorm3d,
    head_conv2: Conv3d,
}

impl AttentionBlock {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, name: &str, spec: AttentionBlockSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let units = |b: &mut Builder<'_, F>, prefix: String, n: usize| -> Result<Vec<ResidualUnit>> {
            (0..n)
                .map(|i| ResidualUnit::attention_unit(b, &format!("{prefix}.unit{i}"), c))
                .collect()
        };
        let trunk = units(b, format!("{name}.trunk"), spec.trunk_units)?;
        let down = (1..=spec.pooling_depth)
            .map(|k| units(b, format!("{name}.mask.down{k}"), spec.pre_units))
            .collect::<Result<_>>()?;
        let up = (0..spec.pooling_depth)
            .rev()
            .map(|l| units(b, format!("{name}.mask.up{l}"), spec.post_units))
            .collect::<Result<_>>()?;
        let head = format!("{name}.mask.head");
        let head_bn1 = BatchNorm3d::new(b, &format!("{head}.bn1"), c)?;
        let head_conv1 = Conv3d::new(b, &format!("{head}.conv1"), Conv3dSpec::cube(c, c, 1, 1, 0))?;
        let head_bn2 = BatchNorm3d::new(b, &format!("{head}.bn2"), c)?;
        let head_conv2 = Conv3d::new(
            b,
            &format!("{head}.conv2"),
            Conv3dSpec::cube(c, c, 1, 1, 0).with_bias(true),
        )?;
        Ok(Self {
            spec,
            name: name.to_string(),
            trunk,
            down,
            up,
            head_bn1,
            head_conv1,
            head_bn2,
            head_conv2,
        })
    }

    /// Bias of the final mask convolution; the sigmoid input is offset by it.
    pub fn mask_bias(&self) -> ParamId {
        self.head_conv2.bias.expect("mask head conv carries a bias")
    }

    pub fn mask_out_weight(&self) -> ParamId {
        self.head_conv2.weight
    }

    /// Prefix shared by every mask-branch parameter name.
    pub fn mask_prefix(&self) -> String {
        format!("{}.mask.", self.name)
    }

    pub fn trunk_prefix(&self) -> String {
        format!("{}.trunk.", self.name)
    }

    pub fn trunk_units(&self) -> &[ResidualUnit] {
        &self.trunk
    }

    fn check_channels<F: Float>(&self, f: &Forward<'_, F>, x: Var, op: &'static str) -> Result<[usize; 3]> {
        let [_, c, d, h, w] = f.value(x).dims5(op)?;
        if c != self.spec.channels {
            return Err(Error::invalid(
                op,
                format!("block has {} channels, input has {c}", self.spec.channels),
            ));
        }
        Ok([d, h, w])
    }

    pub fn trunk_forward<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        self.check_channels(f, x, "trunk_forward")?;
        self.trunk.iter().try_fold(x, |h, u| u.forward(f, h))
    }

    /// Mask logits before the sigmoid.
    pub fn mask_logits<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let spatial = self.check_channels(f, x, "mask_forward")?;
        let levels = self.spec.level_extents(spatial)?;
        let pool = PoolSpec::new(2, 2);
        let mut skips = vec![x];
        let mut h = x;
        for units in &self.down {
            h = f.tape.maxpool3d(h, pool)?;
            for u in units {
                h = u.forward(f, h)?;
            }
            skips.push(h);
        }
        for (units, l) in self.up.iter().zip((0..self.spec.pooling_depth).rev()) {
            let up = f.tape.trilinear_upsample(h, levels[l])?;
            h = f.tape.add(up, skips[l])?;
            for u in units {
                h = u.forward(f, h)?;
            }
        }
        let a = self.head_bn1.forward_relu(f, h)?;
        let a = self.head_conv1.forward(f, a)?;
        let a = self.head_bn2.forward_relu(f, a)?;
        self.head_conv2.forward(f, a)
    }

    pub fn mask_forward<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let z = self.mask_logits(f, x)?;
        Ok(f.tape.sigmoid(z))
    }

    pub fn compose<F: Float>(&self, tape: &mut Tape<F>, mask: Var, trunk: Var) -> Result<Var> {
        match self.spec.composition {
            Composition::Multiplicative => compose_multiplicative(tape, mask, trunk),
            Composition::Residual => compose_residual(tape, mask, trunk),
        }
    }

    pub fn forward<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<AttentionOutput> {
        // validate geometry before any compute
        let spatial = self.check_channels(f, x, "attention_block_forward")?;
        self.spec.level_extents(spatial)?;
        let trunk = self.trunk_forward(f, x)?;
        let mask = self.mask_forward(f, x)?;
        let attended = self.compose(&mut f.tape, mask, trunk)?;
        Ok(AttentionOutput { attended, mask, trunk })
    }
}
