use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::Conv3dSpec;
use crate::tensor::Float;

use super::forward::{Forward, Mode};
use super::params::{Builder, Init, ParamId, StatsId};

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub spec: Conv3dSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv3d {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, name: &str, spec: Conv3dSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.fan_in();
        let weight = b.param(
            format!("{name}.weight"),
            &spec.weight_shape(),
            Init::HeUniform { fan_in },
        )?;
        let bias = if spec.bias {
            Some(b.param(format!("{name}.bias"), &[spec.out_channels], Init::Constant(0.0))?)
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|id| f.param(id));
        f.tape.conv3d(x, &self.spec, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm3d {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, name: &str, channels: usize) -> Result<Self> {
        let gamma = b.param(format!("{name}.weight"), &[channels], Init::Constant(1.0))?;
        let beta = b.param(format!("{name}.bias"), &[channels], Init::Constant(0.0))?;
        let stats = b.running_stats(name.to_string(), channels);
        Ok(Self {
            channels,
            gamma,
            beta,
            stats,
        })
    }

    pub fn forward<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        let eps = f.stats().get(self.stats).eps;
        match f.mode() {
            Mode::Train => {
                let (y, batch) = f.tape.batchnorm_train(x, g, b, eps)?;
                f.record_stats(self.stats, batch);
                Ok(y)
            }
            Mode::Eval => {
                let stats = f.stats();
                let s = stats.get(self.stats);
                f.tape.batchnorm_eval(x, g, b, &s.mean, &s.var, eps)
            }
        }
    }

    /// BN followed by ReLU, the pre-activation prefix of every unit.
    pub fn forward_relu<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let y = self.forward(f, x)?;
        Ok(f.tape.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::Config(format!("{name}: linear layer with zero width")));
        }
        let weight = b.param(
            format!("{name}.weight"),
            &[out_features, in_features],
            Init::FanInUniform { fan_in: in_features },
        )?;
        let bias = b.param(format!("{name}.bias"), &[out_features], Init::Constant(0.0))?;
        Ok(Self {
            in_features,
            out_features,
            weight,
            bias,
        })
    }

    pub fn forward<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        f.tape.linear(x, w, Some(b))
    }
}

/// Pre-activation residual unit. The projection shortcut, when present, reads
/// the activated input `relu(bn1(x))`; otherwise the raw input is added back.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub kind: UnitKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    bns: Vec<BatchNorm3d>,
    convs: Vec<Conv3d>,
    shortcut: Option<Conv3d>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    /// Two 3³ convolutions.
    Basic,
    /// 1³ reduce, 3³, 1³ expand. The middle width is a free parameter.
    Bottleneck { mid: usize },
}

impl ResidualUnit {
    pub fn new<F: Float>(
        b: &mut Builder<'_, F>,
        name: &str,
        kind: UnitKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Result<Self> {
        let (bns, convs) = match kind {
            UnitKind::Basic => {
                let bns = vec![
                    BatchNorm3d::new(b, &format!("{name}.bn1"), in_channels)?,
                    BatchNorm3d::new(b, &format!("{name}.bn2"), out_channels)?,
                ];
                let convs = vec![
                    Conv3d::new(
                        b,
                        &format!("{name}.conv1"),
                        Conv3dSpec::cube(in_channels, out_channels, 3, stride, 1),
                    )?,
                    Conv3d::new(
                        b,
                        &format!("{name}.conv2"),
                        Conv3dSpec::cube(out_channels, out_channels, 3, 1, 1),
                    )?,
                ];
                (bns, convs)
            }
            UnitKind::Bottleneck { mid } => {
                let bns = vec![
                    BatchNorm3d::new(b, &format!("{name}.bn1"), in_channels)?,
                    BatchNorm3d::new(b, &format!("{name}.bn2"), mid)?,
                    BatchNorm3d::new(b, &format!("{name}.bn3"), mid)?,
                ];
                let convs = vec![
                    Conv3d::new(b, &format!("{name}.conv1"), Conv3dSpec::cube(in_channels, mid, 1, 1, 0))?,
                    Conv3d::new(b, &format!("{name}.conv2"), Conv3dSpec::cube(mid, mid, 3, stride, 1))?,
                    Conv3d::new(
                        b,
                        &format!("{name}.conv3"),
                        Conv3dSpec::cube(mid, out_channels, 1, 1, 0),
                    )?,
                ];
                (bns, convs)
            }
        };
        let shortcut = if stride != 1 || in_channels != out_channels {
            Some(Conv3d::new(
                b,
                &format!("{name}.shortcut"),
                Conv3dSpec::cube(in_channels, out_channels, 1, stride, 0),
            )?)
        } else {
            None
        };
        Ok(Self {
            kind,
            in_channels,
            out_channels,
            stride,
            bns,
            convs,
            shortcut,
        })
    }

    /// Channel-preserving bottleneck used inside attention blocks.
    pub fn attention_unit<F: Float>(b: &mut Builder<'_, F>, name: &str, channels: usize) -> Result<Self> {
        let mid = (channels / 4).max(1);
        Self::new(b, name, UnitKind::Bottleneck { mid }, channels, channels, 1)
    }

    pub fn forward<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let c = f.tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(Error::invalid(
                "residual_unit",
                format!("expected {} input channels, got {c}", self.in_channels),
            ));
        }
        let pre = self.bns[0].forward_relu(f, x)?;
        let identity = match &self.shortcut {
            Some(proj) => proj.forward(f, pre)?,
            None => x,
        };
        let mut h = self.convs[0].forward(f, pre)?;
        for (bn, conv) in self.bns[1..].iter().zip(&self.convs[1..]) {
            let a = bn.forward_relu(f, h)?;
            h = conv.forward(f, a)?;
        }
        f.tape.add(h, identity)
    }

    /// Handle of the unit's last convolution, whose zeroing reduces the unit to its shortcut.
    pub fn last_conv(&self) -> &Conv3d {
        self.convs.last().expect("units have at least one conv")
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv3d> {
        self.convs.iter().chain(self.shortcut.iter())
    }
}

/// Analytic parameter count of a unit, independent of any built instance.
pub fn unit_param_count(kind: UnitKind, cin: usize, cout: usize, stride: usize) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k * k;
    let bn = |c: usize| 2 * c;
    let body = match kind {
        UnitKind::Basic => bn(cin) + conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3),
        UnitKind::Bottleneck { mid } => {
            bn(cin) + conv(cin, mid, 1) + bn(mid) + conv(mid, mid, 3) + bn(mid) + conv(mid, cout, 1)
        }
    };
    let proj = if stride != 1 || cin != cout {
        conv(cin, cout, 1)
    } else {
        0
    };
    body + proj
}
