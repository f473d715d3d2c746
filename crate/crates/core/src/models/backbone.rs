use crate::autograd::Var;
use crate::error::Result;
use crate::layers::{Conv3dSpec, PoolSpec};
use crate::nn::{BatchNorm3d, Builder, Conv3d, Forward, ResidualUnit, UnitKind};
use crate::tensor::Float;

use super::spec::{BackboneKind, ModelSpec};

#[derive(Debug, Clone)]
struct Stem {
    conv: Conv3d,
    bn: BatchNorm3d,
}

impl Stem {
    fn new<F: Float>(b: &mut Builder<'_, F>, out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv3d::new(b, "backbone.stem.conv", Conv3dSpec::cube(1, out, 7, 2, 3))?,
            bn: BatchNorm3d::new(b, "backbone.stem.bn", out)?,
        })
    }

    /// conv 7³/2 -> BN -> ReLU -> maxpool 3³/2: a 4x spatial reduction.
    fn forward<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let h = self.conv.forward(f, x)?;
        let h = self.bn.forward_relu(f, h)?;
        f.tape.maxpool3d(h, PoolSpec::padded(3, 2, 1))
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    bn1: BatchNorm3d,
    conv1: Conv3d,
    bn2: BatchNorm3d,
    conv2: Conv3d,
}

#[derive(Debug, Clone)]
struct Transition {
    bn: BatchNorm3d,
    conv: Conv3d,
}

#[derive(Debug, Clone)]
enum Stage {
    Dense(Vec<DenseLayer>),
    Residual(Vec<ResidualUnit>),
}

/// The convolutional trunk of a classifier, split at its four stage outputs.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub kind: BackboneKind,
    stem: Stem,
    stages: Vec<Stage>,
    /// `transitions[k]` runs between stage k+1 and stage k+2 (DenseNet only).
    transitions: Vec<Transition>,
    final_bn: Option<BatchNorm3d>,
    pub stage_channels: Vec<usize>,
}

impl Backbone {
    /// Build stages 1..=`stages`; the closing BN is added when `final_bn` is set.
    pub fn new<F: Float>(b: &mut Builder<'_, F>, spec: &ModelSpec, stages: usize, final_bn: bool) -> Result<Self> {
        let init = spec.scaled(64);
        let stem = Stem::new(b, init)?;
        let channels = spec.stage_channels();
        let mut built = Vec::with_capacity(stages);
        let mut transitions = Vec::new();
        match spec.backbone {
            BackboneKind::DenseNet121 => {
                let g = spec.growth();
                let inner = spec.bn_size * g;
                let mut c = init;
                for k in 0..stages {
                    if k > 0 {
                        let name = format!("backbone.transition{k}");
                        let out = c / 2;
                        transitions.push(Transition {
                            bn: BatchNorm3d::new(b, &format!("{name}.bn"), c)?,
                            conv: Conv3d::new(b, &format!("{name}.conv"), Conv3dSpec::cube(c, out, 1, 1, 0))?,
                        });
                        c = out;
                    }
                    let mut layers = Vec::with_capacity(spec.stage_config[k]);
                    for l in 0..spec.stage_config[k] {
                        let name = format!("backbone.block{}.layer{l}", k + 1);
                        layers.push(DenseLayer {
                            bn1: BatchNorm3d::new(b, &format!("{name}.bn1"), c)?,
                            conv1: Conv3d::new(b, &format!("{name}.conv1"), Conv3dSpec::cube(c, inner, 1, 1, 0))?,
                            bn2: BatchNorm3d::new(b, &format!("{name}.bn2"), inner)?,
                            conv2: Conv3d::new(b, &format!("{name}.conv2"), Conv3dSpec::cube(inner, g, 3, 1, 1))?,
                        });
                        c += g;
                    }
                    debug_assert_eq!(c, channels[k]);
                    built.push(Stage::Dense(layers));
                }
            }
            BackboneKind::ResNet50Basic | BackboneKind::ResNet50Bottleneck => {
                let mut c = init;
                for k in 0..stages {
                    let planes = init << k;
                    let kind = match spec.backbone {
                        BackboneKind::ResNet50Basic => UnitKind::Basic,
                        _ => UnitKind::Bottleneck { mid: planes },
                    };
                    let out = channels[k];
                    let mut units = Vec::with_capacity(spec.stage_config[k]);
                    for u in 0..spec.stage_config[k] {
                        let stride = if u == 0 && k > 0 { 2 } else { 1 };
                        let name = format!("backbone.stage{}.unit{u}", k + 1);
                        units.push(ResidualUnit::new(b, &name, kind, c, out, stride)?);
                        c = out;
                    }
                    built.push(Stage::Residual(units));
                }
            }
        }
        let final_bn = if final_bn {
            Some(BatchNorm3d::new(b, "backbone.final_bn", channels[stages - 1])?)
        } else {
            None
        };
        Ok(Self {
            kind: spec.backbone,
            stem,
            stages: built,
            transitions,
            final_bn,
            stage_channels: channels[..stages].to_vec(),
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stem<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        self.stem.forward(f, x)
    }

    /// Run stage `k` (1-based) on the output of stage `k - 1` (or the stem for k = 1).
    pub fn stage<F: Float>(&self, f: &mut Forward<'_, F>, k: usize, x: Var) -> Result<Var> {
        match &self.stages[k - 1] {
            Stage::Dense(layers) => {
                let mut h = x;
                if k > 1 {
                    let t = &self.transitions[k - 2];
                    let a = t.bn.forward_relu(f, h)?;
                    let a = t.conv.forward(f, a)?;
                    h = f.tape.avgpool3d(a, PoolSpec::new(2, 2))?;
                }
                for layer in layers {
                    let a = layer.bn1.forward_relu(f, h)?;
                    let a = layer.conv1.forward(f, a)?;
                    let a = layer.bn2.forward_relu(f, a)?;
                    let new = layer.conv2.forward(f, a)?;
                    h = f.tape.concat_channels(&[h, new])?;
                }
                Ok(h)
            }
            Stage::Residual(units) => units.iter().try_fold(x, |h, u| u.forward(f, h)),
        }
    }

    /// Closing BN -> ReLU on the last stage output, if the backbone has one.
    pub fn finish<F: Float>(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        match &self.final_bn {
            Some(bn) => bn.forward_relu(f, x),
            None => Ok(x),
        }
    }
}
