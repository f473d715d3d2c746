use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{clamp_depth, AttentionBlockSpec, Composition};
use crate::error::{Error, Result};
use crate::layers::{DEFAULT_EPS, DEFAULT_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "densenet121-3d")]
    DenseNet121,
    #[serde(rename = "resnet50-3d-basic")]
    ResNet50Basic,
    #[serde(rename = "resnet50-3d-bottleneck")]
    ResNet50Bottleneck,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [Self::DenseNet121, Self::ResNet50Basic, Self::ResNet50Bottleneck];

    pub fn name(self) -> &'static str {
        match self {
            Self::DenseNet121 => "densenet121-3d",
            Self::ResNet50Basic => "resnet50-3d-basic",
            Self::ResNet50Bottleneck => "resnet50-3d-bottleneck",
        }
    }

    pub fn default_stages(self) -> [usize; 4] {
        match self {
            Self::DenseNet121 => [6, 12, 24, 16],
            _ => [3, 4, 6, 3],
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    Sanet,
    Mlanet,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Sanet => "sanet",
            Self::Mlanet => "mlanet",
        }
    }

    pub fn composition(self) -> Option<Composition> {
        match self {
            Self::None => None,
            Self::Sanet => Some(Composition::Residual),
            Self::Mlanet => Some(Composition::Multiplicative),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "baseline" => Ok(Self::None),
            "sanet" => Ok(Self::Sanet),
            "mlanet" => Ok(Self::Mlanet),
            _ => Err(Error::Config(format!("unknown attention kind {s:?}"))),
        }
    }
}

fn default_bn_size() -> usize {
    4
}
fn default_trunk_units() -> usize {
    2
}
fn default_one() -> usize {
    1
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}
fn default_eps() -> f64 {
    DEFAULT_EPS
}

/// Complete architecture description. Weights are a function of this and a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneKind,
    pub attention: AttentionKind,
    pub attention_positions: Vec<usize>,
    pub growth_rate: usize,
    pub stage_config: [usize; 4],
    pub input_spatial: [usize; 3],
    pub width_multiplier: f64,
    #[serde(default = "default_bn_size")]
    pub bn_size: usize,
    #[serde(default = "default_trunk_units")]
    pub trunk_units: usize,
    #[serde(default = "default_one")]
    pub pre_units: usize,
    #[serde(default = "default_one")]
    pub post_units: usize,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

/// Placement of one attention block as derived from a spec.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockPlan {
    pub position: usize,
    pub channels: usize,
    pub spatial: [usize; 3],
    pub preferred_depth: usize,
    pub depth: usize,
    pub bottom: [usize; 3],
    pub clamped: bool,
}

impl ModelSpec {
    pub fn new(backbone: BackboneKind, attention: AttentionKind, positions: Vec<usize>) -> Self {
        Self {
            backbone,
            attention,
            attention_positions: positions,
            growth_rate: 32,
            stage_config: backbone.default_stages(),
            input_spatial: [128; 3],
            width_multiplier: 1.0,
            bn_size: 4,
            trunk_units: 2,
            pre_units: 1,
            post_units: 1,
            bn_momentum: DEFAULT_MOMENTUM,
            bn_eps: DEFAULT_EPS,
        }
    }

    /// Full-width network at 128³.
    pub fn full(backbone: BackboneKind, attention: AttentionKind, positions: Vec<usize>) -> Self {
        Self::new(backbone, attention, positions)
    }

    /// Workstation profile: 64³ input at quarter width.
    pub fn desk(backbone: BackboneKind, attention: AttentionKind, positions: Vec<usize>) -> Self {
        Self {
            input_spatial: [64; 3],
            width_multiplier: 0.25,
            ..Self::new(backbone, attention, positions)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "width_multiplier must be > 0, got {}",
                self.width_multiplier
            )));
        }
        if self.stage_config.contains(&0) {
            return Err(Error::Config(format!(
                "stage_config entries must be >= 1: {:?}",
                self.stage_config
            )));
        }
        if self.growth_rate == 0 || self.bn_size == 0 {
            return Err(Error::Config("growth_rate and bn_size must be >= 1".into()));
        }
        for &e in &self.input_spatial {
            if e < 32 || e % 32 != 0 {
                return Err(Error::Config(format!(
                    "input_spatial {:?} incompatible with the stride plan: each extent must be a multiple of 32",
                    self.input_spatial
                )));
            }
        }
        let mut seen = [false; 5];
        for &p in &self.attention_positions {
            if !(1..=4).contains(&p) {
                return Err(Error::Config(format!("attention position {p} outside 1..=4")));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config(format!("attention position {p} listed twice")));
            }
        }
        match (self.attention, self.attention_positions.is_empty()) {
            (AttentionKind::None, false) => Err(Error::Config(
                "attention_positions must be empty when attention is none".into(),
            )),
            (AttentionKind::Sanet | AttentionKind::Mlanet, true) => Err(Error::Config(format!(
                "{} requires at least one attention position",
                self.attention
            ))),
            _ => Ok(()),
        }
    }

    /// Positions in ascending order.
    pub fn positions(&self) -> Vec<usize> {
        let mut p = self.attention_positions.clone();
        p.sort_unstable();
        p
    }

    pub fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn growth(&self) -> usize {
        self.scaled(self.growth_rate)
    }

    /// Spatial extents of the four stage outputs.
    pub fn stage_spatial(&self) -> [[usize; 3]; 4] {
        let base = self.input_spatial.map(|e| e / 4);
        [0, 1, 2, 3].map(|k| base.map(|e| e >> k))
    }

    /// Channel count of each stage output.
    pub fn stage_channels(&self) -> [usize; 4] {
        match self.backbone {
            BackboneKind::DenseNet121 => {
                let g = self.growth();
                let mut c = self.scaled(64);
                let mut out = [0; 4];
                for (k, &layers) in self.stage_config.iter().enumerate() {
                    c += layers * g;
                    out[k] = c;
                    c /= 2;
                }
                out
            }
            BackboneKind::ResNet50Basic => [0, 1, 2, 3].map(|k| self.scaled(64) << k),
            BackboneKind::ResNet50Bottleneck => [0, 1, 2, 3].map(|k| 4 * (self.scaled(64) << k)),
        }
    }

    /// Depth and geometry of every attention block. The preferred depth at position k
    /// is 5 - k, reduced when the stage is too small to keep a 2³ bottom.
    pub fn attention_plan(&self) -> Vec<BlockPlan> {
        let spatial = self.stage_spatial();
        let channels = self.stage_channels();
        self.positions()
            .into_iter()
            .map(|p| {
                let preferred = 5 - p;
                let (depth, clamped) = clamp_depth(preferred, spatial[p - 1]);
                BlockPlan {
                    position: p,
                    channels: channels[p - 1],
                    spatial: spatial[p - 1],
                    preferred_depth: preferred,
                    depth,
                    bottom: spatial[p - 1].map(|e| e >> depth),
                    clamped,
                }
            })
            .collect()
    }

    pub(crate) fn block_spec(&self, plan: &BlockPlan) -> Result<AttentionBlockSpec> {
        let composition = self
            .attention
            .composition()
            .ok_or_else(|| Error::Config("attention block requested without attention kind".into()))?;
        let min_bottom = plan.bottom.iter().copied().min().unwrap_or(0).clamp(1, 2);
        Ok(AttentionBlockSpec {
            channels: plan.channels,
            pooling_depth: plan.depth,
            trunk_units: self.trunk_units,
            pre_units: self.pre_units,
            post_units: self.post_units,
            composition,
            min_bottom,
        })
    }

    /// Names of the taps a forward pass records.
    pub fn tap_names(&self) -> Vec<String> {
        let deepest = self.deepest_stage();
        let mut names: Vec<String> = (1..=deepest).map(|k| format!("stage{k}")).collect();
        for p in self.positions() {
            for part in ["trunk", "mask", "attended"] {
                names.push(format!("att{p}.{part}"));
            }
        }
        names
    }

    /// Last backbone stage that is executed.
    pub fn deepest_stage(&self) -> usize {
        match self.attention {
            AttentionKind::Mlanet => self.attention_positions.iter().copied().max().unwrap_or(4),
            _ => 4,
        }
    }

    pub fn positions_label(&self) -> String {
        let p: Vec<String> = self.positions().iter().map(|p| p.to_string()).collect();
        format!("[{}]", p.join(","))
    }
}
