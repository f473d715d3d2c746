//! Backbones and the two attention architectures built on them.
//!
//! SANet places residual-composition blocks in-line after the listed stages.
//! MLANet leaves the backbone untouched and hangs multiplicative blocks off
//! the listed stages; their pooled outputs are concatenated into the head.

mod backbone;
mod checkpoint;
mod spec;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionBlock;
use crate::autograd::{sigmoid, Var};
use crate::error::{Error, Result};
use crate::nn::{absorb, Builder, Forward, Linear, Mode, Outcome, ParamStore, StatStore};
use crate::tensor::{Float, Tensor};

pub use backbone::Backbone;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointInfo};
pub use spec::{AttentionKind, BackboneKind, BlockPlan, ModelSpec};

/// Forward-time switches that do not change the weights.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace every attention block's output by its trunk output.
    pub trunk_only: bool,
}

#[derive(Debug, Clone)]
pub struct Model<F: Float> {
    pub spec: ModelSpec,
    pub params: ParamStore<F>,
    pub stats: StatStore<F>,
    backbone: Backbone,
    head: Linear,
    /// (position, block), ascending by position.
    blocks: Vec<(usize, AttentionBlock)>,
}

impl<F: Float> Model<F> {
    /// Allocate and initialize every parameter from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut stats = StatStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: &mut params,
            stats: &mut stats,
            rng: &mut rng,
            momentum: spec.bn_momentum,
            eps: spec.bn_eps,
        };
        let deepest = spec.deepest_stage();
        let mla = spec.attention == AttentionKind::Mlanet;
        let backbone = Backbone::new(&mut b, &spec, deepest, !mla)?;
        let plan = spec.attention_plan();
        let head_in = if mla {
            plan.iter().map(|p| p.channels).sum()
        } else {
            backbone.stage_channels[deepest - 1]
        };
        let head = Linear::new(&mut b, "head", head_in, 1)?;
        let mut blocks = Vec::with_capacity(plan.len());
        for p in &plan {
            if p.clamped {
                info!(
                    "attention position {}: pooling depth clamped {} -> {} at stage extent {:?}",
                    p.position, p.preferred_depth, p.depth, p.spatial
                );
            }
            if p.bottom.iter().any(|&e| e < 2) {
                info!(
                    "attention position {}: stage extent {:?} admits only a {:?} mask bottom",
                    p.position, p.spatial, p.bottom
                );
            }
            let block_spec = spec.block_spec(p)?;
            block_spec.level_extents(p.spatial)?;
            blocks.push((
                p.position,
                AttentionBlock::new(&mut b, &format!("att{}", p.position), block_spec)?,
            ));
        }
        Ok(Self {
            spec,
            params,
            stats,
            backbone,
            head,
            blocks,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn blocks(&self) -> &[(usize, AttentionBlock)] {
        &self.blocks
    }

    pub fn block(&self, position: usize) -> Option<&AttentionBlock> {
        self.blocks.iter().find(|(p, _)| *p == position).map(|(_, b)| b)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn forward_ctx(&self, mode: Mode) -> Forward<'_, F> {
        Forward::new(&self.params, &self.stats, mode)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [d, h, w] = self.spec.input_spatial;
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [d, h, w] || shape[0] == 0 {
            return Err(Error::invalid(
                "forward_logit",
                format!("expected (N, 1, {d}, {h}, {w}), got {shape:?}"),
            ));
        }
        Ok(())
    }

    /// `(N, 1)` logits. Stage and attention taps are recorded on `f`.
    pub fn forward_logit(&self, f: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        self.forward_with(f, x, ForwardOptions::default())
    }

    pub fn forward_with(&self, f: &mut Forward<'_, F>, x: Var, opts: ForwardOptions) -> Result<Var> {
        self.check_input(f.tape.shape(x))?;
        let mut h = self.backbone.stem(f, x)?;
        let mla = self.spec.attention == AttentionKind::Mlanet;
        let mut pooled = Vec::new();
        for k in 1..=self.backbone.num_stages() {
            h = self.backbone.stage(f, k, h)?;
            if let Some(block) = self.block(k) {
                let out = if opts.trunk_only {
                    let t = block.trunk_forward(f, h)?;
                    f.tap(format!("att{k}.trunk"), t);
                    f.tap(format!("att{k}.attended"), t);
                    t
                } else {
                    let out = block.forward(f, h)?;
                    f.tap(format!("att{k}.trunk"), out.trunk);
                    f.tap(format!("att{k}.mask"), out.mask);
                    f.tap(format!("att{k}.attended"), out.attended);
                    out.attended
                };
                if mla {
                    pooled.push(f.tape.global_avg_pool(out)?);
                } else {
                    h = out;
                }
            }
            f.tap(format!("stage{k}"), h);
        }
        let features = if mla {
            f.tape.concat_channels(&pooled)?
        } else {
            let a = self.backbone.finish(f, h)?;
            f.tape.global_avg_pool(a)?
        };
        self.head.forward(f, features)
    }

    /// Eval-mode logits for a batch, as f64.
    pub fn predict_logits(&self, batch: &Tensor<F>) -> Result<Vec<f64>> {
        self.check_input(batch.shape())?;
        let mut f = self.forward_ctx(Mode::Eval);
        let x = f.input(batch.clone(), false);
        let y = self.forward_logit(&mut f, x)?;
        Ok(f.value(y).data().iter().map(|v| v.f64()).collect())
    }

    /// Eval-mode probabilities of the positive class.
    pub fn predict_prob(&self, batch: &Tensor<F>) -> Result<Vec<f64>> {
        Ok(self.predict_logits(batch)?.into_iter().map(sigmoid).collect())
    }

    /// Fold the results of a pass into the stored weights and statistics.
    pub fn absorb(&mut self, outcome: Outcome<F>) {
        absorb(&mut self.params, &mut self.stats, outcome);
    }

    /// Same architecture with weights converted to another precision.
    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
            stats: self.stats.cast(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            blocks: self.blocks.clone(),
        }
    }
}

pub fn build_backbone<F: Float>(spec: ModelSpec, seed: u64) -> Result<Model<F>> {
    expect_kind(&spec, AttentionKind::None)?;
    Model::build(spec, seed)
}

pub fn build_sanet<F: Float>(spec: ModelSpec, seed: u64) -> Result<Model<F>> {
    expect_kind(&spec, AttentionKind::Sanet)?;
    Model::build(spec, seed)
}

pub fn build_mlanet<F: Float>(spec: ModelSpec, seed: u64) -> Result<Model<F>> {
    expect_kind(&spec, AttentionKind::Mlanet)?;
    Model::build(spec, seed)
}

fn expect_kind(spec: &ModelSpec, kind: AttentionKind) -> Result<()> {
    if spec.attention != kind {
        return Err(Error::Config(format!(
            "expected attention {kind}, spec has {}",
            spec.attention
        )));
    }
    Ok(())
}
