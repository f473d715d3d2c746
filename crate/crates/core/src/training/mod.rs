//! Training recipe: BCE on one logit, Adam with decoupled weight decay,
//! flip/quarter-turn augmentation, seeded epoch loop with best-AUC selection.

mod adam;
mod augment;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::bce_logit_term;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::evaluation::{auc, predict_samples};
use crate::models::{encode_checkpoint, CheckpointInfo, Model};
use crate::nn::Mode;
use crate::rng::derive_rng;
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{apply_augment, augment, AugmentConfig, AugmentDraw};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

fn d_lr() -> f64 {
    5e-3
}
fn d_batch() -> usize {
    4
}
fn d_wd() -> f64 {
    1e-5
}
fn d_epochs() -> usize {
    30
}
fn d_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "d_one")]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: d_lr(),
            batch_size: d_batch(),
            weight_decay: d_wd(),
            epochs: d_epochs(),
            seed: 0,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if let Some(a) = self.augment.flip_axes.iter().find(|&&a| a > 2) {
            return Err(Error::Config(format!("flip axis {a} outside 0..=2")));
        }
        let b = &self.adam;
        if !(0.0..1.0).contains(&b.beta1) || !(0.0..1.0).contains(&b.beta2) || b.eps <= 0.0 {
            return Err(Error::Config(format!("invalid Adam hyperparameters {b:?}")));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of probabilities, evaluated through the logit.
pub fn bce_loss(y_pred: &[f64], y: &[f64]) -> Result<f64> {
    if y_pred.len() != y.len() || y.is_empty() {
        return Err(Error::shape("bce_loss", &[y_pred.len()], &[y.len()]));
    }
    let mut total = 0.0;
    for (&p, &t) in y_pred.iter().zip(y) {
        if t != 0.0 && t != 1.0 {
            return Err(Error::Data(format!("label {t} is not in {{0, 1}}")));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Data(format!("probability {p} outside (0, 1)")));
        }
        total += bce_logit_term((p / (1.0 - p)).ln(), t);
    }
    Ok(total / y.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    seed: u64,
    config: TrainConfig,
}

impl TrainLog {
    /// One JSON object per line: a header, then one line per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&LogHeader {
            seed: self.seed,
            config: self.config.clone(),
        })?;
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: LogHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Data("training log is empty".into()))?,
        )?;
        let epochs = lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            seed: header.seed,
            config: header.config,
            epochs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Same log with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut c = self.clone();
        c.epochs.iter_mut().for_each(|e| e.wall_time_s = 0.0);
        c
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub log: TrainLog,
    /// Checkpoint bytes of the selected epoch (the initialization when no epoch ran).
    pub best_checkpoint: Vec<u8>,
    pub best_epoch: Option<usize>,
}

/// Batch boundaries for `n` samples. A trailing batch of one sample is merged into
/// its predecessor so train-mode batch norm never sees a single-sample batch.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| (s, (s + batch_size).min(n)))
        .collect();
    if batch_size > 1 && out.len() > 1 && out.last().is_some_and(|&(s, e)| e - s == 1) {
        let (_, e) = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").1 = e;
    }
    out
}

fn validation(model: &Model<f32>, val: &[Sample], batch_size: usize) -> Result<(f64, Option<f64>)> {
    let probs = predict_samples(model, val, batch_size)?;
    let labels: Vec<f64> = val.iter().map(|s| s.label as f64).collect();
    let classes: Vec<u8> = val.iter().map(|s| s.label).collect();
    // probabilities may saturate in f64; clamp only to keep the loss finite
    let clamped: Vec<f64> = probs.iter().map(|p| p.clamp(1e-15, 1.0 - 1e-15)).collect();
    let loss = bce_loss(&clamped, &labels)?;
    let auc = auc(&probs, &classes).ok();
    Ok((loss, auc))
}

fn checkpoint_info(model_seed: u64, cfg: &TrainConfig, train: &[Sample], epoch: Option<usize>) -> CheckpointInfo {
    CheckpointInfo {
        seed: model_seed,
        train_ids: train.iter().map(|s| s.id.clone()).collect(),
        extra: serde_json::json!({
            "train_config": cfg,
            "selected_epoch": epoch,
            "weight_decay": "decoupled",
        }),
    }
}

/// Train `model` in place. The returned checkpoint holds the epoch with the best
/// validation AUC (validation loss breaks the absence of an AUC); `model` ends at
/// the final epoch.
pub fn fit(
    model: &mut Model<f32>,
    model_seed: u64,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    if let Some(s) = train.iter().find(|s| val.iter().any(|v| v.id == s.id)) {
        return Err(Error::Leakage(vec![s.id.clone()]));
    }
    let mut log = TrainLog {
        seed: cfg.seed,
        config: cfg.clone(),
        epochs: Vec::new(),
    };
    let mut best_checkpoint = encode_checkpoint(model, &checkpoint_info(model_seed, cfg, train, None))?;
    let mut best: Option<(usize, f64, f64)> = None;
    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = derive_rng(cfg.seed, &[STREAM_SHUFFLE]);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, (s, e)) in batch_ranges(order.len(), cfg.batch_size).into_iter().enumerate() {
            let idx = &order[s..e];
            let items: Vec<Tensor<f32>> = idx
                .iter()
                .map(|&i| {
                    let mut rng = derive_rng(cfg.seed, &[STREAM_AUGMENT, epoch as u64, i as u64]);
                    augment(&train[i].tensor, &cfg.augment, &mut rng)
                })
                .collect();
            let labels: Vec<f64> = idx.iter().map(|&i| train[i].label as f64).collect();
            let batch = Tensor::stack_batch(&items)?;
            let outcome = {
                let mut f = model.forward_ctx(Mode::Train);
                let x = f.input(batch, false);
                let logits = model.forward_logit(&mut f, x)?;
                let loss = f.tape.bce_with_logits(logits, &labels)?;
                let value = f.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                loss_sum += value * labels.len() as f64;
                seen += labels.len();
                f.backward(loss)?;
                f.into_outcome()
            };
            model.params.zero_grad();
            model.absorb(outcome);
            adam_step(
                &mut model.params,
                &mut state,
                &cfg.adam,
                cfg.learning_rate,
                cfg.weight_decay,
            )?;
        }
        let train_loss = loss_sum / seen as f64;
        let (val_loss, val_auc) = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let (l, a) = validation(model, val, cfg.batch_size)?;
            (Some(l), a)
        } else {
            (None, None)
        };
        if let Some(vl) = val_loss {
            let key = val_auc.unwrap_or(f64::NEG_INFINITY);
            let better = match best {
                None => true,
                Some((_, bk, bl)) => key > bk || (key == bk && vl < bl),
            };
            if better {
                best = Some((epoch, key, vl));
                best_checkpoint = encode_checkpoint(model, &checkpoint_info(model_seed, cfg, train, Some(epoch)))?;
            }
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auc,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: train loss {train_loss:.4}, val loss {:?}, val auc {:?} ({:.1}s)",
            rec.val_loss, rec.val_auc, rec.wall_time_s
        );
        log.epochs.push(rec);
    }
    if cfg.epochs > 0 && val.iter().all(|s| s.label == val[0].label) {
        warn!("validation split has a single class; checkpoint selected by validation loss");
    }
    Ok(FitResult {
        log,
        best_checkpoint,
        best_epoch: best.map(|b| b.0),
    })
}
