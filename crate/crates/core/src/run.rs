//! Run orchestration: configuration, the run-directory layout and the train, eval,
//! compare, explain and ablation workflows.
//!
//! A run directory holds
//! `config` (TOML `RunConfig`), `log` (JSONL `TrainLog`), `checkpoint`,
//! `report.json`, `roc.csv`, `scores.csv` and `heatmaps/`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_split, preprocess, read_manifest, read_sidecar, read_volume, LoadedSplit, Manifest, PhantomParams,
    PreprocessConfig, Split, VoiConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    delong_paired_test, evaluate_model, read_scores, write_roc_csv, write_scores, EvalReport, PairedTest,
};
use crate::explain::{
    export_heatmap, gradcam_aggregate, gradcam_maps, localization_statistic, Heatmap, LocalizationCase,
    LocalizationConfig, Provenance,
};
use crate::models::{decode_checkpoint, read_checkpoint, AttentionKind, CheckpointInfo, Model, ModelSpec};
use crate::training::{fit, TrainConfig, TrainLog};

pub const CONFIG_FILE: &str = "config";
pub const LOG_FILE: &str = "log";
pub const CHECKPOINT_FILE: &str = "checkpoint";
pub const REPORT_FILE: &str = "report.json";
pub const ROC_FILE: &str = "roc.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const HEATMAP_DIR: &str = "heatmaps";

fn default_eval_batch() -> usize {
    4
}

/// Everything a run depends on. Saved into the run directory before execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Root seed for weight initialization and every training stream.
    pub seed: u64,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub voi: VoiConfig,
    #[serde(default)]
    pub localization: LocalizationConfig,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

impl RunConfig {
    pub fn new(model: ModelSpec, manifest: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            seed: 0,
            manifest,
            output_dir,
            model,
            train: TrainConfig::default(),
            voi: VoiConfig::default(),
            localization: LocalizationConfig::default(),
            eval_batch_size: default_eval_batch(),
        }
    }

    /// The training streams use the run seed.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let [d, h, w] = self.model.input_spatial;
        if d != h || h != w {
            return Err(Error::Config(format!(
                "preprocessing resamples to a cube; input_spatial {:?} is not cubic",
                self.model.input_spatial
            )));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            edge: self.model.input_spatial[0],
            voi: self.voi.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize run config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write through a temporary sibling so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub log: TrainLog,
    pub best_epoch: Option<usize>,
    pub checkpoint: Vec<u8>,
    pub voi_fallbacks: Vec<String>,
}

/// Fit the configured model on the manifest's train split, selecting on val.
pub fn train_run(cfg: &RunConfig) -> Result<TrainOutcome> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    cfg.write(&dir.join(CONFIG_FILE))?;
    let manifest = read_manifest(&cfg.manifest)?;
    let pre = cfg.preprocess();
    let train = load_split(&manifest, Split::Train, &pre)?;
    let val = load_split(&manifest, Split::Val, &pre)?;
    let mut fallbacks = train.fallback_ids();
    fallbacks.extend(val.fallback_ids());
    for id in &fallbacks {
        warn!("VOI fallback (full volume) for {id}");
    }
    let mut model: Model<f32> = Model::build(cfg.model.clone(), cfg.seed)?;
    info!(
        "{} / {} / positions {}: {} parameters, {} train, {} val",
        cfg.model.backbone,
        cfg.model.attention,
        cfg.model.positions_label(),
        model.param_count(),
        train.samples.len(),
        val.samples.len()
    );
    let result = fit(&mut model, cfg.seed, &train.samples, &val.samples, &cfg.train)?;
    result.log.write(&dir.join(LOG_FILE))?;
    write_atomic(&dir.join(CHECKPOINT_FILE), &result.best_checkpoint)?;
    Ok(TrainOutcome {
        run_dir: dir,
        log: result.log,
        best_epoch: result.best_epoch,
        checkpoint: result.best_checkpoint,
        voi_fallbacks: fallbacks,
    })
}

/// Reject evaluation ids that the checkpoint was trained on.
pub fn check_leakage(info: &CheckpointInfo, ids: &[String]) -> Result<()> {
    let trained: HashSet<&str> = info.train_ids.iter().map(String::as_str).collect();
    let leaked: Vec<String> = ids.iter().filter(|id| trained.contains(id.as_str())).cloned().collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(leaked))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub split: Split,
    pub batch_size: usize,
    pub voi: VoiConfig,
    /// `None` skips the localization statistic.
    pub localization: Option<LocalizationConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            batch_size: default_eval_batch(),
            voi: VoiConfig::default(),
            localization: Some(LocalizationConfig::default()),
        }
    }
}

fn phantom_sidecars(manifest: &Manifest, split: Split) -> Option<Vec<PhantomParams>> {
    manifest
        .split(split)
        .map(|r| read_sidecar(&manifest.resolve(r)).ok())
        .collect()
}

/// Evaluate a checkpoint on one manifest split and write the report, ROC and scores.
pub fn eval_run(checkpoint: &[u8], manifest: &Manifest, out_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let (model, info): (Model<f32>, _) = decode_checkpoint(checkpoint)?;
    check_leakage(&info, &manifest.ids(opts.split))?;
    let pre = PreprocessConfig {
        edge: model.spec.input_spatial[0],
        voi: opts.voi.clone(),
    };
    let split = load_split(manifest, opts.split, &pre)?;
    let (mut report, scores) = evaluate_model(&model, &split.samples, opts.batch_size)?;
    if let Some(loc) = &opts.localization {
        match phantom_sidecars(manifest, opts.split) {
            Some(sidecars) => {
                let summary = localize(&model, &split, &sidecars, &scores.scores, loc)?;
                info!(
                    "localization: {}/{} confident positives inside the dilated heart box (required fraction {})",
                    summary.inside, summary.candidates, summary.required_fraction
                );
                report.localization = Some(summary);
            }
            None => info!("localization skipped: split has no phantom sidecars"),
        }
    }
    create_dir(out_dir)?;
    write_atomic(&out_dir.join(REPORT_FILE), report.to_json()?.as_bytes())?;
    write_roc_csv(&out_dir.join(ROC_FILE), &report.roc)?;
    write_scores(&out_dir.join(SCORES_FILE), &scores)?;
    Ok(report)
}

fn localize(
    model: &Model<f32>,
    split: &LoadedSplit,
    sidecars: &[PhantomParams],
    probs: &[f64],
    cfg: &LocalizationConfig,
) -> Result<crate::evaluation::LocalizationSummary> {
    let cases: Vec<LocalizationCase<'_>> = split
        .samples
        .iter()
        .zip(&split.meta)
        .zip(sidecars)
        .zip(probs)
        .map(|(((sample, meta), phantom), &probability)| LocalizationCase {
            sample,
            meta,
            phantom,
            probability,
        })
        .collect();
    localization_statistic(model, &cases, cfg)
}

pub fn eval_checkpoint_file(
    checkpoint: &Path,
    manifest: &Path,
    out_dir: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let bytes = std::fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    eval_run(&bytes, &read_manifest(manifest)?, out_dir, opts)
}

/// DeLong paired comparison of two score files.
pub fn compare_scores(a: &Path, b: &Path) -> Result<PairedTest> {
    delong_paired_test(&read_scores(a)?, &read_scores(b)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainedMap {
    pub name: String,
    pub path: PathBuf,
    pub all_zero: bool,
}

/// Grad-CAM maps for a single volume. `taps` empty means every executed stage.
pub fn explain_volume(
    checkpoint: &Path,
    volume: &Path,
    taps: &[String],
    aggregate: bool,
    out_dir: &Path,
    voi: &VoiConfig,
) -> Result<Vec<ExplainedMap>> {
    let (model, _): (Model<f32>, _) = read_checkpoint(checkpoint)?;
    let taps: Vec<String> = if taps.is_empty() {
        (1..=model.spec.deepest_stage()).map(|k| format!("stage{k}")).collect()
    } else {
        taps.to_vec()
    };
    let edge = model.spec.input_spatial[0];
    let p = preprocess(&read_volume(volume)?, &PreprocessConfig { edge, voi: voi.clone() })?;
    if p.fallback {
        warn!("{}: lungs not found, explaining the full volume", volume.display());
    }
    let sample_id = volume
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let model_id = checkpoint.display().to_string();
    let maps = gradcam_maps(&model, &p.tensor, &taps)?;
    let dir = out_dir.join(HEATMAP_DIR);
    create_dir(&dir)?;
    let mut heatmaps: Vec<Heatmap> = Vec::new();
    let mut out = Vec::new();
    for cam in &maps[0] {
        let h = cam.heatmap(
            [edge; 3],
            Provenance {
                model_id: model_id.clone(),
                taps: vec![cam.tap.clone()],
                sample_id: sample_id.clone(),
            },
        );
        let path = dir.join(format!("{sample_id}.{}.volr", cam.tap));
        export_heatmap(&h, &path)?;
        out.push(ExplainedMap {
            name: cam.tap.clone(),
            path,
            all_zero: h.is_zero(),
        });
        heatmaps.push(h);
    }
    if aggregate {
        let agg = gradcam_aggregate(&heatmaps)?;
        let path = dir.join(format!("{sample_id}.aggregate.volr"));
        export_heatmap(&agg, &path)?;
        out.push(ExplainedMap {
            name: "aggregate".into(),
            path,
            all_zero: agg.is_zero(),
        });
    }
    Ok(out)
}

/// The attention subsets of the stacking ablation.
pub fn ablation_subsets(full_grid: bool) -> Vec<Vec<usize>> {
    if !full_grid {
        return vec![vec![], vec![1], vec![1, 2], vec![1, 2, 4], vec![1, 2, 3, 4]];
    }
    (0u32..16)
        .map(|mask| (1..=4).filter(|p| mask & (1 << (p - 1)) != 0).collect())
        .collect()
}

pub fn subset_label(positions: &[usize]) -> String {
    let p: Vec<String> = positions.iter().map(|p| p.to_string()).collect();
    format!("[{}]", p.join(","))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub positions: String,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub specificity: Option<f64>,
    pub sensitivity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
}

pub const ABLATION_FILE: &str = "ablation.csv";

/// Configuration of one ablation subset; the empty subset is the plain backbone.
pub fn subset_config(base: &RunConfig, positions: &[usize], out_dir: &Path) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.attention_positions = positions.to_vec();
    if positions.is_empty() {
        cfg.model.attention = AttentionKind::None;
    } else if cfg.model.attention == AttentionKind::None {
        cfg.model.attention = AttentionKind::Sanet;
    }
    let name = if positions.is_empty() {
        "none".to_string()
    } else {
        positions.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("-")
    };
    cfg.output_dir = out_dir.join(format!("positions-{name}"));
    cfg
}

/// Train and evaluate every subset with the shared seed and recipe, then write the table.
pub fn ablation_run(base: &RunConfig, subsets: &[Vec<usize>], out_dir: &Path) -> Result<Vec<AblationRow>> {
    create_dir(out_dir)?;
    let manifest = read_manifest(&base.manifest)?;
    let mut rows = Vec::with_capacity(subsets.len());
    for positions in subsets {
        let cfg = subset_config(base, positions, out_dir);
        info!("ablation subset {}", subset_label(positions));
        let trained = train_run(&cfg)?;
        let opts = EvalOptions {
            batch_size: cfg.eval_batch_size,
            voi: cfg.voi.clone(),
            localization: Some(cfg.localization.clone()),
            ..Default::default()
        };
        let r = eval_run(&trained.checkpoint, &manifest, &cfg.output_dir, &opts)?;
        rows.push(AblationRow {
            positions: subset_label(positions),
            auc: r.auc,
            accuracy: r.accuracy,
            specificity: r.specificity,
            sensitivity: r.sensitivity,
            ppv: r.ppv,
            npv: r.npv,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("ablation table: {e}")))?;
    write_atomic(&out_dir.join(ABLATION_FILE), &bytes)?;
    Ok(rows)
}
