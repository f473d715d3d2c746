use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{auc, confusion_metrics, delong_ci, roc_curve, youden_threshold, ConfusionMetrics, RocPoint, ScoredSet};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// Thresholds may be infinite sentinels; JSON carries those as the strings "inf" / "-inf".
pub(crate) mod threshold_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("invalid threshold {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    /// Youden cut chosen on the evaluated scores themselves.
    YoudenOnEvaluatedSet,
    /// Fixed 0.5, used when the set has a single class.
    Fixed,
}

/// Fraction of confident positives whose heatmap mass centre falls in the expected region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub candidates: usize,
    pub inside: usize,
    pub fraction: Option<f64>,
    pub required_fraction: f64,
    pub probability_floor: f64,
    pub box_margin_fraction: f64,
    pub taps: Vec<String>,
    pub passed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pos: usize,
    pub n_neg: usize,
    pub auc: Option<f64>,
    pub delong_ci_95: Option<(f64, f64)>,
    pub delong_variance: Option<f64>,
    #[serde(with = "threshold_serde")]
    pub youden_threshold: f64,
    pub youden_j: Option<f64>,
    pub youden_warning: bool,
    pub threshold_source: ThresholdSource,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub accuracy: Option<f64>,
    pub confusion: ConfusionMetrics,
    pub roc: Vec<RocPoint>,
    #[serde(default)]
    pub localization: Option<LocalizationSummary>,
}

/// Top-level keys of the JSON report, in serialization order.
pub const REPORT_KEYS: [&str; 17] = [
    "n_pos",
    "n_neg",
    "auc",
    "delong_ci_95",
    "delong_variance",
    "youden_threshold",
    "youden_j",
    "youden_warning",
    "threshold_source",
    "sensitivity",
    "specificity",
    "ppv",
    "npv",
    "accuracy",
    "confusion",
    "roc",
    "localization",
];

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn evaluate_scores(set: &ScoredSet) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let (s, l) = (&set.scores, &set.labels);
    let (n_pos, n_neg) = (set.n_pos(), set.n_neg());
    let two_class = n_pos > 0 && n_neg > 0;
    let auc_v = if two_class { Some(auc(s, l)?) } else { None };
    let ci = if n_pos >= 2 && n_neg >= 2 {
        Some(delong_ci(s, l, 0.95)?)
    } else {
        None
    };
    let (threshold, youden, source) = if two_class {
        let y = youden_threshold(s, l)?;
        (y.threshold, Some(y), ThresholdSource::YoudenOnEvaluatedSet)
    } else {
        (0.5, None, ThresholdSource::Fixed)
    };
    let confusion = confusion_metrics(s, l, threshold)?;
    let roc = if two_class { roc_curve(s, l)? } else { Vec::new() };
    Ok(EvalReport {
        n_pos,
        n_neg,
        auc: auc_v,
        delong_ci_95: ci.map(|c| (c.lo, c.hi)),
        delong_variance: ci.map(|c| c.variance),
        youden_threshold: threshold,
        youden_j: youden.map(|y| y.j),
        youden_warning: youden.is_some_and(|y| y.warning),
        threshold_source: source,
        sensitivity: confusion.sensitivity,
        specificity: confusion.specificity,
        ppv: confusion.ppv,
        npv: confusion.npv,
        accuracy: confusion.accuracy,
        confusion,
        roc,
        localization: None,
    })
}

/// Eval-mode probabilities in fixed batches, in sample order.
pub fn predict_samples(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let items: Vec<Tensor<f32>> = chunk.iter().map(|s| s.tensor.clone()).collect();
        out.extend(model.predict_prob(&Tensor::stack_batch(&items)?)?);
    }
    Ok(out)
}

pub fn scored_set(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<ScoredSet> {
    let scores = predict_samples(model, samples, batch_size)?;
    ScoredSet::new(
        samples.iter().map(|s| s.id.clone()).collect(),
        scores,
        samples.iter().map(|s| s.label).collect(),
    )
}

pub fn evaluate_model(model: &Model<f32>, test: &[Sample], batch_size: usize) -> Result<(EvalReport, ScoredSet)> {
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let set = scored_set(model, test, batch_size)?;
    Ok((evaluate_scores(&set)?, set))
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    id: String,
    label: u8,
    score: f64,
}

pub fn write_scores(path: &Path, set: &ScoredSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for ((id, &label), &score) in set.ids.iter().zip(&set.labels).zip(&set.scores) {
        w.serialize(ScoreRow {
            id: id.clone(),
            label,
            score,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<ScoredSet> {
    let mut r = csv::Reader::from_path(path)?;
    let (mut ids, mut scores, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for row in r.deserialize() {
        let row: ScoreRow = row?;
        ids.push(row.id);
        labels.push(row.label);
        scores.push(row.score);
    }
    ScoredSet::new(ids, scores, labels)
}

pub fn write_roc_csv(path: &Path, roc: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fpr", "tpr", "threshold"])?;
    for p in roc {
        w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
