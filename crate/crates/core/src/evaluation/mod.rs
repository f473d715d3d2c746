//! ROC analysis, DeLong statistics, Youden thresholding and confusion metrics.
//!
//! A sample is called positive when `score >= threshold`.

mod delong;
mod report;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use delong::{delong, delong_ci, delong_paired_test, DelongCi, DelongComponents, PairedTest};
pub use report::{
    evaluate_model, evaluate_scores, predict_samples, read_scores, scored_set, write_roc_csv, write_scores, EvalReport,
    LocalizationSummary, ThresholdSource, REPORT_KEYS,
};

/// Scores with their labels and sample ids, in parallel order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredSet {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(ids: Vec<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::Data(format!(
                "scored set has {} ids, {} scores, {} labels",
                ids.len(),
                scores.len(),
                labels.len()
            )));
        }
        check_labels(&labels)?;
        if let Some(s) = scores.iter().find(|s| s.is_nan()) {
            return Err(Error::Data(format!("score {s} is not a number")));
        }
        Ok(Self { ids, scores, labels })
    }

    /// Anonymous set with ids "0", "1", ...
    pub fn from_scores(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Self::new(ids, scores, labels)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }
}

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&l| l > 1) {
        Some(l) => Err(Error::Data(format!("label {l} is not in {{0, 1}}"))),
        None => Ok(()),
    }
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    check_labels(labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Average (1-based) ranks with ties sharing the mean of their positions.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC: P(score_pos > score_neg) + P(tie) / 2.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let (pos, neg) = class_counts(labels)?;
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    #[serde(with = "report::threshold_serde")]
    pub threshold: f64,
}

/// ROC points from `(0, 0)` at threshold +inf down to `(1, 1)` at the lowest score,
/// one point per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_curve", &[scores.len()], &[labels.len()]));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(points)
}

pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YoudenResult {
    #[serde(with = "report::threshold_serde")]
    pub threshold: f64,
    pub j: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Set when no cut achieves J > 0.
    pub warning: bool,
}

/// Candidate cuts: +inf, -inf and the midpoint between each pair of adjacent distinct scores.
pub fn youden_candidates(scores: &[f64]) -> Vec<f64> {
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut c = vec![f64::NEG_INFINITY];
    c.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    c.push(f64::INFINITY);
    c
}

fn better(a: &YoudenResult, b: &YoudenResult) -> bool {
    match a.j.partial_cmp(&b.j) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) | None => false,
        Some(Ordering::Equal) => {
            a.sensitivity > b.sensitivity || (a.sensitivity == b.sensitivity && a.threshold < b.threshold)
        }
    }
}

/// Threshold maximizing J = sensitivity + specificity - 1. Ties prefer higher
/// sensitivity, then the lower threshold.
pub fn youden_threshold(scores: &[f64], labels: &[u8]) -> Result<YoudenResult> {
    if scores.len() != labels.len() {
        return Err(Error::shape("youden_threshold", &[scores.len()], &[labels.len()]));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let candidates = youden_candidates(scores);
    // sweep ascending: before cut c, every sample below c is called negative
    let (mut below_pos, mut below_neg) = (0usize, 0usize);
    let mut k = 0;
    let mut best: Option<YoudenResult> = None;
    for &t in &candidates {
        while k < order.len() && scores[order[k]] < t {
            if labels[order[k]] == 1 {
                below_pos += 1;
            } else {
                below_neg += 1;
            }
            k += 1;
        }
        let sensitivity = (pos - below_pos) as f64 / pos as f64;
        let specificity = below_neg as f64 / neg as f64;
        let cand = YoudenResult {
            threshold: t,
            j: sensitivity + specificity - 1.0,
            sensitivity,
            specificity,
            warning: false,
        };
        if best.as_ref().is_none_or(|b| better(&cand, b)) {
            best = Some(cand);
        }
    }
    let mut best = best.expect("candidate list is never empty");
    best.warning = best.j <= 0.0;
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionMetrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        Self {
            tp,
            fp,
            tn,
            fn_,
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            ppv: ratio(tp, tp + fp),
            npv: ratio(tn, tn + fn_),
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
        }
    }
}

pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::shape("confusion_metrics", &[scores.len()], &[labels.len()]));
    }
    check_labels(labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(ConfusionMetrics::from_counts(tp, fp, tn, fn_))
}
