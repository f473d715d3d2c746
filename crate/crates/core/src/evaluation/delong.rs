use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{class_counts, midranks, ScoredSet};
use crate::error::{Error, Result};

/// DeLong structural components: `v10[i]` for each positive, `v01[j]` for each negative.
#[derive(Debug, Clone, PartialEq)]
pub struct DelongComponents {
    pub auc: f64,
    pub v10: Vec<f64>,
    pub v01: Vec<f64>,
}

fn sample_var(x: &[f64]) -> f64 {
    sample_cov(x, x)
}

fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
}

impl DelongComponents {
    pub fn variance(&self) -> f64 {
        sample_var(&self.v10) / self.v10.len() as f64 + sample_var(&self.v01) / self.v01.len() as f64
    }
}

/// Components via midranks: `v10[i] = (R_i - R_i^pos) / n_neg`, `v01[j] = 1 - (R_j - R_j^neg) / n_pos`,
/// where `R` ranks within the pooled sample and `R^pos`, `R^neg` within each class.
pub fn delong(scores: &[f64], labels: &[u8]) -> Result<DelongComponents> {
    if scores.len() != labels.len() {
        return Err(Error::shape("delong", &[scores.len()], &[labels.len()]));
    }
    let (m, n) = class_counts(labels)?;
    if m < 2 || n < 2 {
        return Err(Error::Data(format!(
            "DeLong variance needs >= 2 samples per class, got {m} positives and {n} negatives"
        )));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    let pooled: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let all = midranks(&pooled);
    let rp = midranks(&pos);
    let rn = midranks(&neg);
    let v10: Vec<f64> = (0..m).map(|i| (all[i] - rp[i]) / n as f64).collect();
    let v01: Vec<f64> = (0..n).map(|j| 1.0 - (all[m + j] - rn[j]) / m as f64).collect();
    let auc = v10.iter().sum::<f64>() / m as f64;
    Ok(DelongComponents { auc, v10, v01 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelongCi {
    pub auc: f64,
    pub variance: f64,
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Normal-approximation interval around the AUC, clipped to [0, 1].
pub fn delong_ci(scores: &[f64], labels: &[u8], level: f64) -> Result<DelongCi> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let c = delong(scores, labels)?;
    let variance = c.variance().max(0.0);
    let z = std_normal().inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let half = z * variance.sqrt();
    Ok(DelongCi {
        auc: c.auc,
        variance,
        level,
        lo: (c.auc - half).clamp(0.0, 1.0),
        hi: (c.auc + half).clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub auc_a: f64,
    pub auc_b: f64,
    pub difference: f64,
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided test of equal AUC for two score sets on the same cases.
/// `b` is aligned to `a` by id; ids and labels must agree exactly.
pub fn delong_paired_test(a: &ScoredSet, b: &ScoredSet) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "unpaired score sets: {} vs {} cases",
            a.len(),
            b.len()
        )));
    }
    let index: HashMap<&str, usize> = b.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    if index.len() != b.len() {
        return Err(Error::Data("duplicate ids in score set".into()));
    }
    let mut b_scores = Vec::with_capacity(a.len());
    for (id, &label) in a.ids.iter().zip(&a.labels) {
        let &j = index
            .get(id.as_str())
            .ok_or_else(|| Error::Data(format!("unpaired score sets: id {id:?} missing from second set")))?;
        if b.labels[j] != label {
            return Err(Error::Data(format!("unpaired score sets: labels differ for id {id:?}")));
        }
        b_scores.push(b.scores[j]);
    }
    let ca = delong(&a.scores, &a.labels)?;
    let cb = delong(&b_scores, &a.labels)?;
    let (m, n) = (ca.v10.len() as f64, ca.v01.len() as f64);
    let cov = sample_cov(&ca.v10, &cb.v10) / m + sample_cov(&ca.v01, &cb.v01) / n;
    let variance = (ca.variance() + cb.variance() - 2.0 * cov).max(0.0);
    let difference = ca.auc - cb.auc;
    let (z, p_value) = if variance > 0.0 {
        let z = difference / variance.sqrt();
        (z, (2.0 * (1.0 - std_normal().cdf(z.abs()))).clamp(0.0, 1.0))
    } else if difference == 0.0 {
        (0.0, 1.0)
    } else {
        (f64::INFINITY.copysign(difference), 0.0)
    };
    Ok(PairedTest {
        auc_a: ca.auc,
        auc_b: cb.auc,
        difference,
        variance,
        z,
        p_value,
    })
}
