//! ROC analysis. Glaucoma is the positive class; higher scores mean more
//! glaucomatous.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RocResult {
    pub auc: f64,
    /// Decreasing thresholds; the first is `+∞` (nothing predicted positive).
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

impl RocResult {
    /// Trapezoidal area under the stored curve.
    pub fn curve_area(&self) -> f64 {
        self.fpr
            .windows(2)
            .zip(self.tpr.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
            .sum()
    }
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "roc_auc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {l} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(
            "ROC needs both classes among the labels".into(),
        ));
    }
    Ok((pos, neg))
}

/// Groups of tied scores in decreasing score order, as
/// `(score, positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in order {
        let (p, n) = if labels[i] == 1 { (1, 0) } else { (0, 1) };
        match groups.last_mut() {
            // -0.0 and 0.0 tie, as do any equal values
            Some(g) if g.0 == scores[i] => {
                g.1 += p;
                g.2 += n;
            }
            _ => groups.push((scores[i], p, n)),
        }
    }
    groups
}

/// Mann–Whitney AUC (ties count one half) and the threshold-sweep curve.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocResult> {
    let (pos, neg) = check(scores, labels)?;
    let groups = tie_groups(scores, labels);
    // twice the U statistic, counted exactly in integers
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = neg as u64;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    for &(s, p, n) in &groups {
        neg_below -= n;
        twice_u += 2 * p * neg_below + p * n;
        tp += p;
        fp += n;
        thresholds.push(s);
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
    }
    Ok(RocResult {
        auc: twice_u as f64 / (2 * pos as u64 * neg as u64) as f64,
        thresholds,
        fpr,
        tpr,
    })
}

/// Sample mean and sample standard deviation (`n − 1` denominator; 0 for a
/// single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, num_traits::Float::sqrt(var))
}
