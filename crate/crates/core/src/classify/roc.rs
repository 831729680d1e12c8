//! ROC curves and trapezoidal AUC.

use serde::{Deserialize, Serialize};

use super::ClassifyError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Decreasing score thresholds; the first is `+inf` (nothing predicted positive).
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
    /// Per-fold AUCs when the curve pools cross-validated scores.
    pub fold_aucs: Vec<f64>,
    /// Population standard deviation of `fold_aucs`.
    pub auc_std: Option<f64>,
}

/// ROC curve sweeping every distinct score as a threshold (predict positive
/// when `score >= threshold`). Equal scores cross together, giving a
/// diagonal segment, so the AUC equals the Mann-Whitney statistic with ties
/// counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocResult, ClassifyError> {
    if scores.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch {
            features: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(k) = scores.iter().position(|s| s.is_nan()) {
        return Err(ClassifyError::NonFinite(k));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ClassifyError::UndefinedAuc { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut thresholds = vec![f64::INFINITY];
    let (mut fpr, mut tpr) = (vec![0.0], vec![0.0]);
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area in units of one positive-negative pair
    let mut area2: u128 = 0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let (tp0, fp0) = (tp, fp);
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        thresholds.push(s);
        fpr.push(fp as f64 / negatives as f64);
        tpr.push(tp as f64 / positives as f64);
    }
    let auc = area2 as f64 / (2 * positives as u128 * negatives as u128) as f64;
    Ok(RocResult {
        thresholds,
        fpr,
        tpr,
        auc,
        fold_aucs: Vec::new(),
        auc_std: None,
    })
}

/// AUC of using one feature directly as the score.
pub fn scalar_threshold_auc(values: &[f64], labels: &[bool]) -> Result<RocResult, ClassifyError> {
    roc_auc(values, labels)
}

#[cfg(test)]
/// Trapezoidal area under `(fpr, tpr)`.
fn trapezoid(fpr: &[f64], tpr: &[f64]) -> f64 {
    fpr.windows(2)
        .zip(tpr.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[1] + y[0]) / 2.0)
        .sum()
}
