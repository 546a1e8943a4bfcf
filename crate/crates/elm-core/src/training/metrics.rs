//! Evaluation metrics: rank-based AUC with tie handling, TPR at a target
//! FPR, RMSE, and accuracy.

use crate::error::{Error, Result};

/// Rank-based AUC (Mann-Whitney). Tied positive/negative scores count 0.5.
/// Errors when only one class is present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("auc: scores/labels length mismatch".into()));
    }
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "auc undefined: {n_pos} positives, {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("non-finite score"));

    // Average ranks across tie groups, then sum the positive ranks.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    let n_neg = n_neg as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// True-positive rate at the operating point with the largest FPR <= target.
/// Tied scores move through the ROC staircase as one group.
pub fn tpr_at_fpr(scores: &[f64], labels: &[u8], fpr_target: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("tpr_at_fpr: scores/labels length mismatch".into()));
    }
    if !(0.0..1.0).contains(&fpr_target) {
        return Err(Error::Invalid(format!("tpr_at_fpr: fpr {fpr_target} outside (0, 1)")));
    }
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("tpr_at_fpr undefined for single-class input".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("non-finite score"));

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut best_tpr = 0.0; // threshold above every score: fpr = 0, tpr = 0
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let fpr = fp as f64 / n_neg as f64;
        if fpr <= fpr_target {
            best_tpr = tp as f64 / n_pos as f64;
        } else {
            break;
        }
        i = j + 1;
    }
    Ok(best_tpr)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return 0.0;
    }
    let ss: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    (ss / pred.len() as f64).sqrt()
}

pub fn accuracy(pred_class: &[usize], labels: &[u32]) -> f64 {
    debug_assert_eq!(pred_class.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let ok = pred_class.iter().zip(labels.iter()).filter(|(p, l)| **p == **l as usize).count();
    ok as f64 / labels.len() as f64
}
