//! Detection metrics: ROC AUC and thresholded accuracy.

use crate::error::{Error, Result};

/// Area under the ROC curve by the rank-sum method.
///
/// Equals the probability that a uniformly random positive scores higher
/// than a uniformly random negative, with score ties counting 1/2. Tied
/// scores receive the average of the ranks they span, which makes the
/// rank-sum identity exact rather than an approximation.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));

    // 1-based average ranks over tied groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Brute-force AUC over all positive/negative pairs. Quadratic; used as an
/// independent check of [`roc_auc`].
pub fn roc_auc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::SingleClass);
    }
    Ok(wins / pairs as f64)
}

/// ROC curve points as (fpr, tpr) pairs, from (0, 0) to (1, 1), with one
/// point per distinct score value (thresholds swept from high to low).
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j + 1;
    }
    Ok(points)
}

/// Fraction of examples classified correctly when predicting adversarial
/// at `score >= threshold`.
pub fn detection_accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, &y)| (**s >= threshold) as u8 == y)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}
