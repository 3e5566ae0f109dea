//! Binary cross entropy with hard negative mining.
//!
//! Positive/negative box counts are heavily imbalanced, so instead of
//! weighting the cross entropy we keep every positive node and only the
//! `max(5*N_pos, 10)` hardest negatives (largest node loss, ties broken by
//! index). The total is divided by `max(N_pos, 1)`; gradient flows only to
//! positives and the selected negatives.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::scoring::ScoreVector;

/// Clamp bound for predicted probabilities inside the log.
pub const BCE_EPS: f64 = 1e-12;

/// Binary cross entropy `-x log(p) - (1-x) log(1-p)` with `p` clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce(label: u8, score: f64) -> f64 {
    let p = score.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`bce`] in the score, evaluated at the clamped probability.
pub fn bce_grad(label: u8, score: f64) -> f64 {
    let p = score.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if label == 1 {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// Negative quota for mining: `max(5 * n_pos, 10)`.
pub fn n_neg_quota(n_pos: usize) -> usize {
    (5 * n_pos).max(10)
}

/// Everything the mined loss decided, for inspection and for the backward
/// pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub node_losses: Vec<f64>,
    pub positive_indices: Vec<usize>,
    /// Selected hard negatives, sorted by (loss desc, index asc).
    pub selected_negative_indices: Vec<usize>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Per-node BCE, hard negative selection, and the mined total loss.
pub fn mined_loss(scores: &ScoreVector, labels: &[u8]) -> Result<LossBreakdown> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "mined_loss",
            expected: format!("{} labels", scores.len()),
            got: format!("{}", labels.len()),
        });
    }
    let node_losses: Vec<f64> = scores
        .values()
        .iter()
        .zip(labels)
        .map(|(&s, &x)| bce(x, s))
        .collect();

    let positive_indices: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &x)| x == 1)
        .map(|(i, _)| i)
        .collect();
    let mut negatives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &x)| x == 0)
        .map(|(i, _)| i)
        .collect();
    // stable sort: equal losses keep ascending index order
    negatives.sort_by(|&a, &b| node_losses[b].total_cmp(&node_losses[a]));

    let n_pos = positive_indices.len();
    let quota = n_neg_quota(n_pos).min(negatives.len());
    let selected_negative_indices: Vec<usize> = negatives[..quota].to_vec();

    let pos_sum: f64 = positive_indices.iter().map(|&i| node_losses[i]).sum();
    let neg_sum: f64 = selected_negative_indices
        .iter()
        .map(|&i| node_losses[i])
        .sum();
    let total = (pos_sum + neg_sum) / n_pos.max(1) as f64;

    Ok(LossBreakdown {
        total,
        node_losses,
        positive_indices,
        n_pos,
        n_neg: quota,
        selected_negative_indices,
    })
}

/// Gradient of the mined total in the scores. Unselected negatives get
/// exactly zero.
pub fn mined_loss_backward(
    breakdown: &LossBreakdown,
    scores: &ScoreVector,
    labels: &[u8],
) -> Array1<f64> {
    let mut d_scores = Array1::zeros(scores.len());
    let scale = 1.0 / breakdown.n_pos.max(1) as f64;
    for &i in breakdown
        .positive_indices
        .iter()
        .chain(&breakdown.selected_negative_indices)
    {
        d_scores[i] = scale * bce_grad(labels[i], scores.values()[i]);
    }
    d_scores
}
