//! Empirical risks and trace statistics.

use nalgebra::DVector;
use thiserror::Error;

use crate::dataset::LabeledSet;
use crate::engine::predict_label;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty test set")]
    EmptyTestSet,
    #[error("{predictions} predictions for {truths} labels")]
    LengthMismatch { predictions: usize, truths: usize },
}

/// `(1/N) * sum |y - y_hat| / 2` for `+1/-1` labels.
pub fn empirical_risk_node(predictions: &[f64], truths: &[f64]) -> Result<f64, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), truths: truths.len() });
    }
    let wrong = predictions.iter().zip(truths).filter(|(p, t)| p != t).count();
    risk_from_errors(wrong, truths.len())
}

/// Misclassified count over all nodes divided by the total test size.
pub fn empirical_risk_global(per_node: &[(&[f64], &[f64])]) -> Result<f64, MetricsError> {
    let mut errors = Vec::with_capacity(per_node.len());
    let mut sizes = Vec::with_capacity(per_node.len());
    for (pred, truth) in per_node {
        if pred.len() != truth.len() {
            return Err(MetricsError::LengthMismatch { predictions: pred.len(), truths: truth.len() });
        }
        errors.push(pred.iter().zip(truth.iter()).filter(|(p, t)| p != t).count());
        sizes.push(truth.len());
    }
    global_risk_from_errors(&errors, &sizes)
}

pub fn risk_from_errors(errors: usize, size: usize) -> Result<f64, MetricsError> {
    if size == 0 {
        return Err(MetricsError::EmptyTestSet);
    }
    Ok(errors as f64 / size as f64)
}

pub fn global_risk_from_errors(errors: &[usize], sizes: &[usize]) -> Result<f64, MetricsError> {
    let total: usize = sizes.iter().sum();
    if total == 0 || sizes.iter().any(|&n| n == 0) {
        return Err(MetricsError::EmptyTestSet);
    }
    Ok(errors.iter().sum::<usize>() as f64 / total as f64)
}

/// Predicted labels of `r = [w; b]` on every row of `set`.
pub fn predictions(r: &DVector<f64>, set: &LabeledSet) -> Vec<f64> {
    let p = set.dim();
    let w = r.rows(0, p);
    let scores = &set.features * w;
    scores.iter().map(|&s| predict_label(s + r[p])).collect()
}

/// Number of rows of `set` that `r` labels wrongly.
pub fn misclassified(r: &DVector<f64>, set: &LabeledSet) -> usize {
    predictions(r, set).iter().zip(&set.labels).filter(|(p, t)| p != t).count()
}

/// Trailing mean over the last `min(window, t + 1)` points. A zero window
/// is treated as 1.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (t, &x) in series.iter().enumerate() {
        sum += x;
        if t >= window {
            sum -= series[t - window];
        }
        out.push(sum / (t + 1).min(window) as f64);
    }
    out
}

/// Largest pairwise `|r_v - r_u|_2`.
pub fn consensus_gap(rs: &[DVector<f64>]) -> f64 {
    let mut gap: f64 = 0.0;
    for (i, a) in rs.iter().enumerate() {
        for b in &rs[i + 1..] {
            gap = gap.max((a - b).norm());
        }
    }
    gap
}
