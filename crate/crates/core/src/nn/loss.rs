//! Losses returning their value and gradient w.r.t. the prediction.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};

/// Log arguments are clamped below at this value.
pub const LOG_EPS: f64 = 1e-12;

/// Mean of squared differences over every element.
pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("mse: {:?} vs {:?}", pred.dim(), target.dim())));
    }
    let n = pred.len().max(1) as f64;
    let diff = &pred - &target;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

/// Mean over rows of `-Σ y log p`. `probs` rows must sum to 1.
pub fn cross_entropy(probs: ArrayView2<f64>, onehot: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if probs.dim() != onehot.dim() {
        return Err(Error::shape(format!("cross entropy: {:?} vs {:?}", probs.dim(), onehot.dim())));
    }
    for row in probs.rows() {
        if (row.sum() - 1.0).abs() > 1e-6 || row.iter().any(|p| *p < 0.0) {
            return Err(Error::invalid("cross entropy needs probability rows"));
        }
    }
    let m = probs.nrows().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(probs.dim());
    Zip::from(&mut grad).and(&probs).and(&onehot).for_each(|g, &p, &y| {
        if y != 0.0 {
            value -= y * p.max(LOG_EPS).ln();
            if p > LOG_EPS {
                *g = -y / (p * m);
            }
        }
    });
    Ok((value / m, grad))
}

/// Bernoulli cross-entropy between tanh-range reconstructions and targets,
/// both mapped from [-1, 1] to [0, 1]; averaged over every element.
pub fn tanh_bernoulli_cross_entropy(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("cross entropy: {:?} vs {:?}", pred.dim(), target.dim())));
    }
    let n = pred.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad).and(&pred).and(&target).for_each(|g, &p, &t| {
        let q = ((p + 1.0) / 2.0).clamp(LOG_EPS, 1.0 - LOG_EPS);
        let t = ((t + 1.0) / 2.0).clamp(0.0, 1.0);
        value -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        *g = 0.5 * (-t / q + (1.0 - t) / (1.0 - q)) / n;
    });
    Ok((value / n, grad))
}

/// One-hot rows for class indices.
pub fn one_hot(classes: &[usize], n_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((classes.len(), n_classes));
    for (i, &c) in classes.iter().enumerate() {
        out[[i, c]] = 1.0;
    }
    out
}
