//! Scalar losses. Each returns the batch-mean loss and its gradient with
//! respect to the prediction.

use ndarray::Array2;

use super::activation::{sigmoid, softplus};
use super::Tensor2;

/// Mean over all elements of `(pred - target)^2`.
pub fn mse(pred: &Tensor2, target: &Tensor2) -> (f64, Tensor2) {
    let n = pred.len().max(1) as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Huber loss with threshold `delta`, averaged over all elements.
pub fn huber(pred: &Tensor2, target: &Tensor2, delta: f64) -> (f64, Tensor2) {
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.raw_dim());
    ndarray::Zip::from(&mut grad).and(pred).and(target).for_each(|g, &p, &t| {
        let d = p - t;
        if d.abs() <= delta {
            loss += 0.5 * d * d;
            *g = d / n;
        } else {
            loss += delta * (d.abs() - 0.5 * delta);
            *g = delta * d.signum() / n;
        }
    });
    (loss / n, grad)
}

/// Mean of `log sigmoid(logit)` = mean log D; gradient w.r.t. the logits.
pub fn mean_log_sigmoid(logits: &Tensor2) -> (f64, Tensor2) {
    let n = logits.len().max(1) as f64;
    let loss = logits.iter().map(|&l| -softplus(-l)).sum::<f64>() / n;
    (loss, logits.mapv(|l| (1.0 - sigmoid(l)) / n))
}

/// Mean of `log(1 - sigmoid(logit))` = mean log(1 - D); gradient w.r.t. the logits.
pub fn mean_log_one_minus_sigmoid(logits: &Tensor2) -> (f64, Tensor2) {
    let n = logits.len().max(1) as f64;
    let loss = logits.iter().map(|&l| -softplus(l)).sum::<f64>() / n;
    (loss, logits.mapv(|l| -sigmoid(l) / n))
}

/// Diagonal Gaussian negative log-likelihood averaged over rows, with the
/// variance parametrized as `exp(log_var) + floor`. Returns gradients for
/// the mean and the raw log-variance.
pub fn gaussian_nll(mean: &Tensor2, log_var: &Tensor2, target: &Tensor2, floor: f64) -> (f64, Tensor2, Tensor2) {
    let rows = mean.nrows().max(1) as f64;
    let mut loss = 0.0;
    let mut d_mean = Array2::zeros(mean.raw_dim());
    let mut d_lv = Array2::zeros(mean.raw_dim());
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    for ((idx, &m), (&lv, &y)) in mean.indexed_iter().zip(log_var.iter().zip(target.iter())) {
        let e = lv.exp();
        let var = e + floor;
        let r = y - m;
        loss += 0.5 * (ln_2pi + var.ln() + r * r / var);
        d_mean[idx] = -r / var / rows;
        d_lv[idx] = 0.5 * (1.0 / var - r * r / (var * var)) * e / rows;
    }
    (loss / rows, d_mean, d_lv)
}
