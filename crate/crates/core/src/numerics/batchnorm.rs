use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::param::{join, Module, Param};
use super::{check_cols, Layer, Tensor2};
use crate::error::Result;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over the batch axis.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates as `running = 0.9 * running + 0.1 * batch`. Inference
/// mode is the fixed affine map defined by the running estimates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    #[serde(skip)]
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
enum BnCache {
    Train { x_hat: Tensor2, inv_std: Array1<f64> },
    Eval { x_hat: Tensor2, inv_std: Array1<f64> },
}

impl BatchNorm {
    pub fn new(n: usize) -> Self {
        Self {
            gamma: Param::filled(1, n, 1.0),
            beta: Param::zeros(1, n),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
            cache: None,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.value.ncols()
    }

    /// Inference-mode map; does not touch running statistics.
    pub fn infer(&self, x: &Tensor2) -> Tensor2 {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let scale = &self.gamma.value.row(0) * &inv_std;
        let shift = &self.beta.value.row(0) - &(&self.running_mean * &scale);
        x * &scale + &shift
    }
}

impl Module for BatchNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: &Tensor2, train: bool) -> Result<Tensor2> {
        check_cols("batchnorm", x, self.width())?;
        if !train {
            let inv_std = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let x_hat = (x - &self.running_mean) * &inv_std;
            self.cache = Some(BnCache::Eval { x_hat, inv_std });
            return Ok(self.infer(x));
        }
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let x_hat = &centered * &inv_std;
        let y = &x_hat * &self.gamma.value.row(0) + &self.beta.value.row(0);
        self.running_mean = &self.running_mean * BN_MOMENTUM + &mean * (1.0 - BN_MOMENTUM);
        self.running_var = &self.running_var * BN_MOMENTUM + &var * (1.0 - BN_MOMENTUM);
        self.cache = Some(BnCache::Train { x_hat, inv_std });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor2) -> Tensor2 {
        let gamma = self.gamma.value.row(0).to_owned();
        match self.cache.as_ref().expect("batchnorm backward before forward") {
            BnCache::Eval { x_hat, inv_std } => {
                self.gamma.grad += &(grad * x_hat).sum_axis(Axis(0)).insert_axis(Axis(0));
                self.beta.grad += &grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                grad * &(&gamma * inv_std)
            }
            BnCache::Train { x_hat, inv_std } => {
                let n = grad.nrows() as f64;
                self.gamma.grad += &(grad * x_hat).sum_axis(Axis(0)).insert_axis(Axis(0));
                self.beta.grad += &grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dx_hat = grad * &gamma;
                let sum_dx_hat = dx_hat.sum_axis(Axis(0));
                let sum_dx_hat_xhat = (&dx_hat * x_hat).sum_axis(Axis(0));
                let mut dx: Array2<f64> = &dx_hat * n - &sum_dx_hat - &(x_hat * &sum_dx_hat_xhat);
                dx *= &(inv_std / n);
                dx
            }
        }
    }
}
