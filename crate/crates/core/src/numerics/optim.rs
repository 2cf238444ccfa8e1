use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::param::Module;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam with bias-corrected moments. Moment buffers are created on the
/// first step, following the module's parameter visiting order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients. Fails without
    /// touching any parameter if a gradient is non-finite.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        ensure_finite_grads(module)?;
        if self.m.is_empty() {
            module.visit_params("", &mut |_, p| {
                self.m.push(Array2::zeros(p.value.raw_dim()));
                self.v.push(Array2::zeros(p.value.raw_dim()));
            });
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let step_size = lr * bc2.sqrt() / bc1;
        let (m, v) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_params("", &mut |name, p| {
            let (mi, vi) = (&mut m[idx], &mut v[idx]);
            assert_eq!(mi.dim(), p.value.dim(), "optimizer state does not match parameter {name}");
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(mi).and(vi).for_each(|w, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= step_size * *m / (v.sqrt() + eps);
            });
            idx += 1;
        });
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<M: Module + ?Sized>(&self, module: &mut M) -> Result<()> {
        ensure_finite_grads(module)?;
        let lr = self.lr;
        module.visit_params("", &mut |_, p| p.value.scaled_add(-lr, &p.grad));
        Ok(())
    }
}

pub fn ensure_finite_grads<M: Module + ?Sized>(module: &mut M) -> Result<()> {
    let mut bad: Option<String> = None;
    module.visit_params("", &mut |name, p| {
        if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::NonFiniteGradient(name)),
        None => Ok(()),
    }
}
