use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::param::{join, Module, Param};
use super::{check_cols, Layer, Tensor2};
use crate::error::Result;

/// Fully connected layer `y = x W + b`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    #[serde(skip)]
    input: Option<Tensor2>,
}

impl Linear {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng));
        let b = Array2::from_shape_fn((1, fan_out), |_| dist.sample(rng));
        Self::from_parts(w, b)
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array2<f64>) -> Self {
        assert_eq!(bias.nrows(), 1);
        assert_eq!(weight.ncols(), bias.ncols());
        Self { weight: Param::new(weight), bias: Param::new(bias), input: None }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_parts(Array2::eye(n), Array2::zeros((1, n)))
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn infer(&self, x: &Tensor2) -> Tensor2 {
        x.dot(&self.weight.value) + &self.bias.value
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor2, _train: bool) -> Result<Tensor2> {
        check_cols("linear", x, self.fan_in())?;
        let y = self.infer(x);
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor2) -> Tensor2 {
        let x = self.input.as_ref().expect("linear backward before forward");
        self.weight.grad += &x.t().dot(grad);
        self.bias.grad += &grad.sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.dot(&self.weight.value.t())
    }
}
