use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A trainable tensor together with its accumulated gradient.
///
/// Only the value is serialized; the gradient is rebuilt as zeros on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "Array2<f64>", into = "Array2<f64>")]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(Array2::from_elem((rows, cols), v))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

impl From<Array2<f64>> for Param {
    fn from(value: Array2<f64>) -> Self {
        Param::new(value)
    }
}

impl From<Param> for Array2<f64> {
    fn from(p: Param) -> Self {
        p.value
    }
}

/// Anything that owns trainable parameters.
///
/// `visit_params` must walk parameters in the same order on every call; the
/// optimizers key their moment buffers on that order.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    /// Copies parameter values (not gradients) from `other`, which must share
    /// the architecture.
    fn copy_params_from(&mut self, other: &mut Self)
    where
        Self: Sized,
    {
        let mut values = Vec::new();
        other.visit_params("", &mut |_, p| values.push(p.value.clone()));
        let mut it = values.into_iter();
        self.visit_params("", &mut |name, p| {
            let v = it.next().unwrap_or_else(|| panic!("architecture mismatch at {name}"));
            assert_eq!(v.dim(), p.value.dim(), "architecture mismatch at {name}");
            p.value.assign(&v);
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
