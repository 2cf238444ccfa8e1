//! Small differentiable-computation toolkit.
//!
//! Every layer hand-codes its backward pass; correctness is established by
//! central finite differences (see [`gradcheck`]). All arithmetic is `f64`.
//! Tensors are row-major `batch x features` matrices.

pub mod activation;
pub mod batchnorm;
pub mod checkpoint;
pub mod dense;
pub mod gradcheck;
pub mod loss;
pub mod lstm;
pub mod mlp;
pub mod monotonic;
pub mod optim;
pub mod param;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use activation::Activation;
pub use batchnorm::BatchNorm;
pub use dense::Linear;
pub use lstm::LstmCell;
pub use mlp::{Mlp, MlpSpec};
pub use monotonic::{MonotoneNoiseHead, MonotonicDense, MonotonicMlp};
pub use optim::{Adam, AdamConfig, Sgd};
pub use param::{Module, Param};

/// Row-major `rows x cols` matrix of `f64`.
pub type Tensor2 = Array2<f64>;

/// A differentiable layer with cached forward state.
pub trait Layer: Module {
    /// Forward pass; caches what `backward` needs. `train` selects
    /// batch statistics for normalization layers.
    fn forward(&mut self, x: &Tensor2, train: bool) -> Result<Tensor2>;

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: &Tensor2) -> Tensor2;
}

pub(crate) fn check_cols(what: &str, x: &Tensor2, expected: usize) -> Result<()> {
    if x.ncols() != expected {
        return Err(Error::Dimension(format!("{what}: expected {expected} columns, got {}", x.ncols())));
    }
    Ok(())
}

/// Builds a `rows x cols` tensor from row slices.
pub fn stack_rows<I, R>(rows: I, cols: usize) -> Tensor2
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        let r = r.as_ref();
        assert_eq!(r.len(), cols, "ragged rows");
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, cols), data).expect("shape matches data")
}
