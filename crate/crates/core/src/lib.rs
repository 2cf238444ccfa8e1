pub mod augment;
pub mod baselines;
pub mod cluster;
pub mod env;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod scm;
pub mod scm_train;
pub mod stats;

pub use error::{Error, Result};
