//! The simulator written as an SCM, for replay oracles.
//!
//! Noise `u_i = eps_i / noise_frac` is the standardized multiplicative
//! state noise, so the prior is standard normal. The force noise acts
//! before the physics and is not identifiable from `s'`; it is supplied as
//! context together with gravity: `theta = [gravity, eps_force]`.

use ndarray::Array2;

use super::{Evidence, StructuralModel};
use crate::env::{euler_step, force_for, CartState, EnvConfig, Transition, STATE_DIM};
use crate::error::{Error, Result};
use crate::numerics::{check_cols, Tensor2};

#[derive(Clone, Debug)]
pub struct CartPoleScm {
    pub cfg: EnvConfig,
}

impl CartPoleScm {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Context row for a recorded transition under `gravity`.
    pub fn theta_for(record: &Transition, gravity: f64) -> Vec<f64> {
        let force_eps = record.noise.as_ref().and_then(|n| n.first().copied()).unwrap_or(0.0);
        vec![gravity, force_eps]
    }

    /// Noise-free part of the step, one row per input.
    fn deterministic(&self, states: &Tensor2, actions: &Tensor2, theta: &Tensor2) -> Result<Tensor2> {
        let mut out = Array2::zeros((states.nrows(), STATE_DIM));
        for r in 0..states.nrows() {
            let s = CartState::from_slice(states.row(r).as_slice().expect("standard layout"))?;
            let cfg = EnvConfig { gravity: theta[[r, 0]], ..self.cfg.clone() };
            let force = force_for(actions[[r, 0]], &cfg) * (1.0 + theta[[r, 1]]);
            let det = euler_step(&s, force, &cfg).to_array();
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&det));
        }
        Ok(out)
    }

    fn check(&self, states: &Tensor2, actions: &Tensor2, theta: Option<&Tensor2>) -> Result<Tensor2> {
        check_cols("cartpole states", states, STATE_DIM)?;
        check_cols("cartpole actions", actions, 1)?;
        let theta = theta.ok_or_else(|| Error::Dimension("cartpole SCM needs theta = [gravity, eps_force]".into()))?;
        check_cols("cartpole theta", theta, 2)?;
        self.deterministic(&states.as_standard_layout().to_owned(), actions, theta)
    }
}

impl StructuralModel for CartPoleScm {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn mechanism(&self, states: &Tensor2, actions: &Tensor2, theta: Option<&Tensor2>, noise: &Tensor2) -> Result<Tensor2> {
        let det = self.check(states, actions, theta)?;
        check_cols("cartpole noise", noise, STATE_DIM)?;
        let k = self.cfg.noise_frac;
        Ok(&det * &noise.mapv(|u| 1.0 + k * u))
    }

    fn encode(&self, ev: &Evidence) -> Option<Result<Tensor2>> {
        let k = self.cfg.noise_frac;
        Some(self.check(&ev.states, &ev.actions, ev.theta.as_ref()).map(|det| {
            let mut u = Array2::zeros(det.raw_dim());
            ndarray::Zip::from(&mut u).and(&det).and(&ev.next).for_each(|u, &d, &y| {
                *u = if k > 0.0 && d != 0.0 { (y / d - 1.0) / k } else { 0.0 };
            });
            u
        }))
    }
}
