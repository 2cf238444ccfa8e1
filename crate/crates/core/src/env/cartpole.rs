//! Stochastic cart-pole with a discretized action set.
//!
//! Dynamics follow the classic Euler-integrated cart-pole. The action level
//! `a ∈ [0, 1]` maps linearly to a horizontal force
//! `force_mag * (2a - 1)`, so `a = 0` and `a = 1` recover the original
//! push-left / push-right actions and `a = 0.5` applies no force.
//!
//! Noise is multiplicative: the applied force and every next-state
//! component are scaled by `(1 + eps)` with `eps ~ N(0, noise_frac^2)`,
//! drawn independently.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 4;
pub const X_THRESHOLD: f64 = 2.4;
pub const THETA_THRESHOLD_RAD: f64 = 12.0 * std::f64::consts::PI / 180.0;

/// Gravities of the five-environment benchmark (Jupiter, Earth, Mercury,
/// Neptune, Pluto), m/s².
pub const HD_GRAVITIES: [f64; 5] = [24.79, 9.8, 3.7, 11.15, 0.62];
pub const EARTH_GRAVITY: f64 = 9.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartState {
    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match *v {
            [x, x_dot, theta, theta_dot] => Ok(Self { x, x_dot, theta, theta_dot }),
            _ => Err(Error::Dimension(format!("cart state needs {STATE_DIM} components, got {}", v.len()))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Pole fallen past 12° or cart outside ±2.4 m.
    pub fn is_terminal(&self) -> bool {
        !self.is_finite() || self.x.abs() > X_THRESHOLD || self.theta.abs() > THETA_THRESHOLD_RAD
    }
}

pub fn is_terminal_slice(s: &[f64]) -> bool {
    CartState::from_slice(s).map_or(true, |c| c.is_terminal())
}

/// Reward for landing in `next`: +1 unless the step terminated the episode.
pub fn reward_for(next: &[f64]) -> f64 {
    if is_terminal_slice(next) {
        0.0
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub gravity: f64,
    pub noise_frac: f64,
    pub action_levels: usize,
    pub max_steps: usize,
    pub mass_cart: f64,
    pub mass_pole: f64,
    pub half_length: f64,
    pub force_mag: f64,
    pub tau: f64,
    /// Initial state components are drawn from U(-init_range, init_range).
    pub init_range: f64,
    pub rng_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            gravity: EARTH_GRAVITY,
            noise_frac: 0.05,
            action_levels: 11,
            max_steps: 20,
            mass_cart: 1.0,
            mass_pole: 0.1,
            half_length: 0.5,
            force_mag: 10.0,
            tau: 0.02,
            init_range: 0.05,
            rng_seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn with_gravity(mut self, g: f64) -> Self {
        self.gravity = g;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.gravity > 0.0 && self.gravity.is_finite()) {
            return bad("gravity must be positive");
        }
        if !(0.0..1.0).contains(&self.noise_frac) {
            return bad("noise_frac must lie in [0, 1)");
        }
        if self.action_levels < 2 {
            return bad("action_levels must be at least 2");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.mass_cart <= 0.0 || self.mass_pole <= 0.0 || self.half_length <= 0.0 || self.tau <= 0.0 {
            return bad("physical constants must be positive");
        }
        Ok(())
    }

    /// The discrete action set `{0, 1/(L-1), ..., 1}`.
    pub fn action_set(&self) -> Vec<f64> {
        action_levels(self.action_levels)
    }

    pub fn action_index(&self, a: f64) -> Option<usize> {
        action_index(self.action_levels, a)
    }
}

pub fn action_levels(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Index of `a` in the `n`-level action set, tolerant to float round-off.
pub fn action_index(n: usize, a: f64) -> Option<usize> {
    let pos = a * (n - 1) as f64;
    let idx = pos.round();
    ((pos - idx).abs() < 1e-9 && idx >= 0.0 && idx <= (n - 1) as f64).then_some(idx as usize)
}

/// One realization of the simulator noise: force scale and the four
/// next-state scales (each an `eps` in `value * (1 + eps)`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub force: f64,
    pub state: [f64; STATE_DIM],
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(noise_frac: f64, rng: &mut R) -> Self {
        if noise_frac == 0.0 {
            return Self::default();
        }
        let n = Normal::new(0.0, noise_frac).expect("valid noise scale");
        Self { force: n.sample(rng), state: std::array::from_fn(|_| n.sample(rng)) }
    }

    pub fn to_vec(self) -> Vec<f64> {
        let mut v = vec![self.force];
        v.extend_from_slice(&self.state);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != STATE_DIM + 1 {
            return Err(Error::Dimension(format!("noise record needs {} values", STATE_DIM + 1)));
        }
        Ok(Self { force: v[0], state: [v[1], v[2], v[3], v[4]] })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: CartState,
    pub reward: f64,
    pub done: bool,
}

/// Noise-free Euler step with an explicit force (N).
pub fn euler_step(s: &CartState, force: f64, cfg: &EnvConfig) -> CartState {
    let total_mass = cfg.mass_cart + cfg.mass_pole;
    let pole_mass_length = cfg.mass_pole * cfg.half_length;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pole_mass_length * s.theta_dot * s.theta_dot * sin) / total_mass;
    let theta_acc =
        (cfg.gravity * sin - cos * temp) / (cfg.half_length * (4.0 / 3.0 - cfg.mass_pole * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
    CartState {
        x: s.x + cfg.tau * s.x_dot,
        x_dot: s.x_dot + cfg.tau * x_acc,
        theta: s.theta + cfg.tau * s.theta_dot,
        theta_dot: s.theta_dot + cfg.tau * theta_acc,
    }
}

pub fn force_for(action: f64, cfg: &EnvConfig) -> f64 {
    cfg.force_mag * (2.0 * action - 1.0)
}

/// Deterministic step given a noise realization. `action` may be any
/// level in `[0, 1]`; membership in the discrete set is checked by
/// [`step`].
pub fn step_with_noise(state: &CartState, action: f64, cfg: &EnvConfig, noise: &NoiseDraw) -> Result<StepOutcome> {
    if state.is_terminal() {
        return Err(Error::EpisodeFinished);
    }
    let force = force_for(action, cfg) * (1.0 + noise.force);
    let det = euler_step(state, force, cfg).to_array();
    let next = CartState::from_slice(&std::array::from_fn::<f64, STATE_DIM, _>(|i| det[i] * (1.0 + noise.state[i])))?;
    let done = next.is_terminal();
    Ok(StepOutcome { next, reward: if done { 0.0 } else { 1.0 }, done })
}

/// One stochastic step. Returns the outcome and the noise that produced it.
pub fn step<R: Rng + ?Sized>(
    state: &CartState,
    action: f64,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<(StepOutcome, NoiseDraw)> {
    if cfg.action_index(action).is_none() {
        return Err(Error::Precondition(format!("action {action} is not one of the {} levels", cfg.action_levels)));
    }
    if state.is_terminal() {
        return Err(Error::EpisodeFinished);
    }
    let noise = NoiseDraw::sample(cfg.noise_frac, rng);
    Ok((step_with_noise(state, action, cfg, &noise)?, noise))
}

pub fn initial_state<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> CartState {
    let r = cfg.init_range;
    let mut draw = || if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 };
    CartState { x: draw(), x_dot: draw(), theta: draw(), theta_dot: draw() }
}
