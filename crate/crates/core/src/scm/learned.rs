//! Neural SCM: a generator strictly monotone in per-dimension noise, an
//! optional encoder for fast abduction, and (for the personalized variant)
//! an LSTM that summarizes a short history into the context `theta`.
//!
//! The networks work in standardized coordinates. The generator predicts
//! the standardized increment, so `s' = s + mean_d + std_d * G(...)`.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Evidence, StructuralModel};
use crate::env::Transition;
use crate::error::{Error, Result};
use crate::numerics::monotonic::MonotoneNoiseHead;
use crate::numerics::param::join;
use crate::numerics::{check_cols, Layer, LstmCell, Mlp, MlpSpec, Module, Param, Tensor2};
use crate::rng::Rng64;

/// Per-column affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    /// Column means and standard deviations; near-constant columns keep
    /// unit scale.
    pub fn fit(x: &Tensor2) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Precondition("cannot standardize an empty batch".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std = x.std_axis(Axis(0), 0.0).iter().map(|&s| if s > 1e-8 { s } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Tensor2) -> Tensor2 {
        let mut z = x.clone();
        for mut row in z.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        z
    }

    pub fn invert(&self, z: &Tensor2) -> Tensor2 {
        let mut x = z.clone();
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        x
    }
}

/// Standardizers for states, actions and one-step increments `s' - s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub state: Standardizer,
    pub action: Standardizer,
    pub delta: Standardizer,
}

impl Normalization {
    pub fn fit(states: &Tensor2, actions: &Tensor2, next: &Tensor2) -> Result<Self> {
        Ok(Self {
            state: Standardizer::fit(states)?,
            action: Standardizer::fit(actions)?,
            delta: Standardizer::fit(&(next - states))?,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self { state: Standardizer::identity(d), action: Standardizer::identity(1), delta: Standardizer::identity(d) }
    }

    /// `[s_n, a_n]`, optionally followed by `theta`.
    pub fn conditioning(&self, states: &Tensor2, actions: &Tensor2, theta: Option<&Tensor2>) -> Tensor2 {
        let mut parts = vec![self.state.apply(states), self.action.apply(actions)];
        if let Some(t) = theta {
            parts.push(t.clone());
        }
        hcat(&parts)
    }

    pub fn delta_of(&self, states: &Tensor2, next: &Tensor2) -> Tensor2 {
        self.delta.apply(&(next - states))
    }
}

pub(crate) fn hcat(parts: &[Tensor2]) -> Tensor2 {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).expect("equal row counts")
}

/// Generator width settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub hidden: Vec<usize>,
    /// Hidden units per dimension in the monotone noise path.
    pub noise_units: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self { hidden: vec![200, 400, 600, 600], noise_units: 8 }
    }
}

/// `G(cond, u)`: a trunk maps the conditioning to the location, scale and
/// offsets of a [`MonotoneNoiseHead`]; the head consumes `u`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Generator {
    pub trunk: Mlp,
    pub head: MonotoneNoiseHead,
}

/// `softplus^-1(1)`, so the initial noise scale is about one.
const RHO_INIT: f64 = 0.541_324_854_612_918_1;

impl Generator {
    pub fn new<R: Rng + ?Sized>(cond_dim: usize, state_dim: usize, spec: &GeneratorSpec, rng: &mut R) -> Result<Self> {
        let k = spec.noise_units;
        if k == 0 {
            return Err(Error::InvalidConfig("noise_units must be positive".into()));
        }
        let mut trunk = Mlp::new(MlpSpec::new(cond_dim, &spec.hidden, state_dim * (2 + k)), rng)?;
        trunk.output_layer_mut().bias.value.slice_mut(s![.., state_dim..2 * state_dim]).fill(RHO_INIT);
        Ok(Self { trunk, head: MonotoneNoiseHead::new(state_dim, k, rng) })
    }

    pub fn state_dim(&self) -> usize {
        self.head.dims()
    }

    pub fn cond_dim(&self) -> usize {
        self.trunk.input_size()
    }

    fn split(&self, t: &Tensor2) -> (Tensor2, Tensor2, Tensor2) {
        let d = self.state_dim();
        (t.slice(s![.., ..d]).to_owned(), t.slice(s![.., d..2 * d]).to_owned(), t.slice(s![.., 2 * d..]).to_owned())
    }

    pub fn infer(&self, cond: &Tensor2, u: &Tensor2) -> Result<Tensor2> {
        check_cols("generator conditioning", cond, self.cond_dim())?;
        let (mu, rho, beta) = self.split(&self.trunk.infer(cond));
        self.head.infer(u, &mu, &rho, &beta)
    }

    pub fn forward(&mut self, cond: &Tensor2, u: &Tensor2, train: bool) -> Result<Tensor2> {
        check_cols("generator conditioning", cond, self.cond_dim())?;
        let t = self.trunk.forward(cond, train)?;
        let (mu, rho, beta) = self.split(&t);
        self.head.forward(u, &mu, &rho, &beta)
    }

    /// Returns `(d cond, d u)`.
    pub fn backward(&mut self, grad: &Tensor2) -> (Tensor2, Tensor2) {
        let g = self.head.backward(grad);
        let dt = hcat(&[g.mu, g.rho, g.beta]);
        (self.trunk.backward(&dt), g.u)
    }
}

impl Module for Generator {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.trunk.visit_params(&join(prefix, "trunk"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

/// What the encoder sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInput {
    /// `s'` alone (plus `theta` when present).
    NextState,
    /// The whole triplet: `[s_n, a_n, theta, delta_n]`.
    #[default]
    Transition,
}

/// `E`: observed evidence to `(s_hat_n, a_hat_n, u_hat)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub net: Mlp,
    pub input: EncoderInput,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        input: EncoderInput,
        state_dim: usize,
        theta_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let in_dim = match input {
            EncoderInput::NextState => state_dim + theta_dim,
            EncoderInput::Transition => 2 * state_dim + 1 + theta_dim,
        };
        Ok(Self { net: Mlp::new(MlpSpec::new(in_dim, hidden, 2 * state_dim + 1), rng)?, input })
    }

    /// Encoder features from standardized pieces.
    pub fn features(&self, cond: &Tensor2, next_n: &Tensor2, delta_n: &Tensor2, theta: Option<&Tensor2>) -> Tensor2 {
        match self.input {
            EncoderInput::Transition => hcat(&[cond.clone(), delta_n.clone()]),
            EncoderInput::NextState => match theta {
                Some(t) => hcat(&[next_n.clone(), t.clone()]),
                None => next_n.clone(),
            },
        }
    }
}

impl Module for Encoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_params(prefix, f);
    }
}

/// Learned SCM. `theta_dim == 0` is the population model; otherwise every
/// query carries a context vector (a subject embedding or a cluster
/// centroid).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScmModel {
    pub norm: Normalization,
    pub generator: Generator,
    pub encoder: Option<Encoder>,
    /// History summarizer for the personalized model.
    pub theta_net: Option<LstmCell>,
    pub tau: usize,
}

impl ScmModel {
    pub fn uses_theta(&self) -> bool {
        self.theta_dim() > 0
    }

    /// Builds the LSTM input sequence for a batch of windows: one `n x (d+1)`
    /// tensor per step.
    pub fn window_sequence(&self, windows: &[&[Transition]]) -> Result<Vec<Tensor2>> {
        let d = self.state_dim();
        let mut seq = Vec::with_capacity(self.tau);
        for t in 0..self.tau {
            let mut s = Array2::zeros((windows.len(), d));
            let mut a = Array2::zeros((windows.len(), 1));
            for (r, w) in windows.iter().enumerate() {
                if w.len() != self.tau {
                    return Err(Error::Dimension(format!("window length {} != tau {}", w.len(), self.tau)));
                }
                let rec = &w[t];
                if rec.state.len() != d {
                    return Err(Error::Dimension(format!("expected {d}-dim states")));
                }
                s.row_mut(r).assign(&ndarray::ArrayView1::from(&rec.state[..]));
                a[[r, 0]] = rec.action;
            }
            seq.push(self.norm.conditioning(&s, &a, None));
        }
        Ok(seq)
    }

    /// `theta_hat` for each window (rows follow `windows`).
    pub fn estimate_theta_batch(&self, windows: &[&[Transition]]) -> Result<Tensor2> {
        let net = self.theta_net.as_ref().ok_or_else(|| Error::Precondition("model has no theta network".into()))?;
        net.encode(&self.window_sequence(windows)?)
    }

    pub fn estimate_theta(&self, window: &[Transition]) -> Result<Vec<f64>> {
        Ok(self.estimate_theta_batch(&[window])?.row(0).to_vec())
    }
}

impl StructuralModel for ScmModel {
    fn state_dim(&self) -> usize {
        self.generator.state_dim()
    }

    fn theta_dim(&self) -> usize {
        self.generator.cond_dim() - self.state_dim() - 1
    }

    fn mechanism(&self, states: &Tensor2, actions: &Tensor2, theta: Option<&Tensor2>, noise: &Tensor2) -> Result<Tensor2> {
        check_cols("states", states, self.state_dim())?;
        check_cols("actions", actions, 1)?;
        let cond = self.norm.conditioning(states, actions, theta);
        let delta_n = self.generator.infer(&cond, noise)?;
        Ok(states + &self.norm.delta.invert(&delta_n))
    }

    fn encode(&self, ev: &Evidence) -> Option<Result<Tensor2>> {
        let enc = self.encoder.as_ref()?;
        let d = self.state_dim();
        let cond = self.norm.conditioning(&ev.states, &ev.actions, ev.theta.as_ref());
        let feats =
            enc.features(&cond, &self.norm.state.apply(&ev.next), &self.norm.delta_of(&ev.states, &ev.next), ev.theta.as_ref());
        if let Err(e) = check_cols("encoder features", &feats, enc.net.input_size()) {
            return Some(Err(e));
        }
        Some(Ok(enc.net.infer(&feats).slice(s![.., d + 1..]).to_owned()))
    }
}

/// Outcome of a randomized monotonicity probe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probes: usize,
    /// `(probe, dimension)` pairs that failed strict ordering.
    pub violations: usize,
}

impl ProbeReport {
    pub fn pass_rate(&self) -> f64 {
        if self.probes == 0 {
            return 1.0;
        }
        1.0 - self.violations as f64 / (self.probes as f64)
    }
}

/// Draws `n` random conditioning points and noise pairs `u < u'`
/// (elementwise) and checks `f(u') > f(u)` in every dimension.
pub fn monotonicity_probe(model: &dyn StructuralModel, state_scale: &Standardizer, n: usize, rng: &mut Rng64) -> Result<ProbeReport> {
    let d = model.state_dim();
    let z = model.sample_noise(n, rng);
    let states = state_scale.invert(&z);
    let actions = Array2::from_shape_fn((n, 1), |_| rng.gen_range(0.0..=1.0));
    let theta = (model.theta_dim() > 0).then(|| Array2::from_shape_fn((n, model.theta_dim()), |_| rng.gen_range(-1.0..1.0)));
    let u = model.sample_noise(n, rng) * 2.0;
    let du = Array2::from_shape_fn((n, d), |_| rng.gen_range(1e-3..1.0));
    let lo = model.mechanism(&states, &actions, theta.as_ref(), &u)?;
    let hi = model.mechanism(&states, &actions, theta.as_ref(), &(&u + &du))?;
    let mut violations = 0;
    for r in 0..n {
        if (0..d).any(|j| !(hi[[r, j]] > lo[[r, j]])) {
            violations += 1;
        }
    }
    Ok(ProbeReport { probes: n, violations })
}
