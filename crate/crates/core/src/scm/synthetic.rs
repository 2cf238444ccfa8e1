//! Closed-form monotone SCMs used as ground truth in tests and the
//! synthetic benchmark.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Evidence, StructuralModel};
use crate::env::{Provenance, Transition};
use crate::error::{Error, Result};
use crate::numerics::{check_cols, Tensor2};
use crate::rng::Rng64;

fn check(d: usize, states: &Tensor2, actions: &Tensor2, theta: Option<&Tensor2>, noise: &Tensor2) -> Result<()> {
    check_cols("states", states, d)?;
    check_cols("actions", actions, 1)?;
    check_cols("noise", noise, d)?;
    if theta.is_some() {
        return Err(Error::Dimension("synthetic models take no theta".into()));
    }
    if actions.nrows() != states.nrows() || noise.nrows() != states.nrows() {
        return Err(Error::Dimension("batch sizes differ".into()));
    }
    Ok(())
}

/// Applies `g(s_i, a, u_i)` to every entry.
fn elementwise(states: &Tensor2, actions: &Tensor2, noise: &Tensor2, g: impl Fn(f64, f64, f64) -> f64) -> Tensor2 {
    let mut out = Array2::zeros(states.raw_dim());
    for r in 0..states.nrows() {
        let a = actions[[r, 0]];
        for j in 0..states.ncols() {
            out[[r, j]] = g(states[[r, j]], a, noise[[r, j]]);
        }
    }
    out
}

/// `s'_i = s_i + a + u_i`.
#[derive(Clone, Copy, Debug)]
pub struct Additive {
    pub dims: usize,
}

impl Additive {
    pub fn new(dims: usize) -> Self {
        Self { dims }
    }
}

impl StructuralModel for Additive {
    fn state_dim(&self) -> usize {
        self.dims
    }

    fn mechanism(&self, s: &Tensor2, a: &Tensor2, theta: Option<&Tensor2>, u: &Tensor2) -> Result<Tensor2> {
        check(self.dims, s, a, theta, u)?;
        Ok(elementwise(s, a, u, |s, a, u| s + a + u))
    }

    fn encode(&self, ev: &Evidence) -> Option<Result<Tensor2>> {
        Some(Ok(&ev.next - &ev.states - &ev.actions))
    }
}

/// `s'_i = (1 + s_i^2 + a) exp(u_i / 2)`.
#[derive(Clone, Copy, Debug)]
pub struct Multiplicative {
    pub dims: usize,
}

impl Multiplicative {
    pub fn new(dims: usize) -> Self {
        Self { dims }
    }
}

impl StructuralModel for Multiplicative {
    fn state_dim(&self) -> usize {
        self.dims
    }

    fn mechanism(&self, s: &Tensor2, a: &Tensor2, theta: Option<&Tensor2>, u: &Tensor2) -> Result<Tensor2> {
        check(self.dims, s, a, theta, u)?;
        Ok(elementwise(s, a, u, |s, a, u| (1.0 + s * s + a) * (0.5 * u).exp()))
    }
}

/// `s'_i = sin(s_i) + 2a + (0.5 + a) sinh(u_i)`: heavy-tailed, with an
/// action-dependent spread.
#[derive(Clone, Copy, Debug)]
pub struct NonlinearMonotone {
    pub dims: usize,
}

impl NonlinearMonotone {
    pub fn new(dims: usize) -> Self {
        Self { dims }
    }
}

impl StructuralModel for NonlinearMonotone {
    fn state_dim(&self) -> usize {
        self.dims
    }

    fn mechanism(&self, s: &Tensor2, a: &Tensor2, theta: Option<&Tensor2>, u: &Tensor2) -> Result<Tensor2> {
        check(self.dims, s, a, theta, u)?;
        Ok(elementwise(s, a, u, |s, a, u| s.sin() + 2.0 * a + (0.5 + a) * u.sinh()))
    }
}

/// `s' = A s + b a + sigma * u`, with per-dimension noise scale.
#[derive(Clone, Debug)]
pub struct LinearGaussian {
    pub a: Array2<f64>,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl LinearGaussian {
    /// A stable random system: entries of `A` scaled so rows sum to < 1 in
    /// absolute value.
    pub fn random(dims: usize, sigma: f64, rng: &mut Rng64) -> Self {
        let a = Array2::from_shape_fn((dims, dims), |_| rng.gen_range(-0.8..0.8) / dims as f64);
        let b = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { a, b, sigma: vec![sigma; dims] }
    }
}

impl StructuralModel for LinearGaussian {
    fn state_dim(&self) -> usize {
        self.b.len()
    }

    fn mechanism(&self, s: &Tensor2, a: &Tensor2, theta: Option<&Tensor2>, u: &Tensor2) -> Result<Tensor2> {
        check(self.state_dim(), s, a, theta, u)?;
        let mut out = s.dot(&self.a.t());
        for r in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[[r, j]] += self.b[j] * a[[r, 0]] + self.sigma[j] * u[[r, j]];
            }
        }
        Ok(out)
    }
}

/// `s' = s + a - u`: decreasing in the noise.
#[derive(Clone, Copy, Debug)]
pub struct NegatedAdditive;

impl StructuralModel for NegatedAdditive {
    fn state_dim(&self) -> usize {
        1
    }

    fn mechanism(&self, s: &Tensor2, a: &Tensor2, theta: Option<&Tensor2>, u: &Tensor2) -> Result<Tensor2> {
        check(1, s, a, theta, u)?;
        Ok(elementwise(s, a, u, |s, a, u| s + a - u))
    }
}

/// `s' = exp(u)`: the reachable range is `(0, inf)` whatever `(s, a)`.
#[derive(Clone, Copy, Debug)]
pub struct Exponential;

impl StructuralModel for Exponential {
    fn state_dim(&self) -> usize {
        1
    }

    fn mechanism(&self, s: &Tensor2, a: &Tensor2, theta: Option<&Tensor2>, u: &Tensor2) -> Result<Tensor2> {
        check(1, s, a, theta, u)?;
        Ok(u.mapv(f64::exp))
    }
}

/// Observationally equivalent reparametrization of `M`: noise `w` with
/// `w^3 ~ N(0, 1)` enters `M` as `w^3`.
#[derive(Clone, Copy, Debug)]
pub struct CubeRootNoise<M>(pub M);

impl<M: StructuralModel> StructuralModel for CubeRootNoise<M> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn mechanism(&self, s: &Tensor2, a: &Tensor2, theta: Option<&Tensor2>, w: &Tensor2) -> Result<Tensor2> {
        self.0.mechanism(s, a, theta, &w.mapv(|v| v * v * v))
    }

    fn sample_noise(&self, n: usize, rng: &mut Rng64) -> Tensor2 {
        Array2::from_shape_fn((n, self.state_dim()), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z.cbrt()
        })
    }
}

/// Observationally equivalent reparametrization of `M` that is decreasing
/// in its noise: `v = -u` with the same symmetric prior.
#[derive(Clone, Copy, Debug)]
pub struct FlippedNoise<M>(pub M);

impl<M: StructuralModel> StructuralModel for FlippedNoise<M> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn mechanism(&self, s: &Tensor2, a: &Tensor2, theta: Option<&Tensor2>, v: &Tensor2) -> Result<Tensor2> {
        self.0.mechanism(s, a, theta, &v.mapv(|x| -x))
    }
}

/// Draws `n` observed triplets from `model` with states `~ N(0, state_scale^2)`
/// and actions uniform over `levels`.
pub fn sample_triplets(
    model: &dyn StructuralModel,
    n: usize,
    state_scale: f64,
    levels: &[f64],
    rng: &mut Rng64,
) -> Result<Vec<Transition>> {
    let d = model.state_dim();
    let s = Array2::from_shape_fn((n, d), |_| {
        let z: f64 = StandardNormal.sample(rng);
        state_scale * z
    });
    let a = Array2::from_shape_fn((n, 1), |_| levels[rng.gen_range(0..levels.len())]);
    let u = model.sample_noise(n, rng);
    let next = model.mechanism(&s, &a, None, &u)?;
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        out.push(Transition {
            id: r as u64,
            subject_id: r as u32,
            group: 0,
            trial_id: r as u32,
            t: 0,
            state: s.row(r).to_vec(),
            action: a[[r, 0]],
            next_state: next.row(r).to_vec(),
            reward: 0.0,
            done: false,
            provenance: Provenance::Observed,
            parent: None,
            noise: Some(u.row(r).to_vec()),
        });
    }
    Ok(out)
}
