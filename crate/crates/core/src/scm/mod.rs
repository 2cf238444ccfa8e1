//! Structural causal models of one-step dynamics and the three-step
//! counterfactual procedure (abduction, action, prediction).
//!
//! Every model factors its exogenous noise per output dimension: output `i`
//! depends on noise only through `u_i` and is strictly monotone in it. That
//! makes abduction a set of independent scalar root-finding problems, which
//! [`abduct_batch`] solves for a whole batch at once.

pub mod cartpole;
pub mod learned;
pub mod quantile;
pub mod synthetic;

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_cols, Tensor2};
use crate::rng::Rng64;

pub use cartpole::CartPoleScm;
pub use learned::{ScmModel, Standardizer};
pub use quantile::{quantile_counterfactual, ConditionalSampler, QuantileEstimate};

/// Bisection stops once `|f(u) - s'| <= BISECTION_TOL` per dimension and
/// the noise bracket is narrower than `NOISE_TOL`.
pub const BISECTION_TOL: f64 = 1e-8;
pub const NOISE_TOL: f64 = 1e-12;
pub const BISECTION_MAX_ITERS: usize = 200;
/// Initial bracket half-width, in prior standard deviations.
pub const BRACKET_SIGMAS: f64 = 8.0;
/// Number of bracket doublings before giving up.
pub const BRACKET_EXPANSIONS: usize = 12;

/// `s' = f(s, a, [theta], u)` with `u` drawn from a fixed prior.
pub trait StructuralModel {
    fn state_dim(&self) -> usize;

    fn theta_dim(&self) -> usize {
        0
    }

    /// Evaluates the structural function row by row. `actions` is `n x 1`;
    /// `theta` is required exactly when `theta_dim() > 0`.
    fn mechanism(&self, states: &Tensor2, actions: &Tensor2, theta: Option<&Tensor2>, noise: &Tensor2) -> Result<Tensor2>;

    /// Draws `n` rows from the noise prior (standard normal unless
    /// overridden).
    fn sample_noise(&self, n: usize, rng: &mut Rng64) -> Tensor2 {
        Array2::from_shape_fn((n, self.state_dim()), |_| StandardNormal.sample(rng))
    }

    /// Fast-path inverse, if the model has one.
    fn encode(&self, _evidence: &Evidence) -> Option<Result<Tensor2>> {
        None
    }
}

/// A batch of observed triplets `(s, a, s')` with optional conditioning.
#[derive(Clone, Debug)]
pub struct Evidence {
    pub states: Tensor2,
    pub actions: Tensor2,
    pub theta: Option<Tensor2>,
    pub next: Tensor2,
}

impl Evidence {
    pub fn new(states: Tensor2, actions: Tensor2, theta: Option<Tensor2>, next: Tensor2) -> Result<Self> {
        let n = states.nrows();
        check_cols("evidence actions", &actions, 1)?;
        check_cols("evidence next states", &next, states.ncols())?;
        let rows_ok = actions.nrows() == n && next.nrows() == n && theta.as_ref().map_or(true, |t| t.nrows() == n);
        if !rows_ok {
            return Err(Error::Dimension("evidence batch sizes differ".into()));
        }
        Ok(Self { states, actions, theta, next })
    }

    pub fn single(state: &[f64], action: f64, theta: Option<&[f64]>, next: &[f64]) -> Result<Self> {
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape");
        Self::new(row(state), Array2::from_elem((1, 1), action), theta.map(row), row(next))
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, model: &dyn StructuralModel) -> Result<()> {
        check_cols("evidence states", &self.states, model.state_dim())?;
        match (&self.theta, model.theta_dim()) {
            (None, 0) => Ok(()),
            (Some(t), k) if k > 0 => check_cols("evidence theta", t, k),
            (Some(_), _) => Err(Error::Dimension("theta supplied to a model without theta".into())),
            (None, k) => Err(Error::Dimension(format!("model expects a {k}-dim theta"))),
        }
    }
}

/// How abduction recovers `u`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbductionMethod {
    /// The model's own inverse map only. Models without an encoder fall
    /// back to bisection.
    #[default]
    Encoder,
    /// Bisection from the prior bracket.
    Bisection,
    /// Encoder estimate, then bisection around it to [`BISECTION_TOL`].
    /// Falls back to plain bisection for models without an encoder.
    EncoderRefined,
}

/// Per-row abduction result: noise plus the first failing dimension for
/// rows whose evidence is outside the model's reachable range.
#[derive(Clone, Debug)]
pub struct Abduction {
    pub noise: Tensor2,
    pub failed: Vec<Option<usize>>,
}

impl Abduction {
    pub fn ok_rows(&self) -> usize {
        self.failed.iter().filter(|f| f.is_none()).count()
    }

    /// Converts to a hard error if any row failed.
    pub fn into_result(self) -> Result<Tensor2> {
        match self.failed.iter().flatten().next() {
            Some(&dim) => Err(Error::OutsideSupport { dim }),
            None => Ok(self.noise),
        }
    }
}

pub fn abduct_batch(model: &dyn StructuralModel, evidence: &Evidence, method: AbductionMethod) -> Result<Abduction> {
    evidence.validate(model)?;
    let n = evidence.len();
    let d = model.state_dim();
    match method {
        AbductionMethod::Encoder => match model.encode(evidence) {
            Some(noise) => Ok(Abduction { noise: noise?, failed: vec![None; n] }),
            None => bisect(model, evidence, Array2::zeros((n, d)), BRACKET_SIGMAS),
        },
        AbductionMethod::Bisection => bisect(model, evidence, Array2::zeros((n, d)), BRACKET_SIGMAS),
        AbductionMethod::EncoderRefined => match model.encode(evidence) {
            Some(guess) => {
                let guess = guess?;
                if guess.iter().all(|v| v.is_finite()) {
                    bisect(model, evidence, guess, 0.25)
                } else {
                    bisect(model, evidence, Array2::zeros((n, d)), BRACKET_SIGMAS)
                }
            }
            None => bisect(model, evidence, Array2::zeros((n, d)), BRACKET_SIGMAS),
        },
    }
}

/// Abduction for a single triplet.
pub fn abduct(
    model: &dyn StructuralModel,
    state: &[f64],
    action: f64,
    theta: Option<&[f64]>,
    next: &[f64],
    method: AbductionMethod,
) -> Result<Vec<f64>> {
    let ev = Evidence::single(state, action, theta, next)?;
    Ok(abduct_batch(model, &ev, method)?.into_result()?.row(0).to_vec())
}

/// Simultaneous per-entry bisection. Because output `i` only sees `u_i`,
/// one model evaluation advances every `(row, dim)` search at once.
fn bisect(model: &dyn StructuralModel, ev: &Evidence, center: Tensor2, half_width: f64) -> Result<Abduction> {
    let (n, d) = ev.next.dim();
    let theta = ev.theta.as_ref();
    let eval = |u: &Tensor2| model.mechanism(&ev.states, &ev.actions, theta, u);

    let mut lo = center.mapv(|c| c - half_width);
    let mut hi = center.mapv(|c| c + half_width);
    let mut f_lo = eval(&lo)?;
    let mut f_hi = eval(&hi)?;
    let mut failed: Vec<Option<usize>> = vec![None; n];

    let bracketed = |flo: f64, fhi: f64, y: f64| flo.min(fhi) <= y && y <= flo.max(fhi);
    for _ in 0..BRACKET_EXPANSIONS {
        let mut all = true;
        for r in 0..n {
            for j in 0..d {
                if bracketed(f_lo[[r, j]], f_hi[[r, j]], ev.next[[r, j]]) {
                    continue;
                }
                all = false;
                let w = hi[[r, j]] - lo[[r, j]];
                lo[[r, j]] -= w;
                hi[[r, j]] += w;
            }
        }
        if all {
            break;
        }
        f_lo = eval(&lo)?;
        f_hi = eval(&hi)?;
    }

    let mut u = Array2::zeros((n, d));
    let mut done = Array2::from_elem((n, d), false);
    let mut increasing = Array2::from_elem((n, d), true);
    for r in 0..n {
        for j in 0..d {
            let (a, b, y) = (f_lo[[r, j]], f_hi[[r, j]], ev.next[[r, j]]);
            if !a.is_finite() || !b.is_finite() || !bracketed(a, b, y) {
                failed[r].get_or_insert(j);
                done[[r, j]] = true;
            } else if a == b {
                // Flat in this dimension: every u reproduces y.
                u[[r, j]] = 0.5 * (lo[[r, j]] + hi[[r, j]]);
                done[[r, j]] = true;
            } else {
                increasing[[r, j]] = b > a;
            }
        }
    }

    for _ in 0..BISECTION_MAX_ITERS {
        if done.iter().all(|&x| x) {
            break;
        }
        let mid = (&lo + &hi) * 0.5;
        let f_mid = eval(&mid)?;
        for r in 0..n {
            for j in 0..d {
                if done[[r, j]] {
                    continue;
                }
                let m = mid[[r, j]];
                let resid = f_mid[[r, j]] - ev.next[[r, j]];
                let collapsed = m <= lo[[r, j]] || m >= hi[[r, j]];
                let narrow = hi[[r, j]] - lo[[r, j]] <= NOISE_TOL;
                if resid == 0.0 || (resid.abs() <= BISECTION_TOL && narrow) || collapsed {
                    u[[r, j]] = m;
                    done[[r, j]] = true;
                } else if (resid < 0.0) == increasing[[r, j]] {
                    lo[[r, j]] = m;
                } else {
                    hi[[r, j]] = m;
                }
            }
        }
    }
    for ((r, j), flag) in done.indexed_iter() {
        if !flag {
            u[[r, j]] = 0.5 * (lo[[r, j]] + hi[[r, j]]);
        }
    }
    Ok(Abduction { noise: u, failed })
}

/// Action and prediction for a batch: abducts `u`, then evaluates `f` at
/// the alternative actions. Rows whose abduction failed hold NaN.
pub fn counterfactual_batch(
    model: &dyn StructuralModel,
    evidence: &Evidence,
    cf_actions: &Tensor2,
    method: AbductionMethod,
) -> Result<(Tensor2, Abduction)> {
    check_cols("counterfactual actions", cf_actions, 1)?;
    if cf_actions.nrows() != evidence.len() {
        return Err(Error::Dimension("one counterfactual action per evidence row".into()));
    }
    let abd = abduct_batch(model, evidence, method)?;
    let mut out = model.mechanism(&evidence.states, cf_actions, evidence.theta.as_ref(), &abd.noise)?;
    for (r, f) in abd.failed.iter().enumerate() {
        if f.is_some() {
            out.row_mut(r).fill(f64::NAN);
        }
    }
    Ok((out, abd))
}

/// A single "what if I had taken `cf_action`" question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualQuery {
    pub state: Vec<f64>,
    pub action: f64,
    pub next_state: Vec<f64>,
    pub cf_action: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

pub fn counterfactual(model: &dyn StructuralModel, query: &CounterfactualQuery, method: AbductionMethod) -> Result<Vec<f64>> {
    let ev = Evidence::single(&query.state, query.action, query.theta.as_deref(), &query.next_state)?;
    let (out, abd) = counterfactual_batch(model, &ev, &Array2::from_elem((1, 1), query.cf_action), method)?;
    abd.into_result()?;
    Ok(out.row(0).to_vec())
}

/// Answer line of the counterfactual batch format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    #[serde(flatten)]
    pub query: CounterfactualQuery,
    pub output: Vec<f64>,
    pub provenance: crate::env::Provenance,
}

pub fn read_queries<R: BufRead>(reader: R) -> Result<Vec<CounterfactualQuery>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            context: format!("query line {}", i + 1),
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Answers every query, writing one JSON line per query.
pub fn answer_queries<W: Write>(
    model: &dyn StructuralModel,
    queries: &[CounterfactualQuery],
    method: AbductionMethod,
    mut out: W,
) -> Result<usize> {
    for q in queries {
        let output = counterfactual(model, q, method)?;
        let res = CounterfactualResult { query: q.clone(), output, provenance: crate::env::Provenance::Counterfactual };
        writeln!(out, "{}", serde_json::to_string(&res)?)?;
    }
    Ok(queries.len())
}

/// Where alternative actions are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSupport {
    Levels(Vec<f64>),
    Interval { lo: f64, hi: f64 },
}

/// `k` independent uniform draws; the factual action may reappear.
pub fn sample_alternative_actions(support: &ActionSupport, k: usize, rng: &mut Rng64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    match support {
        ActionSupport::Levels(levels) if levels.is_empty() => Err(Error::InvalidConfig("empty action set".into())),
        ActionSupport::Levels(levels) => Ok((0..k).map(|_| levels[rng.gen_range(0..levels.len())]).collect()),
        ActionSupport::Interval { lo, hi } if !(lo < hi) => {
            Err(Error::InvalidConfig(format!("empty action interval [{lo}, {hi}]")))
        }
        ActionSupport::Interval { lo, hi } => Ok((0..k).map(|_| rng.gen_range(*lo..*hi)).collect()),
    }
}
