//! Finite MDPs, value iteration and tabular Q-learning over counterfactually
//! augmented transition streams.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `p[[s * n_actions + a, s']]`.
    pub p: Array2<f64>,
    /// `r[[s, a]]`.
    pub r: Array2<f64>,
    pub gamma: f64,
}

impl FiniteMdp {
    pub fn new(p: Array2<f64>, r: Array2<f64>, gamma: f64) -> Result<Self> {
        let (n_states, n_actions) = r.dim();
        let mdp = Self { n_states, n_actions, p, r, gamma };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::InvalidConfig("MDP needs at least one state and action".into()));
        }
        if self.p.dim() != (self.n_states * self.n_actions, self.n_states) {
            return Err(Error::Dimension(format!("transition kernel has shape {:?}", self.p.dim())));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("discount {} outside [0, 1)", self.gamma)));
        }
        for (i, row) in self.p.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!("kernel row {i} is not a distribution (sum {sum})")));
            }
        }
        if self.r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite reward".into()));
        }
        Ok(())
    }

    /// Dense random kernel (normalized uniform weights) and rewards in
    /// `[0, 1)`.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, rng: &mut Rng64) -> Result<Self> {
        let mut p = Array2::from_shape_fn((n_states * n_actions, n_states), |_| rng.gen::<f64>() + 1e-3);
        for mut row in p.rows_mut() {
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
            // push rounding residue into the largest entry
            let resid = 1.0 - row.sum();
            let j = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(j, _)| j).unwrap_or(0);
            row[j] += resid;
        }
        let r = Array2::from_shape_fn((n_states, n_actions), |_| rng.gen::<f64>());
        Self::new(p, r, gamma)
    }

    pub fn row(&self, s: usize, a: usize) -> ndarray::ArrayView1<'_, f64> {
        self.p.row(s * self.n_actions + a)
    }

    /// Structural form `s' = F^{-1}(u | s, a)`, `u ~ U(0, 1)`.
    pub fn next_state(&self, s: usize, a: usize, u: f64) -> usize {
        let mut acc = 0.0;
        let row = self.row(s, a);
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // u within rounding of 1: last state with positive mass
        row.iter().rposition(|&p| p > 0.0).unwrap_or(self.n_states - 1)
    }

    /// Posterior draw of `u` given an observed outcome: uniform on the
    /// CDF step that produced `next`. Discrete outcomes only pin `u` down
    /// to that interval.
    pub fn abduct(&self, s: usize, a: usize, next: usize, rng: &mut Rng64) -> f64 {
        let row = self.row(s, a);
        let lo: f64 = row.iter().take(next).sum();
        let hi = lo + row[next];
        lo + (hi - lo) * rng.gen::<f64>()
    }

    /// One application of the Bellman optimality operator.
    pub fn bellman(&self, q: &Array2<f64>) -> Array2<f64> {
        let v: Vec<f64> = q.rows().into_iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        Array2::from_shape_fn((self.n_states, self.n_actions), |(s, a)| {
            self.r[[s, a]] + self.gamma * self.row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum::<f64>()
        })
    }

    pub fn bellman_residual(&self, q: &Array2<f64>) -> f64 {
        sup_norm(&(self.bellman(q) - q))
    }
}

pub fn sup_norm(x: &Array2<f64>) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `Q*` within `tol` in sup norm. Stops when successive iterates differ by
/// at most `tol (1 - gamma)`, which bounds the distance to the fixed point.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> Result<Array2<f64>> {
    mdp.validate()?;
    if tol <= 0.0 {
        return Err(Error::InvalidConfig("tolerance must be positive".into()));
    }
    let mut q = Array2::zeros((mdp.n_states, mdp.n_actions));
    loop {
        let next = mdp.bellman(&q);
        let diff = sup_norm(&(&next - &q));
        q = next;
        if diff <= tol * (1.0 - mdp.gamma) {
            return Ok(q);
        }
    }
}

/// Step sizes indexed by the visit count `n >= 1` of a state-action pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `c / ceil(n / hold)^p`.
    Power { c: f64, p: f64, hold: u64 },
    /// Fixed step; never satisfies the square-summability condition.
    Constant { alpha: f64 },
}

impl Schedule {
    pub fn power(c: f64, p: f64, hold: u64) -> Result<Self> {
        let s = Schedule::Power { c, p, hold };
        s.validate()?;
        Ok(s)
    }

    /// Checks `sum alpha = inf` and `sum alpha^2 < inf`.
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Power { c, p, hold } => {
                if !(c > 0.0 && c <= 1.0) {
                    return Err(Error::ScheduleRejected(format!("scale {c} outside (0, 1]")));
                }
                if hold == 0 {
                    return Err(Error::ScheduleRejected("hold must be at least 1".into()));
                }
                if p <= 0.5 {
                    return Err(Error::ScheduleRejected(format!("exponent {p} <= 0.5: squared steps diverge")));
                }
                if p > 1.0 {
                    return Err(Error::ScheduleRejected(format!("exponent {p} > 1: steps are summable")));
                }
                Ok(())
            }
            Schedule::Constant { alpha } => {
                Err(Error::ScheduleRejected(format!("constant step {alpha}: squared steps diverge")))
            }
        }
    }

    pub fn alpha(&self, n: u64) -> f64 {
        match *self {
            Schedule::Power { c, p, hold } => c / (n.max(1).div_ceil(hold) as f64).powf(p),
            Schedule::Constant { alpha } => alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub values: Array2<f64>,
    pub visits: Array2<u64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self { values: Array2::zeros((n_states, n_actions)), visits: Array2::zeros((n_states, n_actions)) }
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.values.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn greedy(&self, s: usize) -> usize {
        let row = self.values.row(s);
        (0..row.len()).fold(0, |best, a| if row[a] > row[best] { a } else { best })
    }

    /// `Q(s, a) += alpha_n (r + gamma max Q(s') - Q(s, a))` with `n` the
    /// pair's visit count including this one.
    pub fn update(&mut self, s: usize, a: usize, r: f64, next: usize, gamma: f64, schedule: &Schedule) {
        self.visits[[s, a]] += 1;
        let alpha = schedule.alpha(self.visits[[s, a]]);
        let target = r + gamma * self.max_value(next);
        self.values[[s, a]] += alpha * (target - self.values[[s, a]]);
    }
}

/// A tabular transition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next: usize,
}

/// Behaviour trajectory under uniformly random actions. Each observed
/// step is followed by its counterfactual siblings: the noise is abducted
/// from the observed outcome and every other action is replayed with it.
pub struct AugmentedStream<'a> {
    mdp: &'a FiniteMdp,
    rng: Rng64,
    state: usize,
    pending: Vec<TabularStep>,
}

impl<'a> AugmentedStream<'a> {
    pub fn new(mdp: &'a FiniteMdp, start: usize, rng: Rng64) -> Self {
        Self { mdp, rng, state: start, pending: Vec::new() }
    }
}

impl Iterator for AugmentedStream<'_> {
    type Item = TabularStep;

    fn next(&mut self) -> Option<TabularStep> {
        if let Some(step) = self.pending.pop() {
            return Some(step);
        }
        let m = self.mdp;
        let s = self.state;
        let a = self.rng.gen_range(0..m.n_actions);
        let next = m.next_state(s, a, self.rng.gen::<f64>());
        let u = m.abduct(s, a, next, &mut self.rng);
        for cf in (0..m.n_actions).rev().filter(|&b| b != a) {
            self.pending.push(TabularStep { state: s, action: cf, reward: m.r[[s, cf]], next: m.next_state(s, cf, u) });
        }
        self.state = next;
        Some(TabularStep { state: s, action: a, reward: m.r[[s, a]], next })
    }
}

/// Runs `updates` Q-learning updates over a transition stream.
pub fn tabular_q_learning(
    stream: impl IntoIterator<Item = TabularStep>,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    schedule: &Schedule,
    updates: usize,
) -> Result<QTable> {
    schedule.validate()?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!("discount {gamma} outside [0, 1)")));
    }
    let mut q = QTable::zeros(n_states, n_actions);
    for step in stream.into_iter().take(updates) {
        if step.state >= n_states || step.next >= n_states || step.action >= n_actions {
            return Err(Error::Dimension(format!("transition {step:?} outside a {n_states}x{n_actions} table")));
        }
        q.update(step.state, step.action, step.reward, step.next, gamma, schedule);
    }
    Ok(q)
}
