//! Dueling double deep Q-network trained off-policy on a fixed dataset.

use std::path::PathBuf;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionPolicy, Transition};
use crate::error::{Error, Result};
use crate::numerics::loss::huber;
use crate::numerics::param::{join, Module, Param};
use crate::numerics::{checkpoint, stack_rows, Adam, AdamConfig, Layer, Mlp, MlpSpec, Tensor2};
use crate::rng::{seeded, Rng64};
use crate::scm::learned::Standardizer;

/// `Q = V + A - mean_a A` from a `[V, A_1..A_n]` input.
#[derive(Clone, Debug, Default)]
pub struct DuelingHead;

impl DuelingHead {
    pub fn aggregate(va: &Tensor2) -> Tensor2 {
        let n = va.ncols() - 1;
        let mut q = Array2::zeros((va.nrows(), n));
        for (mut qr, r) in q.rows_mut().into_iter().zip(va.rows()) {
            let mean = r.iter().skip(1).sum::<f64>() / n as f64;
            for j in 0..n {
                qr[j] = r[0] + r[j + 1] - mean;
            }
        }
        q
    }
}

impl Module for DuelingHead {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

impl Layer for DuelingHead {
    fn forward(&mut self, x: &Tensor2, _train: bool) -> Result<Tensor2> {
        if x.ncols() < 2 {
            return Err(Error::Dimension("dueling head needs a value and at least one advantage".into()));
        }
        Ok(Self::aggregate(x))
    }

    fn backward(&mut self, grad: &Tensor2) -> Tensor2 {
        let n = grad.ncols();
        let mut out = Array2::zeros((grad.nrows(), n + 1));
        for (mut o, g) in out.rows_mut().into_iter().zip(grad.rows()) {
            let sum: f64 = g.sum();
            o[0] = sum;
            for j in 0..n {
                o[j + 1] = g[j] - sum / n as f64;
            }
        }
        out
    }
}

/// Shared hidden layers; the output layer emits the value stream in
/// column 0 and the advantage stream in the remaining columns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DuelingNet {
    pub body: Mlp,
    /// Discrete action values, indexed like the advantage columns.
    pub levels: Vec<f64>,
    pub input: Standardizer,
}

impl DuelingNet {
    pub fn new(state_dim: usize, levels: Vec<f64>, hidden: &[usize], input: Standardizer, rng: &mut Rng64) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidConfig("empty action set".into()));
        }
        if input.dim() != state_dim {
            return Err(Error::Dimension("input standardizer does not match state dimension".into()));
        }
        let body = Mlp::new(MlpSpec::new(state_dim, hidden, levels.len() + 1).without_batch_norm(), rng)?;
        Ok(Self { body, levels, input })
    }

    pub fn n_actions(&self) -> usize {
        self.levels.len()
    }

    pub fn action_index(&self, a: f64) -> Option<usize> {
        self.levels.iter().position(|&l| (l - a).abs() < 1e-9)
    }

    /// Raw `[V, A]` streams.
    pub fn streams(&self, states: &Tensor2) -> Tensor2 {
        self.body.infer(&self.input.apply(states))
    }

    pub fn q_values(&self, states: &Tensor2) -> Tensor2 {
        DuelingHead::aggregate(&self.streams(states))
    }

    pub fn forward(&mut self, states: &Tensor2) -> Result<Tensor2> {
        let z = self.input.apply(states);
        DuelingHead.forward(&self.body.forward(&z, true)?, true)
    }

    pub fn backward(&mut self, grad_q: &Tensor2) {
        let g = DuelingHead.backward(grad_q);
        self.body.backward(&g);
    }

    pub fn greedy_index(&self, state: &[f64]) -> usize {
        let q = self.q_values(&stack_rows([state], state.len()));
        argmax(q.row(0).iter().copied())
    }
}

impl Module for DuelingNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.body.visit_params(&join(prefix, "body"), f);
    }
}

impl ActionPolicy for DuelingNet {
    fn act(&self, state: &[f64], _rng: &mut Rng64) -> f64 {
        self.levels[self.greedy_index(state)]
    }
}

/// First index of the maximum.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// `r + gamma (1 - done) Q_target(s', argmax_a Q_main(s', a))`. Returns the
/// targets and the selected next actions.
pub fn double_dqn_targets(
    main: &DuelingNet,
    target: &DuelingNet,
    rewards: &Array1<f64>,
    next: &Tensor2,
    done: &Array1<f64>,
    gamma: f64,
) -> (Array1<f64>, Vec<usize>) {
    let q_main = main.q_values(next);
    let q_target = target.q_values(next);
    let picks: Vec<usize> = q_main.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
    let y = Array1::from_shape_fn(rewards.len(), |i| rewards[i] + gamma * (1.0 - done[i]) * q_target[[i, picks[i]]]);
    (y, picks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct D3qnConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Hard copy of the main network into the target network.
    pub target_sync: usize,
    pub huber_delta: f64,
    pub seed: u64,
    /// Last finite network, written at every target sync.
    pub checkpoint: Option<PathBuf>,
}

impl Default for D3qnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512; 4],
            gamma: 0.99,
            lr: 1e-4,
            batch_size: 128,
            steps: 20_000,
            target_sync: 1000,
            huber_delta: 1.0,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl D3qnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if self.batch_size == 0 || self.steps == 0 || self.target_sync == 0 {
            return Err(Error::InvalidConfig("batch_size, steps and target_sync must be positive".into()));
        }
        if !(self.lr > 0.0 && self.huber_delta > 0.0) {
            return Err(Error::InvalidConfig("lr and huber_delta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct D3qnReport {
    /// Mean TD loss per sync period.
    pub losses: Vec<f64>,
    pub records: usize,
}

struct Batch {
    states: Tensor2,
    actions: Vec<usize>,
    rewards: Array1<f64>,
    next: Tensor2,
    done: Array1<f64>,
}

fn to_batch(rows: &[&Transition], net: &DuelingNet) -> Result<Batch> {
    let d = net.input.dim();
    let actions = rows
        .iter()
        .map(|r| net.action_index(r.action).ok_or_else(|| Error::Precondition(format!("action {} not in the action set", r.action))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        states: stack_rows(rows.iter().map(|r| r.state.as_slice()), d),
        actions,
        rewards: rows.iter().map(|r| r.reward).collect(),
        next: stack_rows(rows.iter().map(|r| r.next_state.as_slice()), d),
        done: rows.iter().map(|r| if r.done { 1.0 } else { 0.0 }).collect(),
    })
}

/// Mini-batch TD training with double-DQN targets, sampling uniformly from
/// `records`. Inputs are standardized with statistics of the dataset states.
pub fn train_d3qn(records: &[Transition], levels: &[f64], cfg: &D3qnConfig) -> Result<(DuelingNet, D3qnReport)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    let d = records[0].state.len();
    let mut rng = seeded(cfg.seed);
    let states = stack_rows(records.iter().map(|r| r.state.as_slice()), d);
    let mut main = DuelingNet::new(d, levels.to_vec(), &cfg.hidden, Standardizer::fit(&states)?, &mut rng)?;
    // validates every action up front
    to_batch(&records.iter().collect::<Vec<_>>(), &main)?;
    let mut target = main.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut report = D3qnReport { records: records.len(), ..Default::default() };
    let (mut acc, mut count) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let rows: Vec<&Transition> = (0..cfg.batch_size).map(|_| &records[rng.gen_range(0..records.len())]).collect();
        let b = to_batch(&rows, &main)?;
        let (y, _) = double_dqn_targets(&main, &target, &b.rewards, &b.next, &b.done, cfg.gamma);
        let q = main.forward(&b.states)?;
        let chosen = Array2::from_shape_fn((rows.len(), 1), |(i, _)| q[[i, b.actions[i]]]);
        let (loss, g) = huber(&chosen, &y.insert_axis(Axis(1)), cfg.huber_delta);
        if !loss.is_finite() || loss > 1e12 {
            return Err(Error::Diverged { step, what: format!("TD loss {loss}") });
        }
        let mut grad_q = Array2::zeros(q.raw_dim());
        for (i, &a) in b.actions.iter().enumerate() {
            grad_q[[i, a]] = g[[i, 0]];
        }
        main.zero_grad();
        main.backward(&grad_q);
        opt.step(&mut main).map_err(|e| Error::Diverged { step, what: e.to_string() })?;
        acc += loss;
        count += 1;
        if step % cfg.target_sync == 0 || step == cfg.steps {
            target = main.clone();
            report.losses.push(acc / count as f64);
            log::debug!("d3qn step {step}: td loss {:.5}", acc / count as f64);
            (acc, count) = (0.0, 0);
            if let Some(path) = &cfg.checkpoint {
                checkpoint::save(path, "dueling_net", &main)?;
            }
        }
    }
    Ok((main, report))
}

/// Mean `Q(s, a)` of the recorded actions.
pub fn mean_q_on(net: &DuelingNet, records: &[Transition]) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let b = to_batch(&records.iter().collect::<Vec<_>>(), net)?;
    let q = net.q_values(&b.states);
    Ok(b.actions.iter().enumerate().map(|(i, &a)| q[[i, a]]).sum::<f64>() / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{action_levels, Provenance};
    use crate::numerics::gradcheck::{check_input, check_params};
    use crate::numerics::Linear;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    fn randn(r: usize, c: usize, rng: &mut Rng64) -> Tensor2 {
        let n = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((r, c), |_| n.sample(rng))
    }

    #[test]
    fn aggregation_identity_is_exact() {
        let mut rng = seeded(0);
        let va = randn(50, 6, &mut rng);
        let q = DuelingHead::aggregate(&va);
        for (qr, r) in q.rows().into_iter().zip(va.rows()) {
            let mean = r.iter().skip(1).sum::<f64>() / 5.0;
            for j in 0..5 {
                assert_eq!(qr[j], r[0] + r[j + 1] - mean);
            }
            let centered: f64 = qr.iter().map(|v| v - r[0]).sum();
            assert!(centered.abs() < 1e-12);
        }
    }

    #[test]
    fn constant_advantage_shift_keeps_greedy_action() {
        let mut rng = seeded(1);
        let va = randn(30, 5, &mut rng);
        let mut shifted = va.clone();
        shifted.slice_mut(ndarray::s![.., 1..]).mapv_inplace(|v| v + 3.7);
        let (a, b) = (DuelingHead::aggregate(&va), DuelingHead::aggregate(&shifted));
        for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
            assert_eq!(argmax(ra.iter().copied()), argmax(rb.iter().copied()));
        }
    }

    #[test]
    fn dueling_head_gradients() {
        let mut rng = seeded(2);
        let x = randn(4, 5, &mut rng);
        let w = randn(4, 4, &mut rng);
        let mut head = DuelingHead;
        head.forward(&x, true).unwrap();
        let analytic = head.backward(&w);
        let rep = check_input(&x, &analytic, |x| (DuelingHead::aggregate(x) * &w).sum());
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");

        // through a dense layer so parameter gradients are covered too
        let mut lin = Linear::new(3, 5, &mut rng);
        let z = randn(4, 3, &mut rng);
        let rep = check_params(&mut lin, |l, backward| {
            let out = DuelingHead.forward(&l.forward(&z, true).unwrap(), true).unwrap();
            if backward {
                l.backward(&DuelingHead.backward(&w));
            }
            (&out * &w).sum()
        });
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    fn net(levels: usize, seed: u64) -> DuelingNet {
        DuelingNet::new(2, action_levels(levels), &[8, 8], Standardizer::identity(2), &mut seeded(seed)).unwrap()
    }

    #[test]
    fn double_targets_use_main_argmax() {
        let main = net(3, 10);
        let mut target = net(3, 11);
        let next = randn(64, 2, &mut seeded(3));
        // make the target network disagree strongly with the main network
        target.body.output_layer_mut().weight.value.mapv_inplace(|v| -5.0 * v);
        let rewards = Array1::zeros(64);
        let done = Array1::zeros(64);
        let (y, picks) = double_dqn_targets(&main, &target, &rewards, &next, &done, 0.5);
        let qm = main.q_values(&next);
        let qt = target.q_values(&next);
        let mut differs = 0;
        for i in 0..64 {
            assert_eq!(picks[i], argmax(qm.row(i).iter().copied()));
            assert_eq!(y[i], 0.5 * qt[[i, picks[i]]]);
            if picks[i] != argmax(qt.row(i).iter().copied()) {
                differs += 1;
            }
        }
        assert!(differs > 0, "instrumentation needs rows where the two networks disagree");
    }

    fn record(state: Vec<f64>, action: f64, reward: f64) -> Transition {
        Transition {
            id: 0,
            subject_id: 0,
            group: 0,
            trial_id: 0,
            t: 0,
            next_state: state.clone(),
            state,
            action,
            reward,
            done: false,
            provenance: Provenance::Observed,
            parent: None,
            noise: None,
        }
    }

    #[test]
    fn single_transition_with_zero_discount_learns_reward() {
        let levels = action_levels(3);
        let data = vec![record(vec![0.3, -0.2], levels[2], 1.5)];
        let cfg = D3qnConfig { hidden: vec![16, 16], gamma: 0.0, lr: 1e-3, batch_size: 4, steps: 2000, target_sync: 50, ..Default::default() };
        let (net, report) = train_d3qn(&data, &levels, &cfg).unwrap();
        let q = net.q_values(&array![[0.3, -0.2]]);
        assert!((q[[0, 2]] - 1.5).abs() < 1e-3, "{q:?}");
        assert!(report.losses.last().unwrap() < &1e-6);
        assert!((mean_q_on(&net, &data).unwrap() - 1.5).abs() < 1e-3);
    }

    #[test]
    fn unknown_action_and_empty_data_rejected() {
        let levels = action_levels(3);
        let cfg = D3qnConfig { hidden: vec![4], steps: 1, ..Default::default() };
        assert!(train_d3qn(&[], &levels, &cfg).is_err());
        assert!(train_d3qn(&[record(vec![0.0, 0.0], 0.123, 0.0)], &levels, &cfg).is_err());
    }
}
