//! Conditional dynamics models used as augmentation baselines: a
//! deterministic regressor (D), a diagonal Gaussian (S) and a Gaussian
//! mixture density network (M). None of them takes a noise input, so their
//! generated transitions are fresh draws rather than counterfactuals.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{cartpole_outcome, AugmentConfig, AugmentedDataset, OutcomeFn};
use crate::env::{Provenance, Transition};
use crate::error::{Error, Result};
use crate::numerics::loss::{gaussian_nll, mse};
use crate::numerics::{stack_rows, Adam, AdamConfig, Layer, Mlp, MlpSpec, Module, Tensor2};
use crate::rng::{seeded, Rng64};
use crate::scm::learned::{hcat, Normalization};
use crate::scm::quantile::ConditionalSampler;

/// Added to `exp(raw)` so variances stay strictly positive.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    D,
    S,
    M,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub hidden: Vec<usize>,
    /// Mixture components for variant M.
    pub components: usize,
    pub lr: f64,
    /// The learning rate decays linearly to `lr * final_lr_frac`.
    pub final_lr_frac: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { hidden: vec![300, 300], components: 5, lr: 1e-3, final_lr_frac: 0.01, batch_size: 256, iterations: 5000, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub variant: Variant,
    pub components: usize,
    pub net: Mlp,
    pub norm: Normalization,
}

/// Predictive distribution for a batch, in standardized increment units.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `rows x K`, each row sums to one.
    pub weights: Tensor2,
    /// One `rows x d` matrix per component.
    pub means: Vec<Tensor2>,
    pub variances: Vec<Tensor2>,
}

fn output_cols(variant: Variant, k: usize, d: usize) -> usize {
    match variant {
        Variant::D => d,
        Variant::S => 2 * d,
        Variant::M => k + 2 * k * d,
    }
}

fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for mut r in out.rows_mut() {
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        r.mapv_inplace(|v| (v - m).exp());
        let z = r.sum();
        r.mapv_inplace(|v| v / z);
    }
    out
}

/// Mixture density negative log-likelihood averaged over rows. `out` holds
/// `[logits (K), means (K d), raw log-variances (K d)]` per row.
pub fn mdn_nll(out: &Tensor2, target: &Tensor2, k: usize, floor: f64) -> (f64, Tensor2) {
    let (rows, d) = target.dim();
    let n = rows.max(1) as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut grad = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    let pis = softmax_rows(&out.slice(s![.., ..k]).to_owned());
    let mut joint = vec![0.0; k];
    for i in 0..rows {
        for c in 0..k {
            let mut ll = pis[[i, c]].max(1e-300).ln();
            for j in 0..d {
                let m = out[[i, k + c * d + j]];
                let var = out[[i, k + k * d + c * d + j]].exp() + floor;
                let r = target[[i, j]] - m;
                ll -= 0.5 * (ln_2pi + var.ln() + r * r / var);
            }
            joint[c] = ll;
        }
        let mx = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + joint.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss -= lse;
        for c in 0..k {
            let resp = (joint[c] - lse).exp();
            grad[[i, c]] = (pis[[i, c]] - resp) / n;
            for j in 0..d {
                let mi = k + c * d + j;
                let vi = k + k * d + c * d + j;
                let e = out[[i, vi]].exp();
                let var = e + floor;
                let r = target[[i, j]] - out[[i, mi]];
                grad[[i, mi]] = -resp * r / var / n;
                grad[[i, vi]] = resp * 0.5 * (1.0 / var - r * r / (var * var)) * e / n;
            }
        }
    }
    (loss / n, grad)
}

impl DynamicsModel {
    pub fn new(variant: Variant, components: usize, state_dim: usize, hidden: &[usize], norm: Normalization, rng: &mut Rng64) -> Result<Self> {
        let k = match variant {
            Variant::M if components == 0 => return Err(Error::InvalidConfig("mixture needs at least one component".into())),
            Variant::M => components,
            _ => 1,
        };
        let spec = MlpSpec::new(state_dim + 1, hidden, output_cols(variant, k, state_dim)).without_batch_norm();
        Ok(Self { variant, components: k, net: Mlp::new(spec, rng)?, norm })
    }

    pub fn state_dim(&self) -> usize {
        self.norm.state.dim()
    }

    fn inputs(&self, states: &Tensor2, actions: &Tensor2) -> Tensor2 {
        hcat(&[self.norm.state.apply(states), self.norm.action.apply(actions)])
    }

    fn split(&self, out: &Tensor2) -> Prediction {
        let d = self.state_dim();
        let k = self.components;
        let var = |raw: Tensor2| raw.mapv(|v| v.exp() + VARIANCE_FLOOR);
        match self.variant {
            Variant::D => Prediction {
                weights: Array2::ones((out.nrows(), 1)),
                means: vec![out.clone()],
                variances: vec![Array2::zeros(out.raw_dim())],
            },
            Variant::S => Prediction {
                weights: Array2::ones((out.nrows(), 1)),
                means: vec![out.slice(s![.., ..d]).to_owned()],
                variances: vec![var(out.slice(s![.., d..]).to_owned())],
            },
            Variant::M => Prediction {
                weights: softmax_rows(&out.slice(s![.., ..k]).to_owned()),
                means: (0..k).map(|c| out.slice(s![.., k + c * d..k + (c + 1) * d]).to_owned()).collect(),
                variances: (0..k)
                    .map(|c| var(out.slice(s![.., k + k * d + c * d..k + k * d + (c + 1) * d]).to_owned()))
                    .collect(),
            },
        }
    }

    pub fn predict(&self, states: &Tensor2, actions: &Tensor2) -> Prediction {
        self.split(&self.net.infer(&self.inputs(states, actions)))
    }

    /// Training loss on a batch and its gradient w.r.t. the network output.
    fn loss(&self, out: &Tensor2, target: &Tensor2) -> (f64, Tensor2) {
        let d = self.state_dim();
        match self.variant {
            Variant::D => mse(out, target),
            Variant::S => {
                let (l, dm, dv) = gaussian_nll(&out.slice(s![.., ..d]).to_owned(), &out.slice(s![.., d..]).to_owned(), target, VARIANCE_FLOOR);
                (l, hcat(&[dm, dv]))
            }
            Variant::M => mdn_nll(out, target, self.components, VARIANCE_FLOOR),
        }
    }

    /// Mean negative log-likelihood of observed transitions in standardized
    /// increment units; squared error for variant D.
    pub fn evaluate(&self, states: &Tensor2, actions: &Tensor2, next: &Tensor2) -> f64 {
        let out = self.net.infer(&self.inputs(states, actions));
        self.loss(&out, &self.norm.delta_of(states, next)).0
    }

    /// One draw of `s'` per row: D returns the mean, S a Gaussian draw, M a
    /// component draw followed by a Gaussian draw.
    pub fn sample_next(&self, states: &Tensor2, actions: &Tensor2, rng: &mut Rng64) -> Tensor2 {
        let p = self.predict(states, actions);
        let (rows, d) = (states.nrows(), self.state_dim());
        let mut delta = Array2::zeros((rows, d));
        for i in 0..rows {
            let c = if self.components == 1 {
                0
            } else {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = self.components - 1;
                for c in 0..self.components {
                    acc += p.weights[[i, c]];
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                pick
            };
            for j in 0..d {
                let z: f64 = if self.variant == Variant::D { 0.0 } else { StandardNormal.sample(rng) };
                delta[[i, j]] = p.means[c][[i, j]] + p.variances[c][[i, j]].sqrt() * z;
            }
        }
        states + &self.norm.delta.invert(&delta)
    }
}

impl ConditionalSampler for DynamicsModel {
    fn state_dim(&self) -> usize {
        DynamicsModel::state_dim(self)
    }

    fn sample_next(&self, state: &[f64], action: f64, _theta: Option<&[f64]>, n: usize, rng: &mut Rng64) -> Result<Tensor2> {
        if state.len() != self.state_dim() {
            return Err(Error::Dimension(format!("state has {} values, model expects {}", state.len(), self.state_dim())));
        }
        let states = stack_rows(std::iter::repeat(state).take(n), state.len());
        let actions = Array2::from_elem((n, 1), action);
        Ok(DynamicsModel::sample_next(self, &states, &actions, rng))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    /// Training loss averaged over each tenth of the run.
    pub losses: Vec<f64>,
}

/// Fits a baseline on observed transitions.
pub fn train_baseline(variant: Variant, records: &[Transition], cfg: &BaselineConfig) -> Result<(DynamicsModel, BaselineReport)> {
    let observed: Vec<&Transition> = records.iter().filter(|r| r.provenance == Provenance::Observed).collect();
    if observed.is_empty() {
        return Err(Error::Precondition("no observed transitions".into()));
    }
    if cfg.batch_size == 0 || cfg.iterations == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("batch_size, iterations and lr must be positive".into()));
    }
    let d = observed[0].state.len();
    let states = stack_rows(observed.iter().map(|r| r.state.as_slice()), d);
    let actions = stack_rows(observed.iter().map(|r| [r.action]), 1);
    let next = stack_rows(observed.iter().map(|r| r.next_state.as_slice()), d);
    let norm = Normalization::fit(&states, &actions, &next)?;
    let mut rng = seeded(cfg.seed);
    let mut model = DynamicsModel::new(variant, cfg.components, d, &cfg.hidden, norm, &mut rng)?;
    let x = model.inputs(&states, &actions);
    let y = model.norm.delta_of(&states, &next);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let period = (cfg.iterations / 10).max(1);
    let mut report = BaselineReport::default();
    let (mut acc, mut count) = (0.0, 0usize);
    for it in 0..cfg.iterations {
        let frac = it as f64 / cfg.iterations as f64;
        opt.config.lr = cfg.lr * (1.0 - frac * (1.0 - cfg.final_lr_frac));
        let idx: Vec<usize> = if cfg.batch_size >= x.nrows() {
            (0..x.nrows()).collect()
        } else {
            (0..cfg.batch_size).map(|_| rng.gen_range(0..x.nrows())).collect()
        };
        let (xb, yb) = (x.select(Axis(0), &idx), y.select(Axis(0), &idx));
        let out = model.net.forward(&xb, true)?;
        let (loss, grad) = model.loss(&out, &yb);
        if !loss.is_finite() {
            return Err(Error::Diverged { step: it, what: format!("{variant:?} loss {loss}") });
        }
        model.net.zero_grad();
        model.net.backward(&grad);
        opt.step(&mut model.net).map_err(|e| Error::Diverged { step: it, what: e.to_string() })?;
        acc += loss;
        count += 1;
        if (it + 1) % period == 0 || it + 1 == cfg.iterations {
            report.losses.push(acc / count as f64);
            (acc, count) = (0.0, 0);
        }
    }
    Ok((model, report))
}

/// Baseline augmentation: for each observed transition keep `s_t`, apply
/// the same alternative actions `augment` would use, and draw `s'` from the
/// model.
pub fn augment_with_baseline(
    records: &[Transition],
    model: &DynamicsModel,
    model_hash: &str,
    cfg: &AugmentConfig,
    outcome: OutcomeFn,
    rng: &mut Rng64,
) -> Result<AugmentedDataset> {
    cfg.validate()?;
    let mut out = AugmentedDataset { records: records.to_vec(), source_model_hash: model_hash.to_string(), k_cf: cfg.k_cf, skipped: 0 };
    let mut next_id = records.iter().map(|r| r.id + 1).max().unwrap_or(0);
    let mut parents = Vec::new();
    let mut acts = Vec::new();
    for r in records.iter().filter(|r| r.provenance == Provenance::Observed) {
        for a in cfg.actions_for(r.action, rng)? {
            parents.push(r);
            acts.push(a);
        }
    }
    if parents.is_empty() {
        return Ok(out);
    }
    let d = model.state_dim();
    let states = stack_rows(parents.iter().map(|r| r.state.as_slice()), d);
    let actions = Array2::from_shape_vec((acts.len(), 1), acts.clone()).expect("column");
    let drawn = model.sample_next(&states, &actions, rng);
    for (i, (parent, &a)) in parents.iter().zip(&acts).enumerate() {
        let s_next = drawn.row(i).to_vec();
        if s_next.iter().any(|v| !v.is_finite()) {
            out.skipped += 1;
            continue;
        }
        if cfg.keep_fraction < 1.0 && rng.gen::<f64>() >= cfg.keep_fraction {
            continue;
        }
        let (reward, done) = outcome(&s_next);
        out.records.push(Transition {
            id: next_id,
            action: a,
            next_state: s_next,
            reward,
            done,
            provenance: Provenance::Counterfactual,
            parent: Some(parent.id),
            noise: None,
            ..(*parent).clone()
        });
        next_id += 1;
    }
    Ok(out)
}

/// [`augment_with_baseline`] with the cart-pole reward.
pub fn augment_cartpole_baseline(
    records: &[Transition],
    model: &DynamicsModel,
    model_hash: &str,
    cfg: &AugmentConfig,
    rng: &mut Rng64,
) -> Result<AugmentedDataset> {
    augment_with_baseline(records, model, model_hash, cfg, cartpole_outcome, rng)
}
