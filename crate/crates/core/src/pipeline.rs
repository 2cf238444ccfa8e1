//! Experiment plumbing shared by the command-line driver and the
//! end-to-end tests: dataset generation for the benchmarks, the
//! train / augment / policy stages for each method, simulator evaluation
//! and metric tables.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, AugmentedDataset, Augmenter};
use crate::baselines::{augment_cartpole_baseline, train_baseline, BaselineConfig, DynamicsModel, Variant};
use crate::cluster::{fit_kmeans, ClusterModel};
use crate::env::{generate_trials, EnvConfig, Transition, TrialLabels, UniformRandomPolicy, HD_GRAVITIES};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::model_hash;
use crate::policy::{
    evaluate_policy, sup_norm, tabular_q_learning, train_d3qn, value_iteration, AugmentedStream, D3qnConfig, DuelingNet,
    FiniteMdp, Schedule,
};
use crate::rng::{child, derive_seed};
use crate::scm::learned::ScmModel;
use crate::scm_train::{subject_thetas, train_ctrl_g, train_ctrl_p, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Sd,
    Hd,
    SyntheticScm,
    FiniteMdp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CtrlG,
    CtrlP,
    BaseD,
    BaseS,
    BaseM,
    RawD3qn,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::CtrlG, Method::CtrlP, Method::BaseD, Method::BaseS, Method::BaseM, Method::RawD3qn];

    pub fn name(self) -> &'static str {
        match self {
            Method::CtrlG => "ctrl_g",
            Method::CtrlP => "ctrl_p",
            Method::BaseD => "base_d",
            Method::BaseS => "base_s",
            Method::BaseM => "base_m",
            Method::RawD3qn => "raw_d3qn",
        }
    }

    pub fn baseline_variant(self) -> Option<Variant> {
        match self {
            Method::BaseD => Some(Variant::D),
            Method::BaseS => Some(Variant::S),
            Method::BaseM => Some(Variant::M),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Settings for the tabular convergence suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularSuiteConfig {
    pub n_mdps: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma: f64,
    pub updates: usize,
    pub schedule: Schedule,
}

impl Default for TabularSuiteConfig {
    fn default() -> Self {
        Self {
            n_mdps: 20,
            max_states: 10,
            max_actions: 4,
            gamma: 0.5,
            updates: 30_000_000,
            schedule: Schedule::Power { c: 1.0, p: 0.7, hold: 100 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub method: Method,
    /// Nested single-gravity subsets (trials).
    pub n_trials: Vec<usize>,
    /// Trials per gravity for the hybrid benchmark.
    pub hd_trials: usize,
    pub env: EnvConfig,
    /// Training seeds; each produces one metric row per setting.
    pub seeds: Vec<u64>,
    pub scm: TrainConfig,
    /// Number of k-means clusters for the personalized model.
    pub k: usize,
    pub augment: AugmentConfig,
    pub baseline: BaselineConfig,
    pub d3qn: D3qnConfig,
    pub eval_trials: usize,
    pub eval_horizon: usize,
    pub eval_seed: u64,
    /// Random-action trials used to place a test environment in a cluster.
    pub probe_trials: usize,
    pub tabular: TabularSuiteConfig,
    /// Size of the synthetic SCM dataset.
    pub synthetic_records: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: Benchmark::Sd,
            method: Method::CtrlG,
            n_trials: vec![50, 100, 150, 200, 250],
            hd_trials: 50,
            env: EnvConfig::default(),
            seeds: vec![0, 1, 2],
            scm: TrainConfig::default(),
            k: HD_GRAVITIES.len(),
            augment: AugmentConfig::default(),
            baseline: BaselineConfig::default(),
            d3qn: D3qnConfig::default(),
            eval_trials: crate::policy::DEFAULT_EVAL_TRIALS,
            eval_horizon: crate::policy::DEFAULT_HORIZON,
            eval_seed: 12_345,
            probe_trials: 5,
            tabular: TabularSuiteConfig::default(),
            synthetic_records: 10_000,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        if self.n_trials.is_empty() || self.n_trials.contains(&0) {
            return Err(Error::InvalidConfig("n_trials must list positive subset sizes".into()));
        }
        if self.k == 0 || self.eval_trials == 0 || self.eval_horizon == 0 || self.probe_trials == 0 {
            return Err(Error::InvalidConfig("k, eval_trials, eval_horizon and probe_trials must be positive".into()));
        }
        self.env.validate()?;
        self.scm.validate()?;
        self.augment.validate()?;
        self.d3qn.validate()
    }

    pub fn max_trials(&self) -> usize {
        self.n_trials.iter().copied().max().unwrap_or(0)
    }

    /// Per-stage seeds derived from one training seed.
    pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
        derive_seed(seed, stage as u64)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Stage {
    Model = 1,
    Augment = 2,
    Policy = 3,
}

/// Single-gravity dataset with `max_trials` trials of random actions.
pub fn generate_sd(cfg: &ExperimentConfig) -> Result<Vec<Transition>> {
    generate_trials(&cfg.env, cfg.max_trials(), &UniformRandomPolicy::new(&cfg.env), TrialLabels::default())
}

/// `hd_trials` trials per gravity; subjects are trials and `group` is the
/// gravity index.
pub fn generate_hd(cfg: &ExperimentConfig) -> Result<(Vec<Transition>, Vec<(u32, f64)>)> {
    let mut out = Vec::new();
    let mut map = Vec::new();
    for (g, &gravity) in HD_GRAVITIES.iter().enumerate() {
        let env = cfg.env.clone().with_gravity(gravity);
        let labels = TrialLabels {
            first_trial_id: (g * cfg.hd_trials) as u32,
            first_record_id: out.len() as u64,
            group: g as u32,
        };
        out.extend(generate_trials(&env, cfg.hd_trials, &UniformRandomPolicy::new(&env), labels)?);
        map.push((g as u32, gravity));
    }
    Ok((out, map))
}

/// What the model stage produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArtifact {
    Scm { model: ScmModel, report: TrainReport, clusters: Option<ClusterModel> },
    Baseline { model: DynamicsModel },
    /// Raw D3QN trains on the data as-is.
    None,
}

impl ModelArtifact {
    pub fn hash(&self) -> Result<String> {
        model_hash(self)
    }
}

pub fn train_model(method: Method, records: &[Transition], cfg: &ExperimentConfig, seed: u64) -> Result<ModelArtifact> {
    let model_seed = ExperimentConfig::stage_seed(seed, Stage::Model);
    match method {
        Method::RawD3qn => Ok(ModelArtifact::None),
        Method::CtrlG => {
            let (model, report) = train_ctrl_g(records, &TrainConfig { seed: model_seed, ..cfg.scm.clone() })?;
            Ok(ModelArtifact::Scm { model, report, clusters: None })
        }
        Method::CtrlP => {
            let (model, report) = train_ctrl_p(records, &TrainConfig { seed: model_seed, ..cfg.scm.clone() })?;
            let thetas = subject_thetas(&model, records)?;
            let clusters = fit_kmeans(&thetas, cfg.k, model_seed)?;
            Ok(ModelArtifact::Scm { model, report, clusters: Some(clusters) })
        }
        Method::BaseD | Method::BaseS | Method::BaseM => {
            let variant = method.baseline_variant().expect("baseline method");
            let (model, _) = train_baseline(variant, records, &BaselineConfig { seed: model_seed, ..cfg.baseline.clone() })?;
            Ok(ModelArtifact::Baseline { model })
        }
    }
}

/// Augmented datasets: one for population methods, one per cluster for the
/// personalized model.
pub fn augment_stage(artifact: &ModelArtifact, records: &[Transition], cfg: &ExperimentConfig, seed: u64) -> Result<Vec<AugmentedDataset>> {
    let mut rng = child(ExperimentConfig::stage_seed(seed, Stage::Augment), 0);
    let hash = artifact.hash()?;
    match artifact {
        ModelArtifact::None => {
            Ok(vec![AugmentedDataset { records: records.to_vec(), source_model_hash: hash, k_cf: 0, skipped: 0 }])
        }
        ModelArtifact::Baseline { model } => Ok(vec![augment_cartpole_baseline(records, model, &hash, &cfg.augment, &mut rng)?]),
        ModelArtifact::Scm { model, clusters: None, .. } => {
            let aug = Augmenter::new(model, hash, cfg.augment.clone())?;
            Ok(vec![aug.general(records, &|_| None, &mut rng)?])
        }
        ModelArtifact::Scm { model, clusters: Some(clusters), .. } => {
            let aug = Augmenter::new(model, hash, cfg.augment.clone())?;
            aug.groups(records, clusters, &mut rng)
        }
    }
}

/// One D3QN per dataset. An empty group gets no policy.
pub fn policy_stage(datasets: &[AugmentedDataset], cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Option<DuelingNet>>> {
    let levels = cfg.env.action_set();
    datasets
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            if ds.records.is_empty() {
                return Ok(None);
            }
            let c = D3qnConfig { seed: derive_seed(ExperimentConfig::stage_seed(seed, Stage::Policy), i as u64), ..cfg.d3qn.clone() };
            Ok(Some(train_d3qn(&ds.records, &levels, &c)?.0))
        })
        .collect()
}

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub benchmark: String,
    pub n_trial: usize,
    pub seed: u64,
    pub cumulative_reward: f64,
    pub mean_q: f64,
}

pub const METRICS_HEADER: &str = "method,benchmark,n_trial,seed,cumulative_reward,mean_q";

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R, context: &str) -> Result<Vec<MetricRow>> {
    let corrupt = |detail: String| Error::Corrupt { context: context.to_string(), detail };
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(corrupt(format!("unexpected header `{header}`")));
    }
    r.deserialize().map(|row| row.map_err(|e| corrupt(e.to_string()))).collect()
}

/// Mean and population standard deviation across seeds of one
/// `(method, benchmark, n_trial)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub benchmark: String,
    pub n_trial: usize,
    pub runs: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub mean_q: f64,
}

pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(String, String, usize), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.method.clone(), r.benchmark.clone(), r.n_trial)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((method, benchmark, n_trial), rs)| {
            let rewards: Vec<f64> = rs.iter().map(|r| r.cumulative_reward).collect();
            let qs: Vec<f64> = rs.iter().map(|r| r.mean_q).collect();
            SummaryRow {
                method,
                benchmark,
                n_trial,
                runs: rs.len(),
                reward_mean: crate::stats::mean(&rewards),
                reward_std: crate::stats::std_dev(&rewards),
                mean_q: crate::stats::mean(&qs),
            }
        })
        .collect()
}

/// Benchmark label for a per-gravity evaluation.
pub fn hd_label(gravity: f64) -> String {
    format!("hd_g{gravity}")
}

/// Evaluates trained policies. Single-gravity runs use the first policy in
/// the training environment; hybrid runs evaluate every gravity, choosing a
/// group policy from a short random-action probe when clusters exist.
pub fn evaluate_stage(
    method: Method,
    benchmark: Benchmark,
    artifact: &ModelArtifact,
    policies: &[Option<DuelingNet>],
    n_trial: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let row = |bench: String, m: crate::policy::EvalMetrics| MetricRow {
        method: method.name().to_string(),
        benchmark: bench,
        n_trial,
        seed,
        cumulative_reward: m.mean_reward,
        mean_q: m.mean_q,
    };
    match benchmark {
        Benchmark::Sd => {
            let net = policies.first().and_then(Option::as_ref).ok_or_else(|| Error::Precondition("no policy".into()))?;
            let m = evaluate_policy(net, Some(net), &cfg.env, cfg.eval_trials, cfg.eval_horizon, cfg.eval_seed)?;
            Ok(vec![row("sd".into(), m)])
        }
        Benchmark::Hd => {
            let mut rows = Vec::new();
            for (g, &gravity) in HD_GRAVITIES.iter().enumerate() {
                let env = cfg.env.clone().with_gravity(gravity);
                let pick = match artifact {
                    ModelArtifact::Scm { model, clusters: Some(clusters), .. } => probe_cluster(model, clusters, &env, cfg, g)?,
                    _ => 0,
                };
                let net = policies
                    .get(pick)
                    .and_then(Option::as_ref)
                    .or_else(|| policies.iter().flatten().next())
                    .ok_or_else(|| Error::Precondition("no policy".into()))?;
                let m = evaluate_policy(net, Some(net), &env, cfg.eval_trials, cfg.eval_horizon, derive_seed(cfg.eval_seed, g as u64))?;
                rows.push(row(hd_label(gravity), m));
            }
            Ok(rows)
        }
        other => Err(Error::InvalidConfig(format!("{other:?} has no simulator evaluation"))),
    }
}

/// Cluster of a fresh subject observed through `probe_trials` random-action
/// trials in `env`.
pub fn probe_cluster(model: &ScmModel, clusters: &ClusterModel, env: &EnvConfig, cfg: &ExperimentConfig, stream: usize) -> Result<usize> {
    let probe_env = EnvConfig { rng_seed: derive_seed(cfg.eval_seed, 1000 + stream as u64), ..env.clone() };
    let mut records = generate_trials(&probe_env, cfg.probe_trials, &UniformRandomPolicy::new(env), TrialLabels::default())?;
    // one subject
    for r in &mut records {
        r.subject_id = 0;
    }
    let windows: Vec<Vec<Transition>> = crate::env::trials(&records)
        .iter()
        .flat_map(|t| t.windows(model.tau).map(|w| w.to_vec()).collect::<Vec<_>>())
        .collect();
    if windows.is_empty() {
        return Err(Error::Precondition(format!("probe trials shorter than tau = {}", model.tau)));
    }
    let refs: Vec<&[Transition]> = windows.iter().map(|w| w.as_slice()).collect();
    let theta = model.estimate_theta_batch(&refs)?.mean_axis(ndarray::Axis(0)).expect("windows").to_vec();
    clusters.assign(&theta)
}

/// Runs every stage in memory for one method, subset size and seed.
pub fn run_method(
    method: Method,
    benchmark: Benchmark,
    records: &[Transition],
    n_trial: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let artifact = train_model(method, records, cfg, seed)?;
    let data = augment_stage(&artifact, records, cfg, seed)?;
    let policies = policy_stage(&data, cfg, seed)?;
    evaluate_stage(method, benchmark, &artifact, &policies, n_trial, cfg, seed)
}

/// Random MDPs for the tabular suite; MDP `i` draws its size and kernel from
/// `child(seed, i)`.
pub fn random_mdps(cfg: &TabularSuiteConfig, seed: u64) -> Result<Vec<FiniteMdp>> {
    use rand::Rng;
    if cfg.max_states < 2 || cfg.max_actions < 2 {
        return Err(Error::InvalidConfig("random MDPs need at least 2 states and 2 actions".into()));
    }
    (0..cfg.n_mdps as u64)
        .map(|i| {
            let mut rng = child(seed, i);
            let ns = rng.gen_range(2..=cfg.max_states);
            let na = rng.gen_range(2..=cfg.max_actions);
            FiniteMdp::random(ns, na, cfg.gamma, &mut rng)
        })
        .collect()
}

/// One row of the tabular suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularResult {
    pub mdp: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub sup_error: f64,
    pub min_visits: u64,
}

/// Sup-norm error of tabular Q-learning on exhaustively augmented streams
/// against value iteration. Stream `i` uses `child(stream_seed, i)`.
pub fn tabular_suite(mdps: &[FiniteMdp], cfg: &TabularSuiteConfig, stream_seed: u64) -> Result<Vec<TabularResult>> {
    cfg.schedule.validate()?;
    mdps.iter()
        .enumerate()
        .map(|(i, mdp)| {
            let q_star = value_iteration(mdp, 1e-10)?;
            let stream = AugmentedStream::new(mdp, 0, child(stream_seed, i as u64));
            let q = tabular_q_learning(stream, mdp.n_states, mdp.n_actions, mdp.gamma, &cfg.schedule, cfg.updates)?;
            Ok(TabularResult {
                mdp: i,
                n_states: mdp.n_states,
                n_actions: mdp.n_actions,
                sup_error: sup_norm(&(&q.values - &q_star)),
                min_visits: q.visits.iter().copied().min().unwrap_or(0),
            })
        })
        .collect()
}
