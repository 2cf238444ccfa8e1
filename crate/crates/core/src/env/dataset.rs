//! Transition records, batch trial generation, windowing and the JSON Lines
//! dataset format.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cartpole::{initial_state, step, CartState, EnvConfig};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::content_hash;
use crate::rng::{child, Rng64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Observed,
    Counterfactual,
}

/// One step `<s_t, a_t, s_{t+1}, r_t>` plus bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Record id, unique within a dataset.
    pub id: u64,
    pub subject_id: u32,
    /// Environment variant the subject was drawn from (gravity index for
    /// the hybrid benchmark). Hidden ground truth; learners never read it.
    #[serde(default)]
    pub group: u32,
    pub trial_id: u32,
    pub t: u32,
    pub state: Vec<f64>,
    pub action: f64,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub provenance: Provenance,
    /// Observed record a counterfactual was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<u64>,
    /// Simulator noise realization `[force, x, x_dot, theta, theta_dot]`,
    /// recorded for replay oracles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<Vec<f64>>,
}

/// Chooses an action level for a state.
pub trait ActionPolicy {
    fn act(&self, state: &[f64], rng: &mut Rng64) -> f64;
}

/// Uniform over the discrete action set.
#[derive(Clone, Debug)]
pub struct UniformRandomPolicy {
    pub levels: Vec<f64>,
}

impl UniformRandomPolicy {
    pub fn new(cfg: &EnvConfig) -> Self {
        Self { levels: cfg.action_set() }
    }
}

impl ActionPolicy for UniformRandomPolicy {
    fn act(&self, _state: &[f64], rng: &mut Rng64) -> f64 {
        self.levels[rng.gen_range(0..self.levels.len())]
    }
}

/// Where a batch of trials sits in the dataset's id spaces.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrialLabels {
    pub first_trial_id: u32,
    pub first_record_id: u64,
    pub group: u32,
}

/// Rolls out `n_trials` episodes of at most `cfg.max_steps` steps. Each
/// trial is its own subject. Trial `i` uses an RNG derived from
/// `(cfg.rng_seed, first_trial_id + i)`, so trials are independent of
/// generation order.
pub fn generate_trials(
    cfg: &EnvConfig,
    n_trials: usize,
    policy: &dyn ActionPolicy,
    labels: TrialLabels,
) -> Result<Vec<Transition>> {
    cfg.validate()?;
    if n_trials == 0 {
        return Err(Error::Precondition("n_trials must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(n_trials * cfg.max_steps);
    let mut next_id = labels.first_record_id;
    for i in 0..n_trials {
        let trial_id = labels.first_trial_id + i as u32;
        let mut rng = child(cfg.rng_seed, trial_id as u64);
        let mut s = initial_state(cfg, &mut rng);
        for t in 0..cfg.max_steps {
            let state = s.to_array().to_vec();
            let a = policy.act(&state, &mut rng);
            let (outcome, noise) = step(&s, a, cfg, &mut rng)?;
            out.push(Transition {
                id: next_id,
                subject_id: trial_id,
                group: labels.group,
                trial_id,
                t: t as u32,
                state,
                action: a,
                next_state: outcome.next.to_array().to_vec(),
                reward: outcome.reward,
                done: outcome.done,
                provenance: Provenance::Observed,
                parent: None,
                noise: Some(noise.to_vec()),
            });
            next_id += 1;
            if outcome.done {
                break;
            }
            s = outcome.next;
        }
    }
    Ok(out)
}

/// Splits records into per-trial sequences ordered by step index.
pub fn trials(records: &[Transition]) -> Vec<Vec<Transition>> {
    let mut map: std::collections::BTreeMap<(u32, u32), Vec<Transition>> = Default::default();
    for r in records.iter().filter(|r| r.provenance == Provenance::Observed) {
        map.entry((r.subject_id, r.trial_id)).or_default().push(r.clone());
    }
    map.into_values()
        .map(|mut v| {
            v.sort_by_key(|r| r.t);
            v
        })
        .collect()
}

/// Sliding windows of `tau` consecutive transitions. A length-`L` sequence
/// yields `max(0, L - tau + 1)` windows in temporal order.
pub fn window(sequence: &[Transition], tau: usize) -> Result<Vec<&[Transition]>> {
    if tau == 0 {
        return Err(Error::Precondition("window size must be at least 1".into()));
    }
    Ok(sequence.windows(tau).collect())
}

/// First `n` trials of a dataset (by trial id); used to cut the nested
/// single-gravity subsets.
pub fn first_trials(records: &[Transition], n: usize) -> Vec<Transition> {
    let mut ids: Vec<u32> = records.iter().map(|r| r.trial_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let keep: std::collections::HashSet<u32> = ids.into_iter().take(n).collect();
    records.iter().filter(|r| keep.contains(&r.trial_id)).cloned().collect()
}

/// Sidecar metadata written next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// `(group, gravity)` pairs.
    pub gravity_map: Vec<(u32, f64)>,
    pub n_records: usize,
    pub content_hash: String,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(content_hash(serde_json::to_string(cfg)?.as_bytes()))
}

pub fn to_jsonl(records: &[Transition]) -> Result<String> {
    let mut s = String::with_capacity(records.len() * 200);
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Writes records as JSON Lines and returns the content hash.
pub fn write_jsonl(path: &Path, records: &[Transition]) -> Result<String> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = to_jsonl(records)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(content_hash(text.as_bytes()))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Transition>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Transition = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            context: format!("{}:{}", path.display(), n + 1),
            detail: e.to_string(),
        })?;
        validate_record(&rec).map_err(|detail| Error::Corrupt { context: format!("{}:{}", path.display(), n + 1), detail })?;
        out.push(rec);
    }
    Ok(out)
}

fn validate_record(r: &Transition) -> std::result::Result<(), String> {
    if r.state.len() != r.next_state.len() {
        return Err("state and next_state lengths differ".into());
    }
    if !r.state.iter().chain(&r.next_state).all(|v| v.is_finite()) || !r.reward.is_finite() {
        return Err("non-finite value".into());
    }
    if !(0.0..=1.0).contains(&r.action) {
        return Err(format!("action {} outside [0, 1]", r.action));
    }
    Ok(())
}

pub fn write_meta(path: &Path, meta: &DatasetMeta) -> Result<()> {
    fs::write(meta_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let p = meta_path(path);
    if !p.exists() {
        return Err(Error::MissingArtifact(p));
    }
    Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
}

/// Convenience for tests and callers that need a cart state view.
pub fn cart_state(r: &Transition) -> Result<CartState> {
    CartState::from_slice(&r.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::cartpole::EnvConfig;

    fn cfg() -> EnvConfig {
        EnvConfig { rng_seed: 17, ..EnvConfig::default() }
    }

    #[test]
    fn one_trial_one_step_gives_one_transition() {
        let c = EnvConfig { max_steps: 1, ..cfg() };
        let recs = generate_trials(&c, 1, &UniformRandomPolicy::new(&c), TrialLabels::default()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].provenance, Provenance::Observed);
    }

    #[test]
    fn zero_trials_is_a_precondition_error() {
        let c = cfg();
        assert!(generate_trials(&c, 0, &UniformRandomPolicy::new(&c), TrialLabels::default()).is_err());
    }

    #[test]
    fn trials_respect_step_cap_and_reward_counts_live_steps() {
        let c = cfg();
        let recs = generate_trials(&c, 30, &UniformRandomPolicy::new(&c), TrialLabels::default()).unwrap();
        for trial in trials(&recs) {
            assert!(trial.len() <= 20);
            let live = trial.iter().filter(|r| !r.done).count() as f64;
            assert_eq!(trial.iter().map(|r| r.reward).sum::<f64>(), live);
            assert!(trial.iter().all(|r| c.action_index(r.action).is_some()));
        }
    }

    #[test]
    fn window_counts() {
        let c = cfg();
        let recs = generate_trials(&c, 1, &UniformRandomPolicy::new(&c), TrialLabels::default()).unwrap();
        let len = recs.len();
        let ws = window(&recs, 5).unwrap();
        assert_eq!(ws.len(), len.saturating_sub(4));
        assert_eq!(window(&recs[..5], 5).unwrap().len(), 1);
        assert!(window(&recs[..3], 5).unwrap().is_empty());
        assert!(window(&recs, 0).is_err());
    }

    #[test]
    fn first_triplets_of_windows_reproduce_prefix() {
        let c = EnvConfig { noise_frac: 0.0, init_range: 0.0, ..cfg() };
        let seq = generate_trials(&c, 1, &UniformRandomPolicy::new(&c), TrialLabels::default()).unwrap();
        assert_eq!(seq.len(), 20);
        let ws = window(&seq, 5).unwrap();
        assert_eq!(ws.len(), 16);
        let firsts: Vec<&Transition> = ws.iter().map(|w| &w[0]).collect();
        for (i, r) in firsts.iter().enumerate() {
            assert_eq!(*r, &seq[i]);
        }
    }

    #[test]
    fn jsonl_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let c = cfg();
        let recs = generate_trials(&c, 3, &UniformRandomPolicy::new(&c), TrialLabels::default()).unwrap();
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
        fs::write(&p, "{\"id\": 1, \"oops\": true}\n").unwrap();
        assert!(matches!(read_jsonl(&p), Err(Error::Corrupt { .. })));
        assert!(matches!(read_jsonl(&dir.path().join("missing.jsonl")), Err(Error::MissingArtifact(_))));
    }
}
