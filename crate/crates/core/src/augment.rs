//! Counterfactual data augmentation: for each observed transition, abduct
//! the noise once and replay the mechanism under alternative actions.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::env::{is_terminal_slice, reward_for, Provenance, Transition};
use crate::error::{Error, Result};
use crate::numerics::{stack_rows, Tensor2};
use crate::rng::Rng64;
use crate::scm::{abduct_batch, sample_alternative_actions, AbductionMethod, ActionSupport, Evidence, StructuralModel};

/// Reward and terminal flag for an outcome state.
pub type OutcomeFn = fn(&[f64]) -> (f64, bool);

pub fn cartpole_outcome(next: &[f64]) -> (f64, bool) {
    (reward_for(next), is_terminal_slice(next))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Counterfactual actions per observed transition. With a discrete
    /// support and `k_cf >= levels - 1`, every alternative level is used
    /// exactly once; otherwise actions are drawn uniformly with replacement.
    pub k_cf: usize,
    pub support: ActionSupport,
    pub method: AbductionMethod,
    /// Fraction of generated records kept, for mixing real and generated
    /// data in other proportions.
    pub keep_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            k_cf: 10,
            support: ActionSupport::Levels(crate::env::action_levels(11)),
            method: AbductionMethod::default(),
            keep_fraction: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::InvalidConfig("keep_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub(crate) fn actions_for(&self, factual: f64, rng: &mut Rng64) -> Result<Vec<f64>> {
        if self.k_cf == 0 {
            return Ok(Vec::new());
        }
        if let ActionSupport::Levels(levels) = &self.support {
            let others: Vec<f64> = levels.iter().copied().filter(|&l| (l - factual).abs() > 1e-12).collect();
            if !others.is_empty() && self.k_cf >= others.len() {
                return Ok(others);
            }
        }
        sample_alternative_actions(&self.support, self.k_cf, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedDataset {
    pub records: Vec<Transition>,
    pub source_model_hash: String,
    pub k_cf: usize,
    /// Observed records whose abduction failed.
    pub skipped: usize,
}

impl AugmentedDataset {
    pub fn observed(&self) -> impl Iterator<Item = &Transition> {
        self.records.iter().filter(|r| r.provenance == Provenance::Observed)
    }

    pub fn counterfactual_count(&self) -> usize {
        self.records.iter().filter(|r| r.provenance == Provenance::Counterfactual).count()
    }
}

/// Model plus settings shared by the population and per-group variants.
pub struct Augmenter<'a> {
    pub model: &'a dyn StructuralModel,
    pub model_hash: String,
    pub cfg: AugmentConfig,
    pub outcome: OutcomeFn,
}

impl<'a> Augmenter<'a> {
    pub fn new(model: &'a dyn StructuralModel, model_hash: impl Into<String>, cfg: AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { model, model_hash: model_hash.into(), cfg, outcome: cartpole_outcome })
    }

    /// Population dataset. `theta` supplies the context row for each
    /// record; it is ignored for models without context.
    pub fn general(
        &self,
        records: &[Transition],
        theta: &dyn Fn(&Transition) -> Option<Vec<f64>>,
        rng: &mut Rng64,
    ) -> Result<AugmentedDataset> {
        let mut next_id = records.iter().map(|r| r.id + 1).max().unwrap_or(0);
        self.augment(records, theta, &mut next_id, rng)
    }

    /// One dataset per cluster, each built from the pooled records of its
    /// subjects with the cluster centroid as context.
    pub fn groups(&self, records: &[Transition], clusters: &ClusterModel, rng: &mut Rng64) -> Result<Vec<AugmentedDataset>> {
        self.groups_with(records, clusters, &|_, c| Some(c.to_vec()), rng)
    }

    /// As [`Augmenter::groups`] with a custom context built from the record
    /// and its cluster centroid.
    pub fn groups_with(
        &self,
        records: &[Transition],
        clusters: &ClusterModel,
        theta: &dyn Fn(&Transition, &[f64]) -> Option<Vec<f64>>,
        rng: &mut Rng64,
    ) -> Result<Vec<AugmentedDataset>> {
        let mut pooled: Vec<Vec<Transition>> = vec![Vec::new(); clusters.k];
        for r in records {
            let c = clusters
                .assignment
                .get(&r.subject_id)
                .ok_or_else(|| Error::Precondition(format!("subject {} has no cluster", r.subject_id)))?;
            pooled[*c].push(r.clone());
        }
        let mut next_id = records.iter().map(|r| r.id + 1).max().unwrap_or(0);
        let mut out = Vec::with_capacity(clusters.k);
        for (c, group) in pooled.iter().enumerate() {
            if group.is_empty() {
                log::warn!("cluster {c} has no records");
            }
            let centroid = &clusters.centroids[c];
            out.push(self.augment(group, &|r| theta(r, centroid), &mut next_id, rng)?);
        }
        Ok(out)
    }

    fn augment(
        &self,
        records: &[Transition],
        theta: &dyn Fn(&Transition) -> Option<Vec<f64>>,
        next_id: &mut u64,
        rng: &mut Rng64,
    ) -> Result<AugmentedDataset> {
        let mut out = AugmentedDataset {
            records: records.to_vec(),
            source_model_hash: self.model_hash.clone(),
            k_cf: self.cfg.k_cf,
            skipped: 0,
        };
        let observed: Vec<&Transition> = records.iter().filter(|r| r.provenance == Provenance::Observed).collect();
        if self.cfg.k_cf == 0 || observed.is_empty() {
            return Ok(out);
        }
        let d = self.model.state_dim();
        let states = stack_rows(observed.iter().map(|r| r.state.clone()), d);
        let actions = stack_rows(observed.iter().map(|r| vec![r.action]), 1);
        let next = stack_rows(observed.iter().map(|r| r.next_state.clone()), d);
        let theta_rows = self.theta_rows(&observed, theta)?;
        let ev = Evidence::new(states, actions, theta_rows, next)?;
        let abd = abduct_batch(self.model, &ev, self.cfg.method)?;

        // one row per (parent, alternative action), parents in input order
        let mut parent_rows = Vec::new();
        let mut cf_actions = Vec::new();
        for (i, r) in observed.iter().enumerate() {
            let acts = self.cfg.actions_for(r.action, rng)?;
            if abd.failed[i].is_some() {
                out.skipped += 1;
                continue;
            }
            for a in acts {
                parent_rows.push(i);
                cf_actions.push(a);
            }
        }
        if parent_rows.is_empty() {
            return Ok(out);
        }
        let pick = |t: &Tensor2| t.select(ndarray::Axis(0), &parent_rows);
        let cf_next = self.model.mechanism(
            &pick(&ev.states),
            &Tensor2::from_shape_vec((cf_actions.len(), 1), cf_actions.clone()).expect("column"),
            ev.theta.as_ref().map(pick).as_ref(),
            &pick(&abd.noise),
        )?;
        for (row, (&i, &a)) in parent_rows.iter().zip(&cf_actions).enumerate() {
            let s_next: Vec<f64> = cf_next.row(row).to_vec();
            if s_next.iter().any(|v| !v.is_finite()) {
                continue;
            }
            if self.cfg.keep_fraction < 1.0 && rng.gen::<f64>() >= self.cfg.keep_fraction {
                continue;
            }
            let parent = observed[i];
            let (reward, done) = (self.outcome)(&s_next);
            out.records.push(Transition {
                id: *next_id,
                action: a,
                next_state: s_next,
                reward,
                done,
                provenance: Provenance::Counterfactual,
                parent: Some(parent.id),
                noise: None,
                ..parent.clone()
            });
            *next_id += 1;
        }
        if out.skipped > 0 {
            log::warn!("{} of {} records skipped: abduction failed", out.skipped, observed.len());
        }
        Ok(out)
    }

    fn theta_rows(&self, observed: &[&Transition], theta: &dyn Fn(&Transition) -> Option<Vec<f64>>) -> Result<Option<Tensor2>> {
        let k = self.model.theta_dim();
        if k == 0 {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(observed.len());
        for r in observed {
            let t = theta(r).ok_or_else(|| Error::Precondition(format!("no theta for record {}", r.id)))?;
            if t.len() != k {
                return Err(Error::Dimension(format!("theta has {} values, model expects {k}", t.len())));
            }
            rows.push(t);
        }
        Ok(Some(stack_rows(rows, k)))
    }
}

/// Mixes shuffled copies of several datasets into one record list.
pub fn pooled_records(sets: &[AugmentedDataset], rng: &mut Rng64) -> Vec<Transition> {
    let mut all: Vec<Transition> = sets.iter().flat_map(|s| s.records.iter().cloned()).collect();
    all.shuffle(rng);
    all
}

/// Groups records by subject, preserving order.
pub fn by_subject(records: &[Transition]) -> BTreeMap<u32, Vec<&Transition>> {
    let mut out: BTreeMap<u32, Vec<&Transition>> = BTreeMap::new();
    for r in records {
        out.entry(r.subject_id).or_default().push(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{
        first_trials, generate_trials, step_with_noise, CartState, EnvConfig, NoiseDraw, TrialLabels, UniformRandomPolicy,
    };
    use crate::rng::seeded;
    use crate::scm::cartpole::CartPoleScm;
    use crate::scm::synthetic::Additive;

    fn sd(n: usize, gravity: f64, group: u32, first: u32) -> (EnvConfig, Vec<Transition>) {
        let cfg = EnvConfig { rng_seed: 11, ..EnvConfig::default() }.with_gravity(gravity);
        let labels = TrialLabels { first_trial_id: first, first_record_id: first as u64 * 1000, group };
        let recs = generate_trials(&cfg, n, &UniformRandomPolicy::new(&cfg), labels).unwrap();
        (cfg, recs)
    }

    fn replay(cfg: &EnvConfig, parent: &Transition, action: f64) -> Vec<f64> {
        let s = CartState::from_slice(&parent.state).unwrap();
        let noise = NoiseDraw::from_slice(parent.noise.as_ref().unwrap()).unwrap();
        step_with_noise(&s, action, cfg, &noise).unwrap().next.to_array().to_vec()
    }

    #[test]
    fn zero_k_returns_input() {
        let (_, recs) = sd(3, 9.8, 0, 0);
        let m = Additive::new(4);
        let aug = Augmenter::new(&m, "h", AugmentConfig { k_cf: 0, ..Default::default() }).unwrap();
        let out = aug.general(&recs, &|_| None, &mut seeded(0)).unwrap();
        assert_eq!(out.records, recs);
    }

    #[test]
    fn ground_truth_counterfactuals_match_simulator_replay() {
        let (cfg, recs) = sd(50, 9.8, 0, 0);
        let recs = first_trials(&recs, 50);
        let scm = CartPoleScm::new(cfg.clone()).unwrap();
        let aug = Augmenter::new(&scm, "truth", AugmentConfig::default()).unwrap();
        let out = aug.general(&recs, &|r| Some(CartPoleScm::theta_for(r, cfg.gravity)), &mut seeded(1)).unwrap();
        assert_eq!(out.skipped, 0);
        assert!(out.records.len() <= recs.len() * 11);
        let by_id: BTreeMap<u64, &Transition> = recs.iter().map(|r| (r.id, r)).collect();
        let mut worst = 0.0f64;
        for r in out.records.iter().filter(|r| r.provenance == Provenance::Counterfactual) {
            let parent = by_id[&r.parent.unwrap()];
            let want = replay(&cfg, parent, r.action);
            for (a, b) in want.iter().zip(&r.next_state) {
                worst = worst.max((a - b).abs());
            }
            assert_eq!(r.reward, reward_for(&r.next_state));
        }
        assert!(worst <= 1e-6, "max replay error {worst}");
        assert_eq!(out.counterfactual_count(), recs.len() * 10);
    }

    #[test]
    fn observed_records_are_kept_unmodified_and_ids_unique() {
        let (cfg, recs) = sd(10, 9.8, 0, 0);
        let scm = CartPoleScm::new(cfg.clone()).unwrap();
        let c = AugmentConfig { k_cf: 3, keep_fraction: 0.5, ..Default::default() };
        let aug = Augmenter::new(&scm, "truth", c).unwrap();
        let out = aug.general(&recs, &|r| Some(CartPoleScm::theta_for(r, cfg.gravity)), &mut seeded(2)).unwrap();
        let obs: Vec<Transition> = out.observed().cloned().collect();
        assert_eq!(obs, recs);
        assert_eq!(out.records.len(), recs.len() + out.counterfactual_count());
        let ids: std::collections::BTreeSet<u64> = out.records.iter().map(|r| r.id).collect();
        assert_eq!(ids.len(), out.records.len());
    }

    #[test]
    fn augmentation_is_deterministic() {
        let (cfg, recs) = sd(5, 9.8, 0, 0);
        let scm = CartPoleScm::new(cfg.clone()).unwrap();
        let c = AugmentConfig { k_cf: 2, ..Default::default() };
        let aug = Augmenter::new(&scm, "truth", c).unwrap();
        let th = |r: &Transition| Some(CartPoleScm::theta_for(r, cfg.gravity));
        let a = aug.general(&recs, &th, &mut seeded(4)).unwrap();
        let b = aug.general(&recs, &th, &mut seeded(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn group_datasets_partition_observed_records_and_replay_per_gravity() {
        let gravities = [5.0, 9.8, 15.0];
        let mut all = Vec::new();
        let mut cfgs = Vec::new();
        for (g, &grav) in gravities.iter().enumerate() {
            let (cfg, recs) = sd(4, grav, g as u32, 100 * g as u32);
            all.extend(recs);
            cfgs.push(cfg);
        }
        let assignment = all.iter().map(|r| (r.subject_id, r.group as usize)).collect();
        let clusters = ClusterModel {
            k: 3,
            centroids: gravities.iter().map(|&g| vec![g]).collect(),
            assignment,
            objective_trace: vec![],
        };
        let scm = CartPoleScm::new(cfgs[0].clone()).unwrap();
        let aug = Augmenter::new(&scm, "truth", AugmentConfig::default()).unwrap();
        let sets = aug
            .groups_with(&all, &clusters, &|r, c| Some(CartPoleScm::theta_for(r, c[0])), &mut seeded(5))
            .unwrap();
        let mut seen: Vec<u64> = sets.iter().flat_map(|s| s.observed().map(|r| r.id)).collect();
        seen.sort();
        let mut want: Vec<u64> = all.iter().map(|r| r.id).collect();
        want.sort();
        assert_eq!(seen, want);
        let by_id: BTreeMap<u64, &Transition> = all.iter().map(|r| (r.id, r)).collect();
        for (g, set) in sets.iter().enumerate() {
            for r in set.records.iter().filter(|r| r.parent.is_some()) {
                let parent = by_id[&r.parent.unwrap()];
                assert_eq!(parent.group as usize, g);
                let want = replay(&cfgs[g], parent, r.action);
                for (a, b) in want.iter().zip(&r.next_state) {
                    assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn unassigned_subject_is_an_error() {
        let (_, recs) = sd(2, 9.8, 0, 0);
        let clusters = ClusterModel { k: 1, centroids: vec![vec![0.0]], assignment: BTreeMap::new(), objective_trace: vec![] };
        let m = Additive::new(4);
        let aug = Augmenter::new(&m, "h", AugmentConfig::default()).unwrap();
        assert!(aug.groups(&recs, &clusters, &mut seeded(0)).is_err());
    }
}
