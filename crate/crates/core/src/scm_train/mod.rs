//! Adversarial learning of the SCM.
//!
//! A generator `G(s, a, [theta], u)`, an encoder `E` that maps evidence to
//! `(s_hat, a_hat, u_hat)` and a discriminator `D` over joint samples are
//! trained on the minimax objective
//!
//! ```text
//! V = E_real[log D(s_hat, a_hat, u_hat, s')] + E_fake[log(1 - D(s, a, u, G(s, a, u)))]
//!     + lambda * R,     R = |(s_hat, a_hat) - (s, a)|^2
//! ```
//!
//! `D` maximizes the first two terms; `G` and `E` minimize all three. In
//! the personalized variant an LSTM turns the `tau`-step history ending at
//! each transition into `theta`, which conditions `G`, `E` and `D`, and a
//! penalty pulls embeddings of the same subject together.

mod trainer;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::env::{trials, window, Transition};
use crate::error::{Error, Result};
use crate::scm::learned::{EncoderInput, GeneratorSpec, ProbeReport, ScmModel};

pub use trainer::{cycle_rmse, train_ctrl_g, train_ctrl_p};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub generator: GeneratorSpec,
    pub encoder_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub encoder_input: EncoderInput,
    /// Weight of the `(s, a)` reconstruction term.
    pub lambda: f64,
    pub lr_d: f64,
    pub lr_g: f64,
    pub batch_size: usize,
    /// Alternating (D step, G/E step) pairs.
    pub iterations: usize,
    /// Statistics are averaged and recorded every `log_every` iterations.
    pub log_every: usize,
    /// `G` and `E` minimize `-log D` terms instead of `log(1 - D)`; the
    /// logged objective is unchanged.
    pub non_saturating: bool,
    pub holdout_frac: f64,
    pub probe_count: usize,
    pub seed: u64,
    /// History length for the personalized model.
    pub tau: usize,
    pub lstm_hidden: usize,
    /// Weight of the within-subject variance penalty on `theta`.
    pub theta_penalty: f64,
    /// Windows drawn per subject in a personalized batch.
    pub windows_per_subject: usize,
    /// Where the last finite model is written after every logging period.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::default(),
            encoder_hidden: vec![600, 600, 400, 200],
            discriminator_hidden: vec![600, 600, 400, 200],
            encoder_input: EncoderInput::Transition,
            lambda: 1.0,
            lr_d: 1e-4,
            lr_g: 1e-4,
            batch_size: 256,
            iterations: 20_000,
            log_every: 500,
            non_saturating: true,
            holdout_frac: 0.1,
            probe_count: 1000,
            seed: 0,
            tau: 5,
            lstm_hidden: 200,
            theta_penalty: 1.0,
            windows_per_subject: 4,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.iterations == 0 || self.log_every == 0 {
            return bad("iterations and log_every must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return bad("holdout_frac must be in [0, 1)");
        }
        if self.lambda < 0.0 || self.theta_penalty < 0.0 {
            return bad("lambda and theta_penalty must be non-negative");
        }
        if !(self.lr_d > 0.0 && self.lr_g > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// Averages over one logging period.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodStats {
    pub iteration: usize,
    /// Discriminator loss `-(log D(real) + log(1 - D(fake)))`.
    pub d_loss: f64,
    /// Generator plus encoder loss as optimized.
    pub ge_loss: f64,
    pub regularizer: f64,
    /// `V(D, G, E)` including `lambda * R`.
    pub objective: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub theta_penalty: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub periods: Vec<PeriodStats>,
    /// RMSE of the `E` then `G` cycle on held-out triplets, state units.
    pub holdout_cycle_rmse: f64,
    /// RMSE of `(s_hat, a_hat)` against `(s, a)` on held-out triplets, in
    /// standardized units.
    pub holdout_condition_rmse: f64,
    /// Mean per-dimension standard deviation of the training states.
    pub state_scale: f64,
    pub probe: ProbeReport,
    pub train_records: usize,
    pub holdout_records: usize,
    /// Subjects skipped for having fewer than `tau` steps.
    pub skipped_subjects: usize,
}

impl TrainReport {
    pub fn last(&self) -> Option<&PeriodStats> {
        self.periods.last()
    }
}

/// Per-subject sliding windows over observed trials. Subjects whose trials
/// are all shorter than `tau` are left out and counted.
pub fn subject_windows(records: &[Transition], tau: usize) -> Result<(BTreeMap<u32, Vec<Vec<Transition>>>, usize)> {
    let mut out: BTreeMap<u32, Vec<Vec<Transition>>> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for trial in trials(records) {
        let subject = trial[0].subject_id;
        seen.insert(subject);
        for w in window(&trial, tau)? {
            out.entry(subject).or_default().push(w.to_vec());
        }
    }
    let skipped = seen.len() - out.len();
    if skipped > 0 {
        log::warn!("{skipped} subject(s) have fewer than {tau} steps and were skipped");
    }
    Ok((out, skipped))
}

/// Mean `theta_hat` over each subject's windows.
pub fn subject_thetas(model: &ScmModel, records: &[Transition]) -> Result<BTreeMap<u32, Vec<f64>>> {
    let (windows, _) = subject_windows(records, model.tau)?;
    let mut out = BTreeMap::new();
    for (subject, ws) in windows {
        let refs: Vec<&[Transition]> = ws.iter().map(|w| w.as_slice()).collect();
        let thetas = model.estimate_theta_batch(&refs)?;
        let mean = thetas.mean_axis(ndarray::Axis(0)).expect("at least one window");
        out.insert(subject, mean.to_vec());
    }
    Ok(out)
}

/// Mean pairwise Euclidean distances `(within, between)` of labelled
/// points.
pub fn separation(points: &[(u32, Vec<f64>)]) -> (f64, f64) {
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i].1.iter().zip(&points[j].1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if points[i].0 == points[j].0 {
                within += d;
                nw += 1;
            } else {
                between += d;
                nb += 1;
            }
        }
    }
    (within / nw.max(1) as f64, between / nb.max(1) as f64)
}
