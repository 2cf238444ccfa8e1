use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{subject_windows, PeriodStats, TrainConfig, TrainReport};
use crate::env::{Provenance, Transition};
use crate::error::{Error, Result};
use crate::numerics::loss::{mean_log_one_minus_sigmoid, mean_log_sigmoid};
use crate::numerics::{checkpoint, stack_rows, Adam, AdamConfig, Layer, LstmCell, Mlp, MlpSpec, Module, Tensor2};
use crate::rng::{child, Rng64};
use crate::scm::learned::{hcat, monotonicity_probe, Encoder, EncoderInput, Generator, Normalization, ScmModel};
use crate::scm::StructuralModel;

/// Training rows in standardized form.
struct Prepared {
    states: Tensor2,
    actions: Tensor2,
    next: Tensor2,
    /// `[s_n, a_n]`
    cond: Tensor2,
    delta_n: Tensor2,
    next_n: Tensor2,
    /// One `rows x (d + 1)` tensor per history step (personalized only).
    seq: Option<Vec<Tensor2>>,
    subject: Vec<u32>,
    /// Row indices per subject, for grouped batches.
    groups: Vec<Vec<usize>>,
}

impl Prepared {
    fn new(norm: &Normalization, rows: &[&Transition], seq: Option<Vec<Tensor2>>) -> Result<Self> {
        let d = rows[0].state.len();
        if rows.iter().any(|r| r.state.len() != d || r.next_state.len() != d) {
            return Err(Error::Dimension("inconsistent state dimensions in dataset".into()));
        }
        let states = stack_rows(rows.iter().map(|r| &r.state), d);
        let next = stack_rows(rows.iter().map(|r| &r.next_state), d);
        let actions = Array2::from_shape_fn((rows.len(), 1), |(i, _)| rows[i].action);
        let subject: Vec<u32> = rows.iter().map(|r| r.subject_id).collect();
        let mut by_subject: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (i, s) in subject.iter().enumerate() {
            by_subject.entry(*s).or_default().push(i);
        }
        Ok(Self {
            cond: norm.conditioning(&states, &actions, None),
            delta_n: norm.delta_of(&states, &next),
            next_n: norm.state.apply(&next),
            states,
            actions,
            next,
            seq,
            subject,
            groups: by_subject.into_values().collect(),
        })
    }

    fn len(&self) -> usize {
        self.states.nrows()
    }

    fn seq_rows(&self, idx: &[usize]) -> Option<Vec<Tensor2>> {
        self.seq.as_ref().map(|q| q.iter().map(|t| t.select(Axis(0), idx)).collect())
    }
}

struct Nets {
    g: Generator,
    e: Encoder,
    d: Mlp,
    lstm: Option<LstmCell>,
    opt_g: Adam,
    opt_e: Adam,
    opt_d: Adam,
    opt_l: Adam,
}

#[derive(Default)]
struct StepStats {
    d_loss: f64,
    ge_loss: f64,
    regularizer: f64,
    objective: f64,
    d_real: f64,
    d_fake: f64,
    theta_penalty: f64,
}

fn randn(rows: usize, cols: usize, rng: &mut Rng64) -> Tensor2 {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn vcat(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    concatenate(Axis(0), &[a.view(), b.view()]).expect("equal widths")
}

fn cols(x: &Tensor2, from: usize, to: usize) -> Tensor2 {
    x.slice(s![.., from..to]).to_owned()
}

fn mean_sigmoid(x: &Tensor2) -> f64 {
    x.iter().map(|&l| crate::numerics::activation::sigmoid(l)).sum::<f64>() / x.len().max(1) as f64
}

fn diverged(step: usize, what: impl Into<String>) -> Error {
    Error::Diverged { step, what: what.into() }
}

impl Nets {
    fn model(&self, norm: &Normalization, tau: usize) -> ScmModel {
        ScmModel {
            norm: norm.clone(),
            generator: self.g.clone(),
            encoder: Some(self.e.clone()),
            theta_net: self.lstm.clone(),
            tau,
        }
    }

    fn theta_dim(&self) -> usize {
        self.lstm.as_ref().map_or(0, |l| l.hidden_size())
    }

    /// Splits encoder output into `(s_hat_n, a_hat_n, u_hat)`.
    fn split_enc(&self, enc: &Tensor2) -> (Tensor2, Tensor2, Tensor2) {
        let d = self.g.state_dim();
        (cols(enc, 0, d), cols(enc, d, d + 1), cols(enc, d + 1, 2 * d + 1))
    }

    fn with_theta(x: &Tensor2, theta: Option<&Tensor2>) -> Tensor2 {
        match theta {
            Some(t) => hcat(&[x.clone(), t.clone()]),
            None => x.clone(),
        }
    }

    /// Builds the discriminator batch `[real; fake]`, each row laid out as
    /// `[s, a, theta, u, delta]`.
    #[allow(clippy::too_many_arguments)]
    fn joint(
        s_hat: &Tensor2,
        a_hat: &Tensor2,
        u_hat: &Tensor2,
        delta: &Tensor2,
        cond_full: &Tensor2,
        u: &Tensor2,
        fake: &Tensor2,
        theta: Option<&Tensor2>,
    ) -> Tensor2 {
        let real = Self::with_theta(&hcat(&[s_hat.clone(), a_hat.clone()]), theta);
        let real = hcat(&[real, u_hat.clone(), delta.clone()]);
        let fake = hcat(&[cond_full.clone(), u.clone(), fake.clone()]);
        vcat(&real, &fake)
    }

    fn iteration(&mut self, data: &Prepared, idx: &[usize], cfg: &TrainConfig, step: usize, rng: &mut Rng64) -> Result<StepStats> {
        let b = idx.len();
        let d = self.g.state_dim();
        let k = self.theta_dim();
        let cond = data.cond.select(Axis(0), idx);
        let delta = data.delta_n.select(Axis(0), idx);
        let next_n = data.next_n.select(Axis(0), idx);
        let seq = data.seq_rows(idx);
        let s_n = cols(&cond, 0, d);
        let a_n = cols(&cond, d, d + 1);

        // Discriminator step.
        let theta = match (&self.lstm, &seq) {
            (Some(l), Some(q)) => Some(l.encode(q)?),
            _ => None,
        };
        let cond_full = Self::with_theta(&cond, theta.as_ref());
        let u = randn(b, d, rng);
        let fake = self.g.forward(&cond_full, &u, true)?;
        let feats = self.e.features(&cond_full, &next_n, &delta, theta.as_ref());
        let enc = self.e.net.forward(&feats, true)?;
        let (s_hat, a_hat, u_hat) = self.split_enc(&enc);
        let logits = self.d.forward(&Self::joint(&s_hat, &a_hat, &u_hat, &delta, &cond_full, &u, &fake, theta.as_ref()), true)?;
        let (l_r, l_f) = (logits.slice(s![..b, ..]).to_owned(), logits.slice(s![b.., ..]).to_owned());
        let (log_d_real, g_r) = mean_log_sigmoid(&l_r);
        let (log_1m_d_fake, g_f) = mean_log_one_minus_sigmoid(&l_f);
        let regularizer = ((&s_hat - &s_n).mapv(|v| v * v).sum() + (&a_hat - &a_n).mapv(|v| v * v).sum()) / b as f64;
        let mut st = StepStats {
            d_loss: -(log_d_real + log_1m_d_fake),
            regularizer,
            objective: log_d_real + log_1m_d_fake + cfg.lambda * regularizer,
            d_real: mean_sigmoid(&l_r),
            d_fake: mean_sigmoid(&l_f),
            ..Default::default()
        };
        if !st.objective.is_finite() {
            return Err(diverged(step, "objective"));
        }
        self.d.zero_grad();
        self.d.backward(&vcat(&-g_r, &-g_f));
        self.opt_d.step(&mut self.d).map_err(|e| diverged(step, e.to_string()))?;

        // Generator / encoder step.
        self.g.zero_grad();
        self.e.zero_grad();
        self.d.zero_grad();
        let theta = match (&mut self.lstm, &seq) {
            (Some(l), Some(q)) => {
                l.zero_grad();
                Some(l.forward(q)?)
            }
            _ => None,
        };
        let cond_full = Self::with_theta(&cond, theta.as_ref());
        let u = randn(b, d, rng);
        let fake = self.g.forward(&cond_full, &u, true)?;
        let feats = self.e.features(&cond_full, &next_n, &delta, theta.as_ref());
        let enc = self.e.net.forward(&feats, true)?;
        let (s_hat, a_hat, u_hat) = self.split_enc(&enc);
        let logits = self.d.forward(&Self::joint(&s_hat, &a_hat, &u_hat, &delta, &cond_full, &u, &fake, theta.as_ref()), true)?;
        let (l_r, l_f) = (logits.slice(s![..b, ..]).to_owned(), logits.slice(s![b.., ..]).to_owned());
        let (e_loss, g_r, g_loss, g_f) = if cfg.non_saturating {
            let (lr, gr) = mean_log_one_minus_sigmoid(&l_r);
            let (lf, gf) = mean_log_sigmoid(&l_f);
            (-lr, -gr, -lf, -gf)
        } else {
            let (lr, gr) = mean_log_sigmoid(&l_r);
            let (lf, gf) = mean_log_one_minus_sigmoid(&l_f);
            (lr, gr, lf, gf)
        };
        let grad_in = self.d.backward(&vcat(&g_r, &g_f));
        let (d_real, d_fake) = (grad_in.slice(s![..b, ..]).to_owned(), grad_in.slice(s![b.., ..]).to_owned());
        let (t0, u0) = (d + 1, d + 1 + k);
        let reg_scale = 2.0 * cfg.lambda / b as f64;
        let d_enc = hcat(&[
            cols(&d_real, 0, d) + &((&s_hat - &s_n) * reg_scale),
            cols(&d_real, d, d + 1) + &((&a_hat - &a_n) * reg_scale),
            cols(&d_real, u0, u0 + d),
        ]);
        let d_feats = self.e.net.backward(&d_enc);
        let (d_cond_g, _) = self.g.backward(&cols(&d_fake, u0 + d, u0 + 2 * d));
        let regularizer = ((&s_hat - &s_n).mapv(|v| v * v).sum() + (&a_hat - &a_n).mapv(|v| v * v).sum()) / b as f64;
        st.ge_loss = e_loss + g_loss + cfg.lambda * regularizer;

        if let (Some(lstm), Some(theta)) = (&mut self.lstm, &theta) {
            let feat_t0 = match self.e.input {
                EncoderInput::Transition => d + 1,
                EncoderInput::NextState => d,
            };
            let mut d_theta = cols(&d_real, t0, u0) + &cols(&d_fake, t0, u0) + &cols(&d_cond_g, t0, u0);
            d_theta += &cols(&d_feats, feat_t0, feat_t0 + k);
            let subjects: Vec<u32> = idx.iter().map(|&i| data.subject[i]).collect();
            let (penalty, d_pen) = within_subject_penalty(theta, &subjects, cfg.theta_penalty);
            st.theta_penalty = penalty;
            st.ge_loss += penalty;
            d_theta += &d_pen;
            lstm.backward(&d_theta);
            self.opt_l.step(lstm).map_err(|e| diverged(step, e.to_string()))?;
        }
        if !st.ge_loss.is_finite() {
            return Err(diverged(step, "generator/encoder loss"));
        }
        self.opt_g.step(&mut self.g).map_err(|e| diverged(step, e.to_string()))?;
        self.opt_e.step(&mut self.e).map_err(|e| diverged(step, e.to_string()))?;
        Ok(st)
    }
}

/// `w / B * sum_j |theta_j - mean_{subject(j)}|^2` and its gradient.
fn within_subject_penalty(theta: &Tensor2, subjects: &[u32], w: f64) -> (f64, Tensor2) {
    let b = theta.nrows() as f64;
    let mut grad = Array2::zeros(theta.raw_dim());
    if w == 0.0 {
        return (0.0, grad);
    }
    let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, s) in subjects.iter().enumerate() {
        groups.entry(*s).or_default().push(i);
    }
    let mut total = 0.0;
    for rows in groups.values() {
        let sub = theta.select(Axis(0), rows);
        let mean = sub.mean_axis(Axis(0)).expect("non-empty group");
        for &r in rows {
            let diff = &theta.row(r) - &mean;
            total += diff.dot(&diff);
            grad.row_mut(r).assign(&(diff * (2.0 * w / b)));
        }
    }
    (w * total / b, grad)
}

fn sample_batch(data: &Prepared, cfg: &TrainConfig, grouped: bool, rng: &mut Rng64) -> Vec<usize> {
    let b = cfg.batch_size;
    if !grouped {
        return (0..b).map(|_| rng.gen_range(0..data.len())).collect();
    }
    let per = cfg.windows_per_subject.max(1);
    let mut idx = Vec::with_capacity(b);
    while idx.len() < b {
        let g = &data.groups[rng.gen_range(0..data.groups.len())];
        for _ in 0..per.min(b - idx.len()) {
            idx.push(g[rng.gen_range(0..g.len())]);
        }
    }
    idx
}

/// Held-out `E` then `G` cycle: returns `(rmse of s' in state units, rmse
/// of (s_hat, a_hat) in standardized units)`.
pub fn cycle_rmse(
    model: &ScmModel,
    states: &Tensor2,
    actions: &Tensor2,
    theta: Option<&Tensor2>,
    next: &Tensor2,
) -> Result<(f64, f64)> {
    let enc = model.encoder.as_ref().ok_or_else(|| Error::Precondition("model has no encoder".into()))?;
    let d = model.state_dim();
    let norm = &model.norm;
    let cond = norm.conditioning(states, actions, theta);
    let feats = enc.features(&cond, &norm.state.apply(next), &norm.delta_of(states, next), theta);
    let out = enc.net.infer(&feats);
    let (s_hat_n, a_hat_n, u_hat) = (cols(&out, 0, d), cols(&out, d, d + 1), cols(&out, d + 1, 2 * d + 1));
    let cond_hat = Nets::with_theta(&hcat(&[s_hat_n.clone(), a_hat_n.clone()]), theta);
    let delta = model.generator.infer(&cond_hat, &u_hat)?;
    let pred = norm.state.invert(&s_hat_n) + &norm.delta.invert(&delta);
    let n = next.len().max(1) as f64;
    let cycle = ((&pred - next).mapv(|v| v * v).sum() / n).sqrt();
    let cond_err = (&s_hat_n - &cols(&cond, 0, d)).mapv(|v| v * v).sum() + (&a_hat_n - &cols(&cond, d, d + 1)).mapv(|v| v * v).sum();
    Ok((cycle, (cond_err / (states.nrows().max(1) * (d + 1)) as f64).sqrt()))
}

fn build_nets(d: usize, theta_dim: usize, cfg: &TrainConfig, rng: &mut Rng64) -> Result<Nets> {
    let g = Generator::new(d + 1 + theta_dim, d, &cfg.generator, rng)?;
    let e = Encoder::new(cfg.encoder_input, d, theta_dim, &cfg.encoder_hidden, rng)?;
    let dis = Mlp::new(MlpSpec::new(3 * d + 1 + theta_dim, &cfg.discriminator_hidden, 1), rng)?;
    let lstm = (theta_dim > 0).then(|| LstmCell::new(d + 1, theta_dim, rng));
    Ok(Nets {
        g,
        e,
        d: dis,
        lstm,
        opt_g: Adam::new(AdamConfig::with_lr(cfg.lr_g)),
        opt_e: Adam::new(AdamConfig::with_lr(cfg.lr_g)),
        opt_d: Adam::new(AdamConfig::with_lr(cfg.lr_d)),
        opt_l: Adam::new(AdamConfig::with_lr(cfg.lr_g)),
    })
}

fn run(
    mut nets: Nets,
    norm: Normalization,
    train: Prepared,
    holdout: Option<Prepared>,
    cfg: &TrainConfig,
    tau: usize,
    mut report: TrainReport,
) -> Result<(ScmModel, TrainReport)> {
    let mut rng = child(cfg.seed, 1);
    let grouped = train.seq.is_some();
    let mut acc = PeriodStats::default();
    let mut count = 0usize;
    for it in 1..=cfg.iterations {
        let idx = sample_batch(&train, cfg, grouped, &mut rng);
        let st = nets.iteration(&train, &idx, cfg, it, &mut rng)?;
        acc.d_loss += st.d_loss;
        acc.ge_loss += st.ge_loss;
        acc.regularizer += st.regularizer;
        acc.objective += st.objective;
        acc.d_real += st.d_real;
        acc.d_fake += st.d_fake;
        acc.theta_penalty += st.theta_penalty;
        count += 1;
        if it % cfg.log_every == 0 || it == cfg.iterations {
            let c = count as f64;
            let p = PeriodStats {
                iteration: it,
                d_loss: acc.d_loss / c,
                ge_loss: acc.ge_loss / c,
                regularizer: acc.regularizer / c,
                objective: acc.objective / c,
                d_real: acc.d_real / c,
                d_fake: acc.d_fake / c,
                theta_penalty: acc.theta_penalty / c,
            };
            log::info!(
                "iter {it}: D {:.4} GE {:.4} R {:.4} D(real) {:.3} D(fake) {:.3}",
                p.d_loss,
                p.ge_loss,
                p.regularizer,
                p.d_real,
                p.d_fake
            );
            report.periods.push(p);
            acc = PeriodStats::default();
            count = 0;
            if let Some(path) = &cfg.checkpoint {
                checkpoint::save(path, "scm", &nets.model(&norm, tau))?;
            }
        }
    }

    let model = nets.model(&norm, tau);
    let eval = holdout.as_ref().unwrap_or(&train);
    let rows: Vec<usize> = (0..eval.len().min(5000)).collect();
    let theta = match &model.theta_net {
        Some(l) => Some(l.encode(&eval.seq_rows(&rows).expect("personalized data has sequences"))?),
        None => None,
    };
    let (cycle, cond) = cycle_rmse(
        &model,
        &eval.states.select(Axis(0), &rows),
        &eval.actions.select(Axis(0), &rows),
        theta.as_ref(),
        &eval.next.select(Axis(0), &rows),
    )?;
    report.holdout_cycle_rmse = cycle;
    report.holdout_condition_rmse = cond;
    report.state_scale = norm.state.std.iter().sum::<f64>() / norm.state.dim() as f64;
    report.probe = monotonicity_probe(&model, &norm.state, cfg.probe_count, &mut child(cfg.seed, 2))?;
    if report.probe.violations > 0 {
        log::warn!("monotonicity probe: {} of {} probes violated", report.probe.violations, report.probe.probes);
    }
    Ok((model, report))
}

fn observed(records: &[Transition]) -> Vec<&Transition> {
    records.iter().filter(|r| r.provenance == Provenance::Observed).collect()
}

/// Population model: no context input.
pub fn train_ctrl_g(records: &[Transition], cfg: &TrainConfig) -> Result<(ScmModel, TrainReport)> {
    cfg.validate()?;
    let mut rows = observed(records);
    if rows.is_empty() {
        return Err(Error::Precondition("training needs at least one observed transition".into()));
    }
    let mut rng = child(cfg.seed, 0);
    rows.shuffle(&mut rng);
    let n_hold = if rows.len() >= 10 { (rows.len() as f64 * cfg.holdout_frac) as usize } else { 0 };
    let (hold, train) = rows.split_at(n_hold);

    let d = train[0].state.len();
    let tmp = Prepared::new(&Normalization::identity(d), train, None)?;
    let norm = Normalization::fit(&tmp.states, &tmp.actions, &tmp.next)?;
    let train_p = Prepared::new(&norm, train, None)?;
    let hold_p = if hold.is_empty() { None } else { Some(Prepared::new(&norm, hold, None)?) };
    let nets = build_nets(d, 0, cfg, &mut rng)?;
    let report = TrainReport { train_records: train.len(), holdout_records: hold.len(), ..Default::default() };
    run(nets, norm, train_p, hold_p, cfg, 0, report)
}

/// Personalized model: an LSTM embeds the `tau`-step history ending at each
/// transition into `theta`.
pub fn train_ctrl_p(records: &[Transition], cfg: &TrainConfig) -> Result<(ScmModel, TrainReport)> {
    cfg.validate()?;
    if cfg.tau < 2 {
        return Err(Error::InvalidConfig("tau must be at least 2".into()));
    }
    if cfg.lstm_hidden == 0 {
        return Err(Error::InvalidConfig("lstm_hidden must be positive".into()));
    }
    let (by_subject, skipped) = subject_windows(records, cfg.tau)?;
    let mut windows: Vec<Vec<Transition>> = by_subject.into_values().flatten().collect();
    if windows.is_empty() {
        return Err(Error::Precondition(format!("no subject has {} consecutive steps", cfg.tau)));
    }
    let mut rng = child(cfg.seed, 0);
    windows.shuffle(&mut rng);
    let n_hold = if windows.len() >= 10 { (windows.len() as f64 * cfg.holdout_frac) as usize } else { 0 };
    let (hold, train) = windows.split_at(n_hold);

    let d = train[0][0].state.len();
    fn last(ws: &[Vec<Transition>]) -> Vec<&Transition> {
        ws.iter().map(|w| w.last().expect("non-empty window")).collect()
    }
    let all_train: Vec<&Transition> = train.iter().flatten().collect();
    let tmp = Prepared::new(&Normalization::identity(d), &all_train, None)?;
    let norm = Normalization::fit(&tmp.states, &tmp.actions, &tmp.next)?;
    let nets = build_nets(d, cfg.lstm_hidden, cfg, &mut rng)?;

    let sequences = |ws: &[Vec<Transition>]| -> Result<Vec<Tensor2>> {
        let model = nets.model(&norm, cfg.tau);
        let refs: Vec<&[Transition]> = ws.iter().map(|w| w.as_slice()).collect();
        model.window_sequence(&refs)
    };
    let train_p = Prepared::new(&norm, &last(train), Some(sequences(train)?))?;
    let hold_p = if hold.is_empty() { None } else { Some(Prepared::new(&norm, &last(hold), Some(sequences(hold)?))?) };
    let report = TrainReport {
        train_records: train.len(),
        holdout_records: hold.len(),
        skipped_subjects: skipped,
        ..Default::default()
    };
    run(nets, norm, train_p, hold_p, cfg, cfg.tau, report)
}
