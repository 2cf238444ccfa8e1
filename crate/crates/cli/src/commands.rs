use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cfrl::augment::AugmentedDataset;
use cfrl::env::dataset::{
    first_trials, read_jsonl, to_jsonl, write_jsonl, write_meta, DatasetMeta, DATASET_FORMAT_VERSION,
};
use cfrl::env::{Transition, STATE_DIM};
use cfrl::numerics::checkpoint;
use cfrl::pipeline::{
    augment_stage, evaluate_stage, generate_hd, generate_sd, policy_stage, random_mdps, read_metrics_csv, summarize,
    tabular_suite, train_model, write_metrics_csv, Benchmark, ExperimentConfig, MetricRow, ModelArtifact, SummaryRow,
    TabularResult,
};
use cfrl::policy::FiniteMdp;
use cfrl::rng::{child, derive_seed};
use cfrl::scm::synthetic::{sample_triplets, NonlinearMonotone};
use cfrl::Error;
use log::info;
use serde::Serialize;

use crate::manifest::{RunManifest, MANIFEST_FILE};

const MODEL_KIND: &str = "model";
const POLICY_KIND: &str = "d3qn";
const MDPS_KIND: &str = "finite-mdps";

pub fn benchmark_name(b: Benchmark) -> &'static str {
    match b {
        Benchmark::Sd => "sd",
        Benchmark::Hd => "hd",
        Benchmark::SyntheticScm => "synthetic_scm",
        Benchmark::FiniteMdp => "finite_mdp",
    }
}

fn data_file(b: Benchmark) -> &'static str {
    match b {
        Benchmark::Sd => "data/sd.jsonl",
        Benchmark::Hd => "data/hd.jsonl",
        Benchmark::SyntheticScm => "data/synthetic.jsonl",
        Benchmark::FiniteMdp => "data/mdps.json",
    }
}

/// Subset sizes the model and policy stages iterate over.
pub fn settings(cfg: &ExperimentConfig) -> Vec<usize> {
    match cfg.benchmark {
        Benchmark::Sd => cfg.n_trials.clone(),
        Benchmark::Hd => vec![cfg.hd_trials],
        Benchmark::SyntheticScm => vec![cfg.synthetic_records],
        Benchmark::FiniteMdp => vec![cfg.tabular.n_mdps],
    }
}

fn run_key(cfg: &ExperimentConfig, n: usize, seed: u64) -> String {
    format!("{}_n{n}_s{seed}", cfg.method)
}

/// Files of one run under `prefix`: `<key>.<ext>` or `<key>_c<i>.<ext>`,
/// ordered by cluster index.
fn run_files(m: &RunManifest, prefix: &str, key: &str) -> Vec<String> {
    let stem = format!("{prefix}{key}");
    let mut out: Vec<(usize, String)> = m
        .with_prefix(&stem)
        .into_iter()
        .filter_map(|rel| {
            let rest = &rel[stem.len()..];
            if rest.starts_with('.') {
                return Some((0, rel));
            }
            let idx = rest.strip_prefix("_c")?.split('.').next()?.parse().ok()?;
            Some((idx, rel))
        })
        .collect();
    out.sort();
    out.into_iter().map(|(_, r)| r).collect()
}

pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub seeds: Vec<u64>,
}

impl Run {
    /// Opens the run in `dir`. A `config`, if given, must describe the same
    /// experiment as the manifest; `seed` restricts the work to one seed.
    pub fn open(dir: &Path, config: Option<ExperimentConfig>, seed: Option<u64>) -> Result<Self> {
        let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
        if let Some(mut cfg) = config {
            cfg.seeds.clone_from(&manifest.config.seeds);
            if cfrl::env::dataset::config_hash(&cfg)? != manifest.config_hash {
                bail!("--config differs from the config recorded in {}", dir.join(MANIFEST_FILE).display());
            }
        }
        let seeds = match seed {
            None => manifest.config.seeds.clone(),
            Some(s) if manifest.config.seeds.contains(&s) => vec![s],
            Some(s) => bail!("seed {s} is not part of this run (seeds {:?})", manifest.config.seeds),
        };
        Ok(Self { dir: dir.to_path_buf(), manifest, seeds })
    }

    fn cfg(&self) -> &ExperimentConfig {
        &self.manifest.config
    }

    fn save(&mut self, stage: &str, started: Instant) -> Result<()> {
        self.manifest.timings.insert(stage.to_string(), started.elapsed().as_secs_f64());
        self.manifest.save(&self.dir)
    }

    fn records(&self, n: usize) -> Result<(String, Vec<Transition>)> {
        let rel = data_file(self.cfg().benchmark).to_string();
        let all = read_jsonl(&self.manifest.require(&self.dir, &rel)?)?;
        let recs = match self.cfg().benchmark {
            Benchmark::Sd => first_trials(&all, n),
            _ => all,
        };
        if recs.is_empty() {
            bail!("dataset {rel} has no records for n_trial = {n}");
        }
        Ok((rel, recs))
    }

    fn model(&self, key: &str) -> Result<(String, ModelArtifact)> {
        let rel = format!("models/{key}.json");
        let path = self.manifest.require(&self.dir, &rel)?;
        Ok((rel, checkpoint::load(&path, MODEL_KIND)?))
    }

    /// Drops everything derived from the run `key` at or after `stage`.
    fn invalidate(&mut self, key: &str, stages: &[&str]) {
        for stage in stages {
            for rel in run_files(&self.manifest, stage, key) {
                self.manifest.artifacts.remove(&rel);
            }
        }
        for rel in std::mem::take(&mut self.manifest.metrics) {
            self.manifest.artifacts.remove(&rel);
        }
    }
}

pub fn gen_data(cfg: ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let mut m = RunManifest::new(cfg.clone())?;
    let rel = data_file(cfg.benchmark);
    let path = dir.join(rel);
    let (records, gravity_map) = match cfg.benchmark {
        Benchmark::Sd => (generate_sd(&cfg)?, vec![(0, cfg.env.gravity)]),
        Benchmark::Hd => generate_hd(&cfg)?,
        Benchmark::SyntheticScm => {
            let model = NonlinearMonotone::new(STATE_DIM);
            let mut rng = child(cfg.env.rng_seed, 0);
            (sample_triplets(&model, cfg.synthetic_records, 1.0, &cfg.env.action_set(), &mut rng)?, vec![])
        }
        Benchmark::FiniteMdp => {
            let mdps = random_mdps(&cfg.tabular, cfg.env.rng_seed)?;
            m.put(dir, rel, "mdps", checkpoint::to_json(MDPS_KIND, &mdps)?.as_bytes(), vec![])?;
            info!("wrote {} random MDPs to {}", mdps.len(), path.display());
            m.timings.insert("gen-data".into(), started.elapsed().as_secs_f64());
            m.save(dir)?;
            return Ok(m);
        }
    };
    let content_hash = write_jsonl(&path, &records)?;
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        config_hash: m.config_hash.clone(),
        seed: cfg.env.rng_seed,
        gravity_map,
        n_records: records.len(),
        content_hash,
    };
    write_meta(&path, &meta)?;
    m.register(dir, rel, "dataset", vec![])?;
    m.register(dir, &format!("{rel}.meta.json"), "dataset-meta", vec![rel.to_string()])?;
    info!("wrote {} transitions to {}", records.len(), path.display());
    m.timings.insert("gen-data".into(), started.elapsed().as_secs_f64());
    m.save(dir)?;
    Ok(m)
}

pub fn train(run: &mut Run) -> Result<()> {
    let started = Instant::now();
    let cfg = run.cfg().clone();
    if cfg.benchmark == Benchmark::FiniteMdp {
        bail!("the finite_mdp benchmark has no model stage; run `policy`");
    }
    for n in settings(&cfg) {
        let (data_rel, recs) = run.records(n)?;
        for &seed in &run.seeds.clone() {
            let key = run_key(&cfg, n, seed);
            info!("training {key} on {} transitions", recs.len());
            let artifact = train_model(cfg.method, &recs, &cfg, seed)?;
            run.invalidate(&key, &["augmented/", "policies/"]);
            let rel = format!("models/{key}.json");
            run.manifest.put(&run.dir, &rel, MODEL_KIND, checkpoint::to_json(MODEL_KIND, &artifact)?.as_bytes(), vec![data_rel.clone()])?;
        }
    }
    run.save("train", started)
}

pub fn augment(run: &mut Run) -> Result<()> {
    let started = Instant::now();
    let cfg = run.cfg().clone();
    if cfg.benchmark == Benchmark::FiniteMdp {
        bail!("the finite_mdp benchmark augments its transition stream inside `policy`");
    }
    for n in settings(&cfg) {
        let (data_rel, recs) = run.records(n)?;
        for &seed in &run.seeds.clone() {
            let key = run_key(&cfg, n, seed);
            let (model_rel, artifact) = run.model(&key)?;
            let sets = augment_stage(&artifact, &recs, &cfg, seed)?;
            run.invalidate(&key, &["augmented/", "policies/"]);
            let grouped = matches!(artifact, ModelArtifact::Scm { clusters: Some(_), .. });
            for (i, ds) in sets.iter().enumerate() {
                let rel = if grouped { format!("augmented/{key}_c{i}.jsonl") } else { format!("augmented/{key}.jsonl") };
                info!("{rel}: {} records, {} counterfactual", ds.records.len(), ds.counterfactual_count());
                let inputs = vec![model_rel.clone(), data_rel.clone()];
                run.manifest.put(&run.dir, &rel, "augmented", to_jsonl(&ds.records)?.as_bytes(), inputs)?;
            }
        }
    }
    run.save("augment", started)
}

pub fn policy(run: &mut Run) -> Result<()> {
    let started = Instant::now();
    let cfg = run.cfg().clone();
    let bench = benchmark_name(cfg.benchmark);
    match cfg.benchmark {
        Benchmark::FiniteMdp => {
            let rel = data_file(cfg.benchmark);
            let text = fs::read_to_string(run.manifest.require(&run.dir, rel)?)?;
            let mdps: Vec<FiniteMdp> = checkpoint::from_json(MDPS_KIND, &text)?;
            let results = tabular_suite(&mdps, &cfg.tabular, derive_seed(cfg.env.rng_seed, 1))?;
            let worst = results.iter().map(|r| r.sup_error).fold(0.0, f64::max);
            info!("tabular suite: worst sup-norm error {worst:.5} over {} MDPs", results.len());
            write_table(run, "metrics/tabular", &results, vec![rel.to_string()])?;
        }
        Benchmark::SyntheticScm => bail!("the synthetic_scm benchmark has no simulator; its output is the augmented dataset"),
        Benchmark::Sd | Benchmark::Hd => {
            let mut rows: Vec<MetricRow> = Vec::new();
            let mut inputs = Vec::new();
            for n in settings(&cfg) {
                for &seed in &run.seeds.clone() {
                    let key = run_key(&cfg, n, seed);
                    let (model_rel, artifact) = run.model(&key)?;
                    let files = run_files(&run.manifest, "augmented/", &key);
                    if files.is_empty() {
                        return Err(Error::MissingArtifact(run.dir.join(format!("augmented/{key}.jsonl"))).into());
                    }
                    let mut sets = Vec::new();
                    for rel in &files {
                        let records = read_jsonl(&run.manifest.require(&run.dir, rel)?)?;
                        sets.push(AugmentedDataset { records, source_model_hash: artifact.hash()?, k_cf: cfg.augment.k_cf, skipped: 0 });
                    }
                    let policies = policy_stage(&sets, &cfg, seed)?;
                    for (i, (net, src)) in policies.iter().zip(&files).enumerate() {
                        if let Some(net) = net {
                            let rel = if files.len() > 1 { format!("policies/{key}_c{i}.json") } else { format!("policies/{key}.json") };
                            run.manifest.put(&run.dir, &rel, POLICY_KIND, checkpoint::to_json(POLICY_KIND, net)?.as_bytes(), vec![src.clone()])?;
                            inputs.push(rel);
                        }
                    }
                    let r = evaluate_stage(cfg.method, cfg.benchmark, &artifact, &policies, n, &cfg, seed)?;
                    for row in &r {
                        info!("{key} {}: reward {:.2}, mean Q {:.3}", row.benchmark, row.cumulative_reward, row.mean_q);
                    }
                    rows.extend(r);
                    inputs.push(model_rel);
                }
            }
            let stem = format!("metrics/{}_{bench}", cfg.method);
            let mut csv = Vec::new();
            write_metrics_csv(&rows, &mut csv)?;
            put_metric(run, &format!("{stem}.csv"), &csv, inputs.clone())?;
            put_metric(run, &format!("{stem}.json"), serde_json::to_string_pretty(&rows)?.as_bytes(), inputs)?;
        }
    }
    run.save("policy", started)
}

fn put_metric(run: &mut Run, rel: &str, bytes: &[u8], inputs: Vec<String>) -> Result<()> {
    run.manifest.put(&run.dir, rel, "metrics", bytes, inputs)?;
    if !run.manifest.metrics.iter().any(|m| m == rel) {
        run.manifest.metrics.push(rel.to_string());
    }
    Ok(())
}

fn write_table<T: Serialize>(run: &mut Run, stem: &str, rows: &[T], inputs: Vec<String>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().context("flushing csv")?;
    put_metric(run, &format!("{stem}.csv"), &bytes, inputs.clone())?;
    put_metric(run, &format!("{stem}.json"), serde_json::to_string_pretty(rows)?.as_bytes(), inputs)
}

#[derive(Serialize)]
struct TabularSummary {
    runs: usize,
    mdps: usize,
    worst_sup_error: f64,
    mean_sup_error: f64,
}

#[derive(Serialize)]
struct Report {
    summary: Vec<SummaryRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tabular: Option<TabularSummary>,
}

/// Aggregates the metric files listed by `manifests` into
/// `out/report/summary.{csv,json}`; returns the summary rows.
pub fn report(manifests: &[PathBuf], out: &Path) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    let mut tabular: Vec<TabularResult> = Vec::new();
    let mut tabular_runs = 0;
    for path in manifests {
        let m = RunManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for rel in m.metrics.iter().filter(|r| r.ends_with(".csv")) {
            let file = m.require(base, rel)?;
            if rel.starts_with("metrics/tabular") {
                let mut r = csv::Reader::from_path(&file)?;
                for row in r.deserialize() {
                    tabular.push(row.with_context(|| format!("reading {}", file.display()))?);
                }
                tabular_runs += 1;
            } else {
                rows.extend(read_metrics_csv(fs::File::open(&file)?, &file.display().to_string())?);
            }
        }
    }
    if rows.is_empty() && tabular.is_empty() {
        bail!("no metric files listed in {} manifest(s); run `policy` first", manifests.len());
    }
    let summary = summarize(&rows);
    let tabular = (!tabular.is_empty()).then(|| {
        let errs: Vec<f64> = tabular.iter().map(|r| r.sup_error).collect();
        TabularSummary {
            runs: tabular_runs,
            mdps: tabular.len(),
            worst_sup_error: errs.iter().copied().fold(0.0, f64::max),
            mean_sup_error: cfrl::stats::mean(&errs),
        }
    });
    let dir = out.join("report");
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for r in &summary {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&Report { summary: summary.clone(), tabular })?)?;
    info!("report: {} rows from {} metric rows", summary.len(), rows.len());
    Ok(summary)
}
