//! Command-line pipeline: run configuration, the seven subcommands and their
//! manifests.
//!
//! Every stage reads and writes under one run root. The top-level `seed` is the
//! only source of randomness; each stage derives its own stream from it, so a
//! rerun with the same configuration and seed rewrites identical files.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counterfactual::{
    effectiveness, forced_rollout, vacuous_intervention_check, write_effectiveness_csv, CounterfactualSpec,
    EffectivenessSeries,
};
use crate::error::{Error, Result};
use crate::flow::FlowVariant;
use crate::model::{ForecastModel, ModelConfig, Rollout};
use crate::pipeline::{prepare, PrepareConfig, PreparedData};
use crate::prob::{action_taxonomy, probability_table, write_table_csv, ProbConfig};
use crate::seed;
use crate::sim::ScenarioSuite;
use crate::ssm::io::WindowDataset;
use crate::ssm::{ChannelStats, InteractionWindow, A_I, TTC};
use crate::stats::quantile;
use crate::trainer::{
    evaluate_checkpoint, run_ablation, train_with_progress, write_curve, Checkpoint, EvalConfig, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "ssmflow", version, about = "Probabilistic forecasting of surrogate safety measures")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the run root directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate the scenario suite into a raw window dataset.
    Simulate,
    /// Filter, split and standardize the raw dataset.
    Prepare {
        /// Minimum-TTC filter threshold in seconds.
        #[arg(long)]
        threshold: Option<f64>,
        /// Keep every window.
        #[arg(long, conflicts_with = "threshold")]
        no_filter: bool,
    },
    /// Train the forecaster and keep the best-validation checkpoint.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the trained checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        max_windows: Option<usize>,
    },
    /// Train and score both mask variants.
    Ablate {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Action and crash probability tables for the configured contexts.
    Probability {
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long)]
        integration: Option<usize>,
    },
    /// Evasive-action effectiveness and intervention rollouts.
    Counterfactual {
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long)]
        integration: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Prepare { .. } => "prepare",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::Probability { .. } => "probability",
            Command::Counterfactual { .. } => "counterfactual",
        }
    }
}

/// Directory layout; relative entries live under `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub root: PathBuf,
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: "runs".into(),
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            outputs: "outputs".into(),
        }
    }
}

impl Paths {
    fn under(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }
    pub fn data(&self) -> PathBuf {
        self.under(&self.data)
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.under(&self.checkpoints)
    }
    pub fn outputs(&self) -> PathBuf {
        self.under(&self.outputs)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Suite file, relative to the configuration file.
    pub suite_file: Option<PathBuf>,
    pub suite: Option<ScenarioSuite>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    #[default]
    Test,
}

/// A window used as the observed context of a query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextRef {
    pub label: String,
    #[serde(default)]
    pub split: SplitName,
    pub index: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbabilitySection {
    /// Empty picks the test windows with the lowest and the median observed
    /// minimum TTC, labelled `conflict` and `normal`.
    pub contexts: Vec<ContextRef>,
    pub estimator: ProbConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualSection {
    pub contexts: Vec<ContextRef>,
    pub estimator: ProbConfig,
    /// Samples per rollout in the vacuous-intervention check.
    pub vacuous_samples: usize,
    pub vacuous_step: usize,
    /// Optional custom intervention reported as per-step quantiles.
    pub intervention: Option<CounterfactualSpec>,
}

impl Default for CounterfactualSection {
    fn default() -> Self {
        Self {
            contexts: Vec::new(),
            estimator: ProbConfig::default(),
            vacuous_samples: 1000,
            vacuous_step: 5,
            intervention: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub simulate: SimulateSection,
    pub prepare: PrepareConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub evaluate: EvalConfig,
    pub probability: ProbabilitySection,
    pub counterfactual: CounterfactualSection,
}

// stream tags for per-stage seeds
const SIMULATE: u64 = 1;
const PREPARE: u64 = 2;
const INIT: u64 = 3;
const TRAIN: u64 = 4;
const EVALUATE: u64 = 5;
const PROBABILITY: u64 = 6;
const COUNTERFACTUAL: u64 = 7;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a configuration file, resolving `simulate.suite_file` next to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(rel) = cfg.simulate.suite_file.take() {
            let p = path.parent().unwrap_or(Path::new(".")).join(rel);
            let text = std::fs::read_to_string(&p)
                .map_err(|e| Error::Config(format!("cannot read suite {}: {e}", p.display())))?;
            let suite: ScenarioSuite = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            if cfg.simulate.suite.is_some() {
                return Err(Error::Config("give either simulate.suite_file or simulate.suite, not both".into()));
            }
            cfg.simulate.suite = Some(suite);
        }
        Ok(cfg)
    }

    /// Applies the global flags and derives every stage seed from `seed`.
    pub fn resolve(mut self, seed_flag: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed_flag {
            self.seed = s;
        }
        if let Some(o) = out {
            self.paths.root = o;
        }
        self.prepare.seed = seed::derive(self.seed, &[PREPARE]);
        self.model.init_seed = seed::derive(self.seed, &[INIT]);
        self.train.seed = seed::derive(self.seed, &[TRAIN]);
        self.evaluate.seed = seed::derive(self.seed, &[EVALUATE]);
        self.probability.estimator.seed = seed::derive(self.seed, &[PROBABILITY]);
        self.counterfactual.estimator.seed = seed::derive(self.seed, &[COUNTERFACTUAL]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.simulate.suite {
            s.validate()?;
        }
        if matches!(self.prepare.filter_threshold, Some(t) if !(t > 0.0)) {
            return Err(Error::Config("prepare.filter_threshold must be positive".into()));
        }
        self.model.encoder.validate()?;
        self.train.validate()?;
        if self.evaluate.n_samples == 0 {
            return Err(Error::Config("evaluate.n_samples must be positive".into()));
        }
        self.probability.estimator.validate()?;
        self.counterfactual.estimator.validate()?;
        for ctxs in [&self.probability.contexts, &self.counterfactual.contexts] {
            let mut labels: Vec<&str> = ctxs.iter().map(|c| c.label.as_str()).collect();
            labels.sort_unstable();
            if labels.windows(2).any(|w| w[0] == w[1]) || labels.iter().any(|l| !valid_label(l)) {
                return Err(Error::Config("context labels must be unique and use only [A-Za-z0-9_-]".into()));
            }
        }
        let cf = &self.counterfactual;
        if cf.vacuous_samples == 0 || !(1..=crate::ssm::TARGET_LEN).contains(&cf.vacuous_step) {
            return Err(Error::Config("counterfactual.vacuous_samples must be positive and vacuous_step in 1..=10".into()));
        }
        if let Some(spec) = &cf.intervention {
            spec.validate()?;
        }
        Ok(())
    }
}

fn valid_label(l: &str) -> bool {
    !l.is_empty() && l.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Hash of one file, path relative to the run root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Machine-readable record of one subcommand run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest(root: &Path, path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path)?;
    let rel = path.strip_prefix(root).unwrap_or(path);
    Ok(FileDigest {
        path: rel.to_string_lossy().replace('\\', "/"),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

fn dataset_files(stem: &Path) -> [PathBuf; 2] {
    let (a, b) = crate::ssm::io::dataset_paths(stem);
    [a, b]
}

fn checkpoint_files(stem: &Path) -> [PathBuf; 2] {
    let (a, b) = crate::trainer::checkpoint_paths(stem);
    [a, b]
}

fn split_files(dir: &Path) -> Vec<PathBuf> {
    crate::pipeline::SPLIT_NAMES.iter().flat_map(|n| dataset_files(&dir.join(n))).collect()
}

/// What a subcommand did, for the caller to report.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub summary: String,
}

/// Loads the configuration named by the flags and runs the subcommand.
pub fn execute(cli: &Cli) -> Result<RunReport> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.resolve(cli.seed, cli.out.clone());
    run(&cfg, &cli.command)
}

/// Runs one subcommand under a resolved configuration.
pub fn run(cfg: &RunConfig, command: &Command) -> Result<RunReport> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    apply_overrides(&mut cfg, command);
    cfg.validate()?;
    let paths = cfg.paths.clone();
    let (inputs, outputs, summary) = match command {
        Command::Simulate => cmd_simulate(&cfg)?,
        Command::Prepare { .. } => cmd_prepare(&cfg)?,
        Command::Train { .. } => cmd_train(&cfg)?,
        Command::Evaluate { .. } => cmd_evaluate(&cfg)?,
        Command::Ablate { .. } => cmd_ablate(&cfg)?,
        Command::Probability { .. } => cmd_probability(&cfg)?,
        Command::Counterfactual { .. } => cmd_counterfactual(&cfg)?,
    };
    let root = &paths.root;
    let config_json = serde_json::to_vec(&cfg)?;
    let manifest = Manifest {
        command: command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_sha256: sha256_hex(&config_json),
        config: cfg.clone(),
        inputs: inputs.iter().map(|p| digest(root, p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| digest(root, p)).collect::<Result<_>>()?,
    };
    let manifest_path = root.join(format!("manifest_{}.json", command.name()));
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(RunReport {
        manifest_path,
        manifest,
        summary,
    })
}

fn apply_overrides(cfg: &mut RunConfig, command: &Command) {
    match *command {
        Command::Prepare { threshold, no_filter } => {
            if no_filter {
                cfg.prepare.filter_threshold = None;
            } else if threshold.is_some() {
                cfg.prepare.filter_threshold = threshold;
            }
        }
        Command::Train { epochs } => {
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
        }
        Command::Evaluate { samples, max_windows } => {
            if let Some(s) = samples {
                cfg.evaluate.n_samples = s;
            }
            if max_windows.is_some() {
                cfg.evaluate.max_windows = max_windows;
            }
        }
        Command::Ablate { epochs, samples } => {
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            if let Some(s) = samples {
                cfg.evaluate.n_samples = s;
            }
        }
        Command::Probability { rollouts, integration } => {
            let est = &mut cfg.probability.estimator;
            est.n_rollouts = rollouts.unwrap_or(est.n_rollouts);
            est.n_integration = integration.unwrap_or(est.n_integration);
        }
        Command::Counterfactual { rollouts, integration } => {
            let est = &mut cfg.counterfactual.estimator;
            est.n_rollouts = rollouts.unwrap_or(est.n_rollouts);
            est.n_integration = integration.unwrap_or(est.n_integration);
        }
        Command::Simulate => {}
    }
}

type StageFiles = (Vec<PathBuf>, Vec<PathBuf>, String);

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

fn raw_stem(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data().join("raw")
}

fn model_stem(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoints().join("model")
}

fn cmd_simulate(cfg: &RunConfig) -> Result<StageFiles> {
    let suite = cfg
        .simulate
        .suite
        .as_ref()
        .ok_or_else(|| Error::Config("simulate needs simulate.suite or simulate.suite_file".into()))?;
    let ds = suite.generate(seed::derive(cfg.seed, &[SIMULATE]))?;
    let dir = cfg.paths.data();
    mkdir(&dir)?;
    ds.write(&raw_stem(cfg))?;
    let summary_path = dir.join("simulate_summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record(["scenario", "windows"])?;
    let origins = ds.meta.origins.clone().unwrap_or_default();
    for (i, s) in suite.scenarios.iter().enumerate() {
        let n = origins.iter().filter(|o| **o as usize == i).count();
        w.write_record([s.name.clone(), n.to_string()])?;
    }
    w.flush()?;
    let mut outputs = dataset_files(&raw_stem(cfg)).to_vec();
    outputs.push(summary_path);
    Ok((vec![], outputs, format!("simulated {} windows", ds.windows.len())))
}

fn cmd_prepare(cfg: &RunConfig) -> Result<StageFiles> {
    let raw = WindowDataset::read(&raw_stem(cfg))?;
    let prepared = prepare(&raw, &cfg.prepare)?;
    let dir = cfg.paths.data();
    prepared.write(&dir)?;
    let summary_path = dir.join("prepare_summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record(["quantity", "windows"])?;
    let s = &prepared.split;
    for (name, n) in [
        ("raw", prepared.counts.0),
        ("kept", prepared.counts.1),
        ("train", s.train.len()),
        ("validation", s.validation.len()),
        ("test", s.test.len()),
    ] {
        w.write_record([name.to_string(), n.to_string()])?;
    }
    w.flush()?;
    let mut outputs = split_files(&dir);
    outputs.push(summary_path);
    let summary = format!(
        "kept {} of {} windows: {} train, {} validation, {} test",
        prepared.counts.1,
        prepared.counts.0,
        s.train.len(),
        s.validation.len(),
        s.test.len()
    );
    Ok((dataset_files(&raw_stem(cfg)).to_vec(), outputs, summary))
}

fn cmd_train(cfg: &RunConfig) -> Result<StageFiles> {
    let data = PreparedData::read(&cfg.paths.data())?;
    mkdir(&cfg.paths.checkpoints())?;
    mkdir(&cfg.paths.outputs())?;
    let out = train_with_progress(&cfg.model, &data.stats, data.ttc_cap, &data.split, &cfg.train, &mut |r| {
        eprintln!("epoch {:>3}  train {:.4}  val {:.4}", r.epoch, r.train_nll, r.val_nll);
    })?;
    out.checkpoint.save(&model_stem(cfg))?;
    let curve = cfg.paths.outputs().join("train_curve.csv");
    write_curve(&curve, &out.curve)?;
    let mut outputs = checkpoint_files(&model_stem(cfg)).to_vec();
    outputs.push(curve);
    let best = out.checkpoint.meta.training.as_ref().map_or(f64::NAN, |t| t.val_nll);
    let summary = format!("stopped ({:?}) after {} epochs; best validation NLL {best:.4}", out.stop, out.curve.len());
    Ok((split_files(&cfg.paths.data()), outputs, summary))
}

fn write_scores(path: &Path, rows: &[(&str, crate::metrics::ForecastScores, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "mse", "crps", "val_nll", "windows", "samples"])?;
    for (name, s, val) in rows {
        w.write_record([
            name.to_string(),
            format!("{:.6}", s.mse),
            format!("{:.6}", s.crps),
            format!("{val:.6}"),
            s.windows.to_string(),
            s.samples.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<StageFiles> {
    let data = PreparedData::read(&cfg.paths.data())?;
    let ckpt = Checkpoint::load(&model_stem(cfg))?;
    let scores = evaluate_checkpoint(&ckpt, &data.split, &cfg.evaluate)?;
    mkdir(&cfg.paths.outputs())?;
    let path = cfg.paths.outputs().join("evaluate.csv");
    let val = ckpt.meta.training.as_ref().map_or(f64::NAN, |t| t.val_nll);
    let name = variant_name(ckpt.meta.model.flow.variant);
    write_scores(&path, &[(name, scores, val)])?;
    let mut inputs = split_files(&cfg.paths.data());
    inputs.extend(checkpoint_files(&model_stem(cfg)));
    Ok((inputs, vec![path], format!("MSE {:.4}, CRPS {:.4} on {} windows", scores.mse, scores.crps, scores.windows)))
}

fn variant_name(v: FlowVariant) -> &'static str {
    match v {
        FlowVariant::Autoregressive => "autoregressive",
        FlowVariant::NonAutoregressive => "non_autoregressive",
    }
}

fn cmd_ablate(cfg: &RunConfig) -> Result<StageFiles> {
    let data = PreparedData::read(&cfg.paths.data())?;
    mkdir(&cfg.paths.checkpoints())?;
    mkdir(&cfg.paths.outputs())?;
    let (report, ar, nar) = run_ablation(&cfg.model, &data.stats, data.ttc_cap, &data.split, &cfg.train, &cfg.evaluate, &mut |v, r| {
        eprintln!("{:<18} epoch {:>3}  train {:.4}  val {:.4}", variant_name(v), r.epoch, r.train_nll, r.val_nll);
    })?;
    let mut outputs = Vec::new();
    for (tag, out) in [("ar", &ar), ("nar", &nar)] {
        let stem = cfg.paths.checkpoints().join(format!("ablation_{tag}"));
        out.checkpoint.save(&stem)?;
        outputs.extend(checkpoint_files(&stem));
        let curve = cfg.paths.outputs().join(format!("ablation_curve_{tag}.csv"));
        write_curve(&curve, &out.curve)?;
        outputs.push(curve);
    }
    let path = cfg.paths.outputs().join("ablation.csv");
    write_scores(
        &path,
        &[
            ("autoregressive", report.autoregressive, report.autoregressive_val_nll),
            ("non_autoregressive", report.non_autoregressive, report.non_autoregressive_val_nll),
        ],
    )?;
    outputs.push(path);
    let summary = format!(
        "autoregressive MSE {:.4} CRPS {:.4}; non-autoregressive MSE {:.4} CRPS {:.4}",
        report.autoregressive.mse, report.autoregressive.crps, report.non_autoregressive.mse, report.non_autoregressive.crps
    );
    Ok((split_files(&cfg.paths.data()), outputs, summary))
}

fn observed_min_ttc(w: &InteractionWindow, stats: &ChannelStats) -> f64 {
    w.observed()
        .column(TTC)
        .iter()
        .map(|v| stats.to_physical(TTC, *v))
        .fold(f64::INFINITY, f64::min)
}

/// Test windows with the lowest and the median observed minimum TTC.
pub fn default_contexts(data: &PreparedData) -> Result<Vec<ContextRef>> {
    if data.split.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let mut idx: Vec<usize> = (0..data.split.test.len()).collect();
    let key: Vec<f64> = data.split.test.iter().map(|w| observed_min_ttc(w, &data.stats)).collect();
    idx.sort_by(|a, b| key[*a].total_cmp(&key[*b]).then(a.cmp(b)));
    let ctx = |label: &str, index| ContextRef {
        label: label.to_string(),
        split: SplitName::Test,
        index,
    };
    Ok(vec![ctx("conflict", idx[0]), ctx("normal", idx[idx.len() / 2])])
}

fn resolve_window(data: &PreparedData, c: &ContextRef) -> Result<Array2<f64>> {
    let part = match c.split {
        SplitName::Train => &data.split.train,
        SplitName::Validation => &data.split.validation,
        SplitName::Test => &data.split.test,
    };
    part.get(c.index)
        .map(|w| w.values().clone())
        .ok_or_else(|| Error::Config(format!("context `{}`: index {} outside split of {}", c.label, c.index, part.len())))
}

fn contexts_or_default(data: &PreparedData, given: &[ContextRef]) -> Result<Vec<ContextRef>> {
    if given.is_empty() {
        default_contexts(data)
    } else {
        Ok(given.to_vec())
    }
}

fn cmd_probability(cfg: &RunConfig) -> Result<StageFiles> {
    let data = PreparedData::read(&cfg.paths.data())?;
    let ckpt = Checkpoint::load(&model_stem(cfg))?;
    let model = ckpt.model()?;
    let stats = &ckpt.meta.stats;
    mkdir(&cfg.paths.outputs())?;
    let mut outputs = Vec::new();
    let contexts = contexts_or_default(&data, &cfg.probability.contexts)?;
    let mut lines = Vec::new();
    for (ci, c) in contexts.iter().enumerate() {
        let window = resolve_window(&data, c)?;
        let est = ProbConfig {
            seed: seed::derive(cfg.probability.estimator.seed, &[ci as u64]),
            ..cfg.probability.estimator.clone()
        };
        let table = probability_table(&model, stats, &window, &action_taxonomy(), &est)?;
        let values = cfg.paths.outputs().join(format!("probability_{}.csv", c.label));
        let stderrs = cfg.paths.outputs().join(format!("probability_{}_stderr.csv", c.label));
        write_table_csv(&table, &values, &stderrs)?;
        let peak = table.crash.iter().map(|p| p.value).fold(0.0, f64::max);
        lines.push(format!("{}: max crash probability {:.2}%", c.label, 100.0 * peak));
        outputs.extend([values, stderrs]);
    }
    let mut inputs = split_files(&cfg.paths.data());
    inputs.extend(checkpoint_files(&model_stem(cfg)));
    Ok((inputs, outputs, lines.join("; ")))
}

fn write_series_csv(series: &[EffectivenessSeries], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["context", "step", "quantity", "value", "stderr"])?;
    for s in series {
        for (name, row) in [
            ("P(crash|eva)", &s.crash_given_evasive),
            ("P(crash|no)", &s.crash_given_no_action),
            ("E", &s.effectiveness),
        ] {
            for (t, p) in row.iter().enumerate() {
                w.write_record([
                    s.label.clone(),
                    (t + 1).to_string(),
                    name.to_string(),
                    format!("{:.6}", p.value),
                    format!("{:.6}", p.stderr),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn rollout_quantiles(r: &Rollout, stats: &ChannelStats, channel: usize, t: usize) -> [f64; 3] {
    let phys: Vec<f64> = r.step(t).column(channel).iter().map(|v| stats.to_physical(channel, *v)).collect();
    [0.25, 0.5, 0.75].map(|q| quantile(phys.iter().copied(), q))
}

fn cmd_counterfactual(cfg: &RunConfig) -> Result<StageFiles> {
    let data = PreparedData::read(&cfg.paths.data())?;
    let ckpt = Checkpoint::load(&model_stem(cfg))?;
    let model: ForecastModel = ckpt.model()?;
    let stats = &ckpt.meta.stats;
    let cf = &cfg.counterfactual;
    mkdir(&cfg.paths.outputs())?;
    let out = cfg.paths.outputs();
    let contexts = contexts_or_default(&data, &cf.contexts)?;
    let mut series = Vec::new();
    let mut windows = Vec::new();
    for (ci, c) in contexts.iter().enumerate() {
        let window = resolve_window(&data, c)?;
        let est = ProbConfig {
            seed: seed::derive(cf.estimator.seed, &[ci as u64]),
            ..cf.estimator.clone()
        };
        series.push(effectiveness(&model, stats, &window, &c.label, &est)?);
        windows.push(window);
    }
    let values = out.join("effectiveness.csv");
    let stderrs = out.join("effectiveness_stderr.csv");
    write_effectiveness_csv(&series, &values, &stderrs)?;
    let long = out.join("effectiveness_series.csv");
    write_series_csv(&series, &long)?;

    let check = vacuous_intervention_check(
        &model,
        stats,
        &windows[0],
        cf.vacuous_samples,
        cf.vacuous_step,
        seed::derive(cf.estimator.seed, &[0x7661]),
    )?;
    let vac = out.join("vacuous_check.json");
    std::fs::write(&vac, serde_json::to_string_pretty(&check)? + "\n")?;
    let mut outputs = vec![values, stderrs, long, vac];

    if let Some(spec) = &cf.intervention {
        let path = out.join("intervention_series.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["context", "step", "rollout", "a_i_q25", "a_i_q50", "a_i_q75", "ttc_q25", "ttc_q50", "ttc_q75"])?;
        for (ci, (c, window)) in contexts.iter().zip(&windows).enumerate() {
            let s = seed::derive(cf.estimator.seed, &[0x6976, ci as u64]);
            let forced = forced_rollout(&model, stats, window, spec, cf.estimator.n_rollouts, seed::derive(s, &[1]))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(s, &[2]));
            let free = model.rollout(window, cf.estimator.n_rollouts, &mut rng, None)?;
            for t in 1..=forced.contexts.len() {
                for (name, r) in [("forced", &forced), ("free", &free)] {
                    let mut rec = vec![c.label.clone(), t.to_string(), name.to_string()];
                    for ch in [A_I, TTC] {
                        rec.extend(rollout_quantiles(r, stats, ch, t).iter().map(|v| format!("{v:.6}")));
                    }
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        outputs.push(path);
    }

    let lines: Vec<String> = series
        .iter()
        .map(|s| {
            let m = s.mean();
            format!("{}: mean E {:.2}% ± {:.2}%", s.label, 100.0 * m.value, 100.0 * m.stderr)
        })
        .collect();
    let mut inputs = split_files(&cfg.paths.data());
    inputs.extend(checkpoint_files(&model_stem(cfg)));
    Ok((inputs, outputs, lines.join("; ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_run_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/run.toml");
        let cfg = RunConfig::load(&path).unwrap().resolve(None, None);
        cfg.validate().unwrap();
        assert!(cfg.simulate.suite.is_some());
        assert!(cfg.counterfactual.intervention.is_some());
    }

    #[test]
    fn config_defaults_and_unknown_fields() {
        let cfg = RunConfig::from_toml("seed = 3\n[train]\nmax_epochs = 4\n").unwrap();
        assert_eq!(cfg.train.max_epochs, 4);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.model.encoder.model_dim, 40);
        let err = RunConfig::from_toml("[train]\nmax_epoch = 4\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn seeds_derive_from_master_seed() {
        let a = RunConfig::default().resolve(Some(5), None);
        let b = RunConfig::default().resolve(Some(5), None);
        let c = RunConfig::default().resolve(Some(6), None);
        assert_eq!(a, b);
        assert_ne!(a.train.seed, c.train.seed);
        assert_ne!(a.train.seed, a.model.init_seed);
    }

    #[test]
    fn validation_rejects_bad_contexts() {
        let mut cfg = RunConfig::default();
        let c = ContextRef {
            label: "a".into(),
            split: SplitName::Test,
            index: 0,
        };
        cfg.probability.contexts = vec![c.clone(), c];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.probability.contexts.clear();
        cfg.counterfactual.vacuous_step = 11;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
