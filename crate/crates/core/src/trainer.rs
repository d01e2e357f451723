//! Maximum-likelihood training with early stopping, checkpoints, and the
//! autoregressive versus non-autoregressive comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowVariant;
use crate::metrics::{evaluate, ForecastScores};
use crate::model::{ForecastModel, ModelConfig};
use crate::nn::{Adam, Graph, TensorSpec};
use crate::seed;
use crate::ssm::{ChannelStats, DatasetSplit};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 100,
            patience: 15,
            seed: 0,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    /// A non-finite loss or gradient appeared; the best earlier parameters are kept.
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    /// Epoch (1-based) of the selected parameters; 0 means untrained.
    pub epoch: usize,
    pub val_nll: f64,
    pub seed: u64,
    pub stop: StopReason,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub stats: ChannelStats,
    pub ttc_cap: f64,
    pub tensors: Vec<TensorSpec>,
    pub training: Option<TrainingSummary>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

/// Parameter blob plus everything needed to rebuild the model around it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blob: Vec<u8>,
}

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

impl Checkpoint {
    pub fn from_model(model: &ForecastModel, stats: ChannelStats, ttc_cap: f64, training: Option<TrainingSummary>) -> Self {
        Self {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                model: model.config.clone(),
                stats,
                ttc_cap,
                tensors: model.params.specs(),
                training,
                metrics: BTreeMap::new(),
            },
            blob: model.params.to_bytes(),
        }
    }

    pub fn model(&self) -> Result<ForecastModel> {
        let mut m = ForecastModel::new(self.meta.model.clone())?;
        m.params.load_bytes(&self.meta.tensors, &self.blob)?;
        Ok(m)
    }

    /// Writes `stem.bin` and `stem.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (bin, json) = checkpoint_paths(stem);
        fs::write(bin, &self.blob)?;
        fs::write(json, serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (bin, json) = checkpoint_paths(stem);
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(json)?)?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                meta.format_version
            )));
        }
        Ok(Self {
            meta,
            blob: fs::read(bin)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Trains on `split.train` (standardized) and keeps the parameters with the
/// lowest validation NLL.
pub fn train(
    model_config: &ModelConfig,
    stats: &ChannelStats,
    ttc_cap: f64,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model_config, stats, ttc_cap, split, cfg, &mut |_| {})
}

pub fn train_with_progress(
    model_config: &ModelConfig,
    stats: &ChannelStats,
    ttc_cap: f64,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let mut model = ForecastModel::new(model_config.clone())?;
    let train_w: Vec<_> = split.train.iter().map(|w| w.values().clone()).collect();
    let val_w: Vec<_> = split.validation.iter().map(|w| w.values().clone()).collect();
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut best = model.params.clone();
    let mut best_val = model.nll(&val_w, 256)?;
    let mut best_epoch = 0;
    let mut curve = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_w.len()).collect();

    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[1, epoch as u64]));
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<_> = batch.iter().map(|i| &train_w[*i]).collect();
            let dropout = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[2, epoch as u64, bi as u64]));
            let (loss, mut grads) = {
                let mut g = Graph::training(&model.params, dropout);
                let l = model.nll_graph(&mut g, &refs)?;
                (g.value(l)[[0, 0]], g.backward(l))
            };
            if !loss.is_finite() || !grads.all_finite() {
                stop = StopReason::Diverged;
                break 'epochs;
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam.step(&mut model.params, &grads);
            total += loss * batch.len() as f64;
        }
        let val = model.nll(&val_w, 256)?;
        if !val.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        let rec = EpochRecord {
            epoch,
            train_nll: total / train_w.len() as f64,
            val_nll: val,
        };
        on_epoch(&rec);
        curve.push(rec);
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = model.params.clone();
        } else if epoch - best_epoch >= cfg.patience {
            stop = StopReason::EarlyStopping;
            break;
        }
    }

    model.params = best;
    let summary = TrainingSummary {
        epoch: best_epoch,
        val_nll: best_val,
        seed: cfg.seed,
        stop,
        config: cfg.clone(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&model, stats.clone(), ttc_cap, Some(summary)),
        curve,
        stop,
    })
}

/// Writes the training curve as `epoch,train_nll,val_nll`.
pub fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_nll", "val_nll"])?;
    for r in curve {
        w.write_record([r.epoch.to_string(), format!("{:.6}", r.train_nll), format!("{:.6}", r.val_nll)])?;
    }
    w.flush()?;
    Ok(())
}

/// Settings for sample-based scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    /// Score only the first windows of the test split.
    pub max_windows: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            max_windows: None,
            seed: 0,
        }
    }
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, split: &DatasetSplit, eval: &EvalConfig) -> Result<ForecastScores> {
    let model = ckpt.model()?;
    let n = eval.max_windows.unwrap_or(split.test.len()).min(split.test.len());
    evaluate(&model, &split.test[..n], eval.n_samples, eval.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub autoregressive: ForecastScores,
    pub non_autoregressive: ForecastScores,
    pub autoregressive_val_nll: f64,
    pub non_autoregressive_val_nll: f64,
}

impl AblationReport {
    pub fn autoregressive_wins(&self) -> bool {
        self.autoregressive.mse < self.non_autoregressive.mse && self.autoregressive.crps < self.non_autoregressive.crps
    }
}

/// Trains both mask variants under the same protocol and scores them on the test split.
pub fn run_ablation(
    model_config: &ModelConfig,
    stats: &ChannelStats,
    ttc_cap: f64,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    on_epoch: &mut dyn FnMut(FlowVariant, &EpochRecord),
) -> Result<(AblationReport, TrainOutcome, TrainOutcome)> {
    let run = |variant: FlowVariant, on_epoch: &mut dyn FnMut(FlowVariant, &EpochRecord)| -> Result<(TrainOutcome, ForecastScores)> {
        let mut mc = model_config.clone();
        mc.flow.variant = variant;
        let out = train_with_progress(&mc, stats, ttc_cap, split, cfg, &mut |r| on_epoch(variant, r))?;
        let scores = evaluate_checkpoint(&out.checkpoint, split, eval)?;
        Ok((out, scores))
    };
    let (ar, ar_scores) = run(FlowVariant::Autoregressive, on_epoch)?;
    let (nar, nar_scores) = run(FlowVariant::NonAutoregressive, on_epoch)?;
    let val = |o: &TrainOutcome| o.checkpoint.meta.training.as_ref().map_or(f64::NAN, |t| t.val_nll);
    let report = AblationReport {
        autoregressive: ar_scores,
        non_autoregressive: nar_scores,
        autoregressive_val_nll: val(&ar),
        non_autoregressive_val_nll: val(&nar),
    };
    Ok((report, ar, nar))
}
