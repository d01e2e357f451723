//! Sample-based forecast scores: median MSE and quantile-loss CRPS.
//!
//! Both scores are computed in model (standardized) space from autoregressive
//! rollouts, so every channel contributes on the same scale.

use ndarray::{s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForecastModel, Rollout};
use crate::seed;
use crate::ssm::{InteractionWindow, CHANNELS, OBSERVED_LEN, TARGET_LEN};
use crate::stats::{quantile_sorted, sorted};

/// The 19 levels `0.05, 0.10, ..., 0.95`.
pub fn quantile_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// `(q - 1{x < xhat}) * (x - xhat)`.
pub fn pinball(q: f64, truth: f64, estimate: f64) -> f64 {
    let ind = if truth < estimate { 1.0 } else { 0.0 };
    (q - ind) * (truth - estimate)
}

/// `(2 / |Q|) * sum_q pinball_q(truth, empirical q-quantile of samples)`.
pub fn crps_from_samples(samples: &[f64], truth: f64, grid: &[f64]) -> f64 {
    let sorted = sorted(samples.iter().copied());
    crps_from_sorted(&sorted, truth, grid)
}

pub fn crps_from_sorted(sorted: &[f64], truth: f64, grid: &[f64]) -> f64 {
    let total: f64 = grid.iter().map(|q| pinball(*q, truth, quantile_sorted(sorted, *q))).sum();
    2.0 * total / grid.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastScores {
    pub mse: f64,
    pub crps: f64,
    pub windows: usize,
    pub samples: usize,
}

/// Median-MSE and CRPS of one rollout against the window's true target.
pub fn score_rollout(rollout: &Rollout, window: &InteractionWindow, grid: &[f64]) -> (f64, f64) {
    let target = window.values().slice(s![OBSERVED_LEN.., ..]);
    let (mut se, mut crps) = (0.0, 0.0);
    for t in 0..TARGET_LEN {
        for c in 0..CHANNELS {
            let col = sorted(rollout.samples.index_axis(Axis(1), t).column(c).iter().copied());
            let truth = target[[t, c]];
            let med = quantile_sorted(&col, 0.5);
            se += (med - truth) * (med - truth);
            crps += crps_from_sorted(&col, truth, grid);
        }
    }
    let cells = (TARGET_LEN * CHANNELS) as f64;
    (se / cells, crps / cells)
}

/// Scores a model on standardized windows with `n_samples` rollouts each.
/// Window `i` draws from a stream derived from `(seed, i)`.
pub fn evaluate(model: &ForecastModel, windows: &[InteractionWindow], n_samples: usize, seed: u64) -> Result<ForecastScores> {
    if windows.is_empty() {
        return Err(Error::InvalidInput("no windows to evaluate".into()));
    }
    let grid = quantile_grid();
    let (mut mse, mut crps) = (0.0, 0.0);
    for (i, w) in windows.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[i as u64]));
        let r = model.rollout(w.values(), n_samples, &mut rng, None)?;
        let (m, c) = score_rollout(&r, w, &grid);
        mse += m;
        crps += c;
    }
    let n = windows.len() as f64;
    Ok(ForecastScores {
        mse: mse / n,
        crps: crps / n,
        windows: windows.len(),
        samples: n_samples,
    })
}

pub fn evaluate_mse(model: &ForecastModel, windows: &[InteractionWindow], n_samples: usize, seed: u64) -> Result<f64> {
    Ok(evaluate(model, windows, n_samples, seed)?.mse)
}

pub fn evaluate_crps(model: &ForecastModel, windows: &[InteractionWindow], n_samples: usize, seed: u64) -> Result<f64> {
    Ok(evaluate(model, windows, n_samples, seed)?.crps)
}
