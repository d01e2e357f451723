//! Forced-action rollouts and evasive-action effectiveness.
//!
//! An intervention replaces how the follower's acceleration is realised at
//! chosen target steps (a fixed value, or a draw from the learned conditional
//! restricted to an interval). Everything else is sampled from the unchanged
//! model, and forced values enter the decoder as realised history.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Constraint, Forcing};
use crate::model::{ForecastModel, Rollout, StepForcing};
use crate::prob::{action_taxonomy, Action, Interval, ProbConfig, ProbabilityEstimate, StepQuery, ACCEL_LIMIT};
use crate::seed;
use crate::ssm::{ChannelStats, A_I, TARGET_LEN, TTC};
use crate::stats::{ks_two_sample, KsResult};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceMode {
    Fixed(f64),
    Truncated(Interval),
}

/// Intervention on the follower acceleration, physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSpec {
    pub mode: ForceMode,
    /// Target steps (1-based) at which the intervention applies.
    pub steps: Vec<usize>,
}

impl CounterfactualSpec {
    pub fn truncated(lo: f64, hi: f64) -> Self {
        Self {
            mode: ForceMode::Truncated(Interval::new(lo, hi)),
            steps: (1..=TARGET_LEN).collect(),
        }
    }

    pub fn fixed(value: f64) -> Self {
        Self {
            mode: ForceMode::Fixed(value),
            steps: (1..=TARGET_LEN).collect(),
        }
    }

    pub fn for_action(action: &Action) -> Self {
        Self::truncated(action.a_i.lo, action.a_i.hi)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (-ACCEL_LIMIT..=ACCEL_LIMIT).contains(&v);
        match self.mode {
            ForceMode::Fixed(v) if !ok(v) => {
                return Err(Error::Config(format!("forced value {v} outside [-6, 6]")));
            }
            ForceMode::Truncated(iv) if !(ok(iv.lo) && ok(iv.hi) && iv.lo <= iv.hi) => {
                return Err(Error::Config(format!("forced interval [{}, {}] outside [-6, 6]", iv.lo, iv.hi)));
            }
            _ => {}
        }
        if let Some(s) = self.steps.iter().find(|s| !(1..=TARGET_LEN).contains(*s)) {
            return Err(Error::Config(format!("forced step {s} outside 1..={TARGET_LEN}")));
        }
        Ok(())
    }

    /// Model-space forcing of `a_i`.
    pub fn to_step_forcing(&self, stats: &ChannelStats) -> Result<StepForcing> {
        self.validate()?;
        let constraint = match self.mode {
            ForceMode::Fixed(v) => Constraint::Fixed(stats.to_model(A_I, v)),
            ForceMode::Truncated(iv) => Constraint::Interval {
                lo: stats.to_model(A_I, iv.lo),
                hi: stats.to_model(A_I, iv.hi),
            },
        };
        let mut steps = [false; TARGET_LEN];
        for s in &self.steps {
            steps[s - 1] = true;
        }
        Ok(StepForcing {
            forcing: Forcing::new(A_I, constraint),
            steps,
        })
    }
}

pub fn forced_rollout(
    model: &ForecastModel,
    stats: &ChannelStats,
    window_model_space: &Array2<f64>,
    spec: &CounterfactualSpec,
    n_samples: usize,
    seed: u64,
) -> Result<Rollout> {
    let f = spec.to_step_forcing(stats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.rollout(window_model_space, n_samples, &mut rng, Some(&f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessSeries {
    pub label: String,
    /// `P(crash | evasive)` per target step.
    pub crash_given_evasive: Vec<ProbabilityEstimate>,
    /// `P(crash | no action)` per target step.
    pub crash_given_no_action: Vec<ProbabilityEstimate>,
    /// `E_t = P(crash | no action) - P(crash | evasive)`.
    pub effectiveness: Vec<ProbabilityEstimate>,
}

impl EffectivenessSeries {
    /// Mean of `E_t` over steps and its standard error (independent steps).
    pub fn mean(&self) -> ProbabilityEstimate {
        let n = self.effectiveness.len() as f64;
        let value = self.effectiveness.iter().map(|e| e.value).sum::<f64>() / n;
        let var = self.effectiveness.iter().map(|e| e.stderr * e.stderr).sum::<f64>() / (n * n);
        ProbabilityEstimate {
            value,
            stderr: var.sqrt(),
            n_samples: self.effectiveness.iter().map(|e| e.n_samples).min().unwrap_or(0),
        }
    }
}

fn named(name: &str) -> Action {
    action_taxonomy()
        .into_iter()
        .find(|a| a.name == name)
        .expect("taxonomy action")
}

/// Conditional crash probability at every step of a rollout forced into `action`.
pub fn crash_given_forced_action(
    model: &ForecastModel,
    stats: &ChannelStats,
    window_model_space: &Array2<f64>,
    action: &Action,
    config: &ProbConfig,
    stream: u64,
) -> Result<Vec<ProbabilityEstimate>> {
    let spec = CounterfactualSpec::for_action(action);
    let rollout = forced_rollout(
        model,
        stats,
        window_model_space,
        &spec,
        config.n_rollouts,
        seed::derive(config.seed, &[0x6366, stream]),
    )?;
    let cfg = ProbConfig {
        seed: seed::derive(config.seed, &[0x6371, stream]),
        ..config.clone()
    };
    (1..=TARGET_LEN)
        .map(|t| StepQuery::from_rollout(model, stats, &rollout, t, &cfg)?.conditional_crash_probability(action))
        .collect()
}

/// Evasive-action effectiveness over the ten target steps. Each action is
/// evaluated under its own forced rollout, with `U` the per-context speed
/// band of that rollout.
pub fn effectiveness(
    model: &ForecastModel,
    stats: &ChannelStats,
    window_model_space: &Array2<f64>,
    label: &str,
    config: &ProbConfig,
) -> Result<EffectivenessSeries> {
    let eva = crash_given_forced_action(model, stats, window_model_space, &named("evasive"), config, 1)?;
    let no = crash_given_forced_action(model, stats, window_model_space, &named("no_action"), config, 2)?;
    let effectiveness = no.iter().zip(&eva).map(|(n, e)| n.minus(e)).collect();
    Ok(EffectivenessSeries {
        label: label.to_string(),
        crash_given_evasive: eva,
        crash_given_no_action: no,
        effectiveness,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VacuousCheck {
    pub follower_accel: KsResult,
    pub ttc: KsResult,
}

impl VacuousCheck {
    pub fn indistinguishable(&self, level: f64) -> bool {
        self.follower_accel.p_value > level && self.ttc.p_value > level
    }
}

/// Compares a rollout forced into the full `[-6, 6]` band with an unforced
/// rollout drawn from an independent stream, on `a_i` and TTC at `step`.
pub fn vacuous_intervention_check(
    model: &ForecastModel,
    stats: &ChannelStats,
    window_model_space: &Array2<f64>,
    n_samples: usize,
    step: usize,
    seed: u64,
) -> Result<VacuousCheck> {
    let spec = CounterfactualSpec::truncated(-ACCEL_LIMIT, ACCEL_LIMIT);
    let forced = forced_rollout(model, stats, window_model_space, &spec, n_samples, seed::derive(seed, &[1]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[2]));
    let free = model.rollout(window_model_space, n_samples, &mut rng, None)?;
    let col = |r: &Rollout, c: usize| r.step(step).column(c).to_vec();
    Ok(VacuousCheck {
        follower_accel: ks_two_sample(&col(&forced, A_I), &col(&free, A_I))?,
        ttc: ks_two_sample(&col(&forced, TTC), &col(&free, TTC))?,
    })
}

/// Writes the effectiveness report (percent, 2 decimals) and its stderr twin.
pub fn write_effectiveness_csv(series: &[EffectivenessSeries], values: &Path, stderrs: &Path) -> Result<()> {
    let header: Vec<String> = ["context".to_string(), "quantity".to_string()]
        .into_iter()
        .chain((1..=TARGET_LEN).map(|t| format!("t{t}")))
        .collect();
    let mut wv = csv::Writer::from_path(values)?;
    let mut ws = csv::Writer::from_path(stderrs)?;
    wv.write_record(&header)?;
    ws.write_record(&header)?;
    for s in series {
        for (name, row) in [
            ("P(crash|eva)", &s.crash_given_evasive),
            ("P(crash|no)", &s.crash_given_no_action),
            ("E", &s.effectiveness),
        ] {
            let mut rv = vec![s.label.clone(), name.to_string()];
            let mut rs = rv.clone();
            for p in row {
                rv.push(format!("{:.2}", 100.0 * p.value));
                rs.push(format!("{:.2}", 100.0 * p.stderr));
            }
            wv.write_record(&rv)?;
            ws.write_record(&rs)?;
        }
    }
    wv.flush()?;
    ws.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        CounterfactualSpec::truncated(-0.5, 0.5).validate().unwrap();
        assert!(CounterfactualSpec::truncated(-7.0, 0.5).validate().is_err());
        assert!(CounterfactualSpec::fixed(6.5).validate().is_err());
        let mut s = CounterfactualSpec::fixed(0.0);
        s.steps = vec![0];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn forcing_converts_to_model_space() {
        let stats = ChannelStats::new([0.0, 0.0, -1.0, 0.0, 0.0], [1.0, 1.0, 2.0, 1.0, 1.0]).unwrap();
        let mut spec = CounterfactualSpec::truncated(-3.0, 1.0);
        spec.steps = vec![2, 5];
        let f = spec.to_step_forcing(&stats).unwrap();
        assert_eq!(f.forcing.constraint, Constraint::Interval { lo: -1.0, hi: 1.0 });
        assert_eq!(f.steps.iter().filter(|s| **s).count(), 2);
        assert!(f.steps[1] && f.steps[4]);
    }

    #[test]
    fn identical_series_give_zero_effectiveness() {
        let p = ProbabilityEstimate {
            value: 0.2,
            stderr: 0.01,
            n_samples: 10,
        };
        let s = EffectivenessSeries {
            label: "x".into(),
            crash_given_evasive: vec![p; 10],
            crash_given_no_action: vec![p; 10],
            effectiveness: vec![p.minus(&p); 10],
        };
        assert_eq!(s.mean().value, 0.0);
        assert!(s.effectiveness.iter().all(|e| e.value.abs() <= 1.0));
    }
}
