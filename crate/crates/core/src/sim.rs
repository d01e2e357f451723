//! Synthetic two-vehicle car-following interactions.
//!
//! The follower (vehicle `i`) approaches a leader (vehicle `j`). Once the
//! perceived TTC drops below `trigger_ttc`, the follower waits
//! `reaction_delay` steps and then brakes at a rate drawn uniformly from
//! `brake_range`, until it is no longer closing in. Acceleration noise is
//! added throughout; while braking the noisy rate stays inside `brake_range`. The same simulator, rolled out many
//! times, gives a ground-truth crash probability for a configuration.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::ssm::io::{DatasetMeta, ValueSpace, WindowDataset};
use crate::ssm::{
    compute_ttc, differentiate_speed, window_interactions, A_I, A_J, CHANNELS, DEFAULT_TTC_CAP, DT, V_I, V_J, WINDOW_LEN,
};

pub const MAX_ACCEL: f64 = 6.0;
/// Gap below which the vehicles are considered in contact.
pub const CONTACT_GAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderProfile {
    Stopped,
    Constant,
    Decelerating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub initial_gap: f64,
    pub leader_speed: f64,
    pub follower_speed: f64,
    pub leader_profile: LeaderProfile,
    pub trigger_ttc: f64,
    pub brake_range: [f64; 2],
    pub accel_noise_std: f64,
    pub reaction_delay: usize,
    pub horizon: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Leader deceleration (m/s², positive) for the decelerating profile.
    #[serde(default = "default_leader_decel")]
    pub leader_decel: f64,
    #[serde(default = "default_cap")]
    pub ttc_cap: f64,
    /// Std of sensor noise on the recorded speeds (m/s). Recorded TTC is
    /// computed from the true gap and the recorded speeds; the vehicle state
    /// and the crash event are unaffected.
    #[serde(default)]
    pub speed_noise_std: f64,
    #[serde(default)]
    pub acceleration_record: AccelRecord,
}

/// How the recorded acceleration channels are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccelRecord {
    /// The acceleration applied over the following step.
    #[default]
    Applied,
    /// Differentiated from the recorded speeds, as for measured trajectories.
    Differenced,
}

fn default_dt() -> f64 {
    DT
}
fn default_leader_decel() -> f64 {
    1.5
}
fn default_cap() -> f64 {
    DEFAULT_TTC_CAP
}

impl ScenarioConfig {
    /// Rear-end approach to a stopped leader with late, hard braking.
    pub fn conflict() -> Self {
        Self {
            initial_gap: 15.0,
            leader_speed: 0.0,
            follower_speed: 8.0,
            leader_profile: LeaderProfile::Stopped,
            trigger_ttc: 1.5,
            brake_range: [-6.0, -3.0],
            accel_noise_std: 0.3,
            reaction_delay: 3,
            horizon: 40,
            dt: DT,
            leader_decel: default_leader_decel(),
            ttc_cap: DEFAULT_TTC_CAP,
            speed_noise_std: 0.0,
            acceleration_record: AccelRecord::Applied,
        }
    }

    /// Gentle approach to a slower leader with early, soft braking.
    pub fn normal() -> Self {
        Self {
            initial_gap: 25.0,
            leader_speed: 6.0,
            follower_speed: 12.0,
            leader_profile: LeaderProfile::Constant,
            trigger_ttc: 3.5,
            brake_range: [-2.0, -0.5],
            accel_noise_std: 0.3,
            reaction_delay: 2,
            horizon: 40,
            dt: DT,
            leader_decel: default_leader_decel(),
            ttc_cap: DEFAULT_TTC_CAP,
            speed_noise_std: 0.0,
            acceleration_record: AccelRecord::Applied,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.initial_gap > 0.0 && self.initial_gap.is_finite()) {
            return bad(format!("initial_gap must be positive, got {}", self.initial_gap));
        }
        if !(self.leader_speed >= 0.0 && self.follower_speed >= 0.0) {
            return bad("speeds must be non-negative".into());
        }
        if self.horizon < WINDOW_LEN {
            return bad(format!("horizon must be at least {WINDOW_LEN} steps, got {}", self.horizon));
        }
        let [lo, hi] = self.brake_range;
        if !(lo <= hi && lo >= -MAX_ACCEL && hi <= 0.0) {
            return bad(format!("brake_range [{lo}, {hi}] must lie within [-6, 0]"));
        }
        if !(self.accel_noise_std >= 0.0 && self.speed_noise_std >= 0.0) {
            return bad("noise standard deviations must be non-negative".into());
        }
        if !(self.dt > 0.0 && self.ttc_cap > 0.0 && self.leader_decel >= 0.0 && self.trigger_ttc >= 0.0) {
            return bad("dt, ttc_cap must be positive; leader_decel, trigger_ttc non-negative".into());
        }
        Ok(())
    }
}

/// Output of one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedInteraction {
    /// `L x 5` channels `(v_i, v_j, a_i, a_j, ttc)`; stops at the last step before contact.
    pub streams: Array2<f64>,
    /// Gap at every recorded step, plus the gap after the final update.
    pub gaps: Vec<f64>,
    /// Step index at which the gap first reached zero.
    pub crash_step: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
enum Braking {
    Idle,
    Pending { start: usize, rate: f64 },
    Active { rate: f64 },
}

/// Runs one interaction; deterministic given `seed`.
pub fn simulate_interaction(config: &ScenarioConfig, seed: u64) -> Result<SimulatedInteraction> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.accel_noise_std.max(0.0)).expect("valid std");
    let sensor = Normal::new(0.0, config.speed_noise_std).expect("valid std");
    let mut sensor_rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x73656e]));
    let dt = config.dt;
    let stopped = config.leader_profile == LeaderProfile::Stopped;

    let (mut xi, mut xj) = (0.0, config.initial_gap);
    let mut vi = config.follower_speed;
    let mut vj = if stopped { 0.0 } else { config.leader_speed };
    let mut braking = Braking::Idle;
    let mut rows: Vec<[f64; CHANNELS]> = Vec::with_capacity(config.horizon);
    let mut gaps = vec![xj - xi];
    let mut crash_step = None;

    for k in 0..config.horizon {
        let gap = xj - xi;
        let ttc = compute_ttc(gap, vi, vj, config.ttc_cap)?;

        // both noise draws happen every step so streams stay aligned across configs
        let ni: f64 = noise.sample(&mut rng).clamp(-MAX_ACCEL, MAX_ACCEL);
        let nj: f64 = noise.sample(&mut rng).clamp(-MAX_ACCEL, MAX_ACCEL);
        let draw: f64 = rng.random();

        braking = match braking {
            Braking::Idle if ttc < config.trigger_ttc => {
                let [lo, hi] = config.brake_range;
                Braking::Pending {
                    start: k + config.reaction_delay,
                    rate: lo + (hi - lo) * draw,
                }
            }
            Braking::Pending { start, rate } if k >= start => Braking::Active { rate },
            Braking::Active { .. } if vi <= vj => Braking::Idle,
            other => other,
        };
        let [blo, bhi] = config.brake_range;
        let mut ai = match braking {
            Braking::Active { rate } => (rate + ni).clamp(blo, bhi),
            _ => ni,
        };
        let mut aj = match config.leader_profile {
            LeaderProfile::Stopped => 0.0,
            LeaderProfile::Constant => nj,
            LeaderProfile::Decelerating => (-config.leader_decel + nj).clamp(-MAX_ACCEL, MAX_ACCEL),
        };
        ai = ai.clamp(-MAX_ACCEL, MAX_ACCEL);
        if vi + ai * dt < 0.0 {
            ai = -vi / dt;
        }
        if vj + aj * dt < 0.0 {
            aj = -vj / dt;
        }

        if config.speed_noise_std > 0.0 {
            let (mi, mj) = (
                (vi + sensor.sample(&mut sensor_rng)).max(0.0),
                (vj + sensor.sample(&mut sensor_rng)).max(0.0),
            );
            rows.push([mi, mj, ai, aj, compute_ttc(gap, mi, mj, config.ttc_cap)?]);
        } else {
            rows.push([vi, vj, ai, aj, ttc]);
        }
        xi += vi * dt + 0.5 * ai * dt * dt;
        xj += vj * dt + 0.5 * aj * dt * dt;
        vi += ai * dt;
        vj += aj * dt;
        let gap = xj - xi;
        gaps.push(gap);
        if gap <= CONTACT_GAP {
            crash_step = Some(k + 1);
            break;
        }
    }

    let mut streams = Array2::zeros((rows.len(), CHANNELS));
    for (t, r) in rows.iter().enumerate() {
        for c in 0..CHANNELS {
            streams[[t, c]] = r[c];
        }
    }
    if config.acceleration_record == AccelRecord::Differenced && rows.len() >= 3 {
        for (v, a) in [(V_I, A_I), (V_J, A_J)] {
            let speed: Vec<f64> = streams.column(v).to_vec();
            let acc = differentiate_speed(&speed, dt)?;
            for (t, x) in acc.into_iter().enumerate() {
                streams[[t, a]] = x.clamp(-MAX_ACCEL, MAX_ACCEL);
            }
        }
    }
    Ok(SimulatedInteraction {
        streams,
        gaps,
        crash_step,
    })
}

/// Monte Carlo crash frequency of a configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub crash_probability: f64,
    pub n_rollouts: usize,
    pub binomial_stderr: f64,
}

impl OracleEstimate {
    /// Normal-approximation 95% interval.
    pub fn ci95(&self) -> (f64, f64) {
        let h = 1.96 * self.binomial_stderr;
        ((self.crash_probability - h).max(0.0), (self.crash_probability + h).min(1.0))
    }
}

/// Fraction of `n_rollouts` independent rollouts that end in contact before the horizon.
pub fn oracle_crash_probability(config: &ScenarioConfig, n_rollouts: usize, seed: u64) -> Result<OracleEstimate> {
    if n_rollouts < 100 {
        return Err(Error::InvalidInput(format!("need at least 100 rollouts, got {n_rollouts}")));
    }
    let mut crashes = 0usize;
    for i in 0..n_rollouts {
        if simulate_interaction(config, seed::derive(seed, &[i as u64]))?
            .crash_step
            .is_some()
        {
            crashes += 1;
        }
    }
    let p = crashes as f64 / n_rollouts as f64;
    Ok(OracleEstimate {
        crash_probability: p,
        n_rollouts,
        binomial_stderr: (p * (1.0 - p) / n_rollouts as f64).sqrt(),
    })
}

/// Uniform ± perturbation applied independently to each simulated interaction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    #[serde(default)]
    pub initial_gap: f64,
    #[serde(default)]
    pub leader_speed: f64,
    #[serde(default)]
    pub follower_speed: f64,
    #[serde(default)]
    pub trigger_ttc: f64,
}

impl Jitter {
    pub fn apply(&self, base: &ScenarioConfig, rng: &mut ChaCha8Rng) -> ScenarioConfig {
        let mut j = |spread: f64| if spread > 0.0 { rng.random_range(-spread..=spread) } else { 0.0 };
        let mut c = base.clone();
        c.initial_gap = (c.initial_gap + j(self.initial_gap)).max(0.5);
        c.leader_speed = (c.leader_speed + j(self.leader_speed)).max(0.0);
        c.follower_speed = (c.follower_speed + j(self.follower_speed)).max(0.0);
        c.trigger_ttc = (c.trigger_ttc + j(self.trigger_ttc)).max(0.0);
        c
    }
}

/// One entry of a scenario suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub name: String,
    /// Number of windows to collect from this scenario.
    pub windows: usize,
    pub config: ScenarioConfig,
    #[serde(default)]
    pub jitter: Jitter,
}

/// A collection of scenarios turned into one windowed dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSuite {
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(rename = "scenario")]
    pub scenarios: Vec<SuiteEntry>,
}

fn default_stride() -> usize {
    5
}

impl ScenarioSuite {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::Config("scenario suite is empty".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        for s in &self.scenarios {
            s.config
                .validate()
                .map_err(|e| Error::Config(format!("scenario `{}`: {e}", s.name)))?;
        }
        Ok(())
    }

    /// Simulates every scenario until it has contributed its window quota.
    /// Windows are tagged with their scenario index.
    pub fn generate(&self, seed: u64) -> Result<WindowDataset> {
        self.validate()?;
        let mut windows = Vec::new();
        let mut origins = Vec::new();
        let mut cap = DEFAULT_TTC_CAP;
        for (si, entry) in self.scenarios.iter().enumerate() {
            cap = entry.config.ttc_cap;
            let mut collected = 0usize;
            let mut attempt = 0u64;
            let max_attempts = (entry.windows as u64 + 1) * 50;
            while collected < entry.windows {
                if attempt >= max_attempts {
                    return Err(Error::Data(format!(
                        "scenario `{}` produced only {collected} of {} windows in {attempt} interactions",
                        entry.name, entry.windows
                    )));
                }
                let run_seed = seed::derive(seed, &[si as u64, attempt]);
                let mut jrng = ChaCha8Rng::seed_from_u64(seed::derive(run_seed, &[0x6a]));
                let cfg = entry.jitter.apply(&entry.config, &mut jrng);
                let sim = simulate_interaction(&cfg, run_seed)?;
                for w in window_interactions(sim.streams.view(), WINDOW_LEN, self.stride)? {
                    if collected == entry.windows {
                        break;
                    }
                    windows.push(w);
                    origins.push(si as u32);
                    collected += 1;
                }
                attempt += 1;
            }
        }
        let mut meta = DatasetMeta::new(windows.len(), ValueSpace::Physical, cap);
        meta.seed = Some(seed);
        meta.origins = Some(origins);
        Ok(WindowDataset::new(windows, meta))
    }
}
