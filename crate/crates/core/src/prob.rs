//! Monte Carlo probabilities of action and crash events under the learned
//! grouped densities.
//!
//! Events are boxes over `(v_i, v_j, a_i, a_j, ttc)`. Integrals use uniform
//! proposals over the box; a TTC interval that is unbounded below is mapped
//! to `[0, 1)` by `y = c - s / (1 - s)` with Jacobian `1 / (1 - s)^2`.
//! Three nested integrals cover every quantity:
//!
//! * `U`:   `∫_U p(u|k)`
//! * `UX`:  `∫_U ∫_X p(x|u,k) p(u|k)`
//! * `UXY`: `∫_U ∫_X ∫_Y p(y|x,u,k) p(x|u,k) p(u|k)`
//!
//! and conditional probabilities are ratios of two of them with delta-method
//! standard errors.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::GroupedLogProb;
use crate::model::{ForecastModel, Rollout};
use crate::seed;
use crate::ssm::{ChannelStats, A_I, A_J, CHANNELS, TTC, V_I, V_J};
use crate::stats::quantile;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(f(self.lo), f(self.hi))
    }
}

/// Box over the five channels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventBox {
    pub u: [Interval; 2],
    pub x: [Interval; 2],
    pub y: Interval,
}

impl EventBox {
    pub fn validate(&self) -> Result<()> {
        for (name, iv) in [("v_i", self.u[0]), ("v_j", self.u[1]), ("a_i", self.x[0]), ("a_j", self.x[1])] {
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo <= iv.hi) {
                return Err(Error::InvalidInput(format!("{name} interval [{}, {}] must be finite and ordered", iv.lo, iv.hi)));
            }
        }
        let y = self.y;
        if !(y.hi.is_finite() && (y.lo == f64::NEG_INFINITY || (y.lo.is_finite() && y.lo <= y.hi))) {
            return Err(Error::InvalidInput(format!(
                "ttc interval [{}, {}] must be ordered with only the lower bound unbounded",
                y.lo, y.hi
            )));
        }
        Ok(())
    }

    fn channel(&self, c: usize) -> Interval {
        match c {
            V_I => self.u[0],
            V_J => self.u[1],
            A_I => self.x[0],
            A_J => self.x[1],
            _ => self.y,
        }
    }

    /// Converts physical bounds into model space.
    pub fn to_model(&self, stats: &ChannelStats) -> Self {
        let m = |c: usize| self.channel(c).map(|v| if v.is_finite() { stats.to_model(c, v) } else { v });
        Self {
            u: [m(V_I), m(V_J)],
            x: [m(A_I), m(A_J)],
            y: m(TTC),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    U,
    UX,
    UXY,
}

impl Level {
    fn dims(self) -> usize {
        match self {
            Level::U => 2,
            Level::UX => 4,
            Level::UXY => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

impl ProbabilityEstimate {
    pub const fn exact(value: f64) -> Self {
        Self {
            value,
            stderr: 0.0,
            n_samples: 0,
        }
    }

    /// `self / other` for independent estimates (delta method).
    pub fn ratio(&self, denom: &Self) -> Result<Self> {
        if self.value == 0.0 && self.stderr == 0.0 {
            return Ok(Self::exact(0.0));
        }
        if !(denom.value > 5.0 * denom.stderr) || denom.value <= 0.0 {
            return Err(Error::UnstableDenominator {
                value: denom.value,
                stderr: denom.stderr,
            });
        }
        let r = self.value / denom.value;
        let d2 = denom.value * denom.value;
        let var = self.stderr.powi(2) / d2 + self.value.powi(2) * denom.stderr.powi(2) / (d2 * d2);
        Ok(Self {
            value: r,
            stderr: var.sqrt(),
            n_samples: self.n_samples.min(denom.n_samples),
        })
    }

    /// `self - other` for independent estimates.
    pub fn minus(&self, other: &Self) -> Self {
        Self {
            value: self.value - other.value,
            stderr: self.stderr.hypot(other.stderr),
            n_samples: self.n_samples.min(other.n_samples),
        }
    }

    /// Sum of independent estimates.
    pub fn sum<'e>(parts: impl IntoIterator<Item = &'e Self>) -> Self {
        let mut acc = Self::exact(0.0);
        acc.n_samples = usize::MAX;
        for p in parts {
            acc.value += p.value;
            acc.stderr = acc.stderr.hypot(p.stderr);
            acc.n_samples = acc.n_samples.min(p.n_samples);
        }
        acc
    }

    fn clamp_unit(mut self) -> Self {
        self.value = self.value.clamp(0.0, 1.0);
        self
    }
}

/// Anything that can return grouped log-densities at a batch of points.
/// Row `i` of the batch may be evaluated under a context chosen by `i`.
pub trait GroupedDensity {
    fn grouped_logprob(&self, points: ArrayView2<f64>, first_index: usize) -> Result<GroupedLogProb>;
}

/// Equal-weight mixture over rollout contexts at one target step; point `i`
/// is evaluated under context `i mod R`, an unbiased stand-in for the full mixture.
pub struct ContextMixture<'a> {
    pub model: &'a ForecastModel,
    pub contexts: Array2<f64>,
}

impl GroupedDensity for ContextMixture<'_> {
    fn grouped_logprob(&self, points: ArrayView2<f64>, first_index: usize) -> Result<GroupedLogProb> {
        let r = self.contexts.nrows();
        let rows: Vec<usize> = (0..points.nrows()).map(|i| (first_index + i) % r).collect();
        let k = self.contexts.select(ndarray::Axis(0), &rows);
        self.model.flow.grouped_logprob(&self.model.params, points, k.view())
    }
}

/// Independent Gaussian per channel; a closed-form stand-in for tests.
pub struct IndependentGaussian {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl IndependentGaussian {
    pub fn standard() -> Self {
        Self {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }
}

impl GroupedDensity for IndependentGaussian {
    fn grouped_logprob(&self, points: ArrayView2<f64>, _first_index: usize) -> Result<GroupedLogProb> {
        let lp = |c: usize| {
            points.column(c).mapv(|v| {
                let z = (v - self.mean[c]) / self.std[c];
                crate::flow::log_std_normal(z) - self.std[c].ln()
            })
        };
        Ok(GroupedLogProb {
            u: lp(0) + lp(1),
            x: lp(2) + lp(3),
            y: lp(4),
        })
    }
}

const CHUNK: usize = 4096;

/// Integral of the grouped density over the first `level` groups of `bx`
/// (model space) with `n` uniform proposals.
pub fn mc_integrate_level(
    density: &dyn GroupedDensity,
    bx: &EventBox,
    level: Level,
    n: usize,
    seed: u64,
) -> Result<ProbabilityEstimate> {
    bx.validate()?;
    if n < 2 {
        return Err(Error::InvalidInput("need at least two integration points".into()));
    }
    let dims = level.dims();
    let ivs: Vec<Interval> = (0..dims).map(|c| bx.channel(c)).collect();
    if ivs.iter().any(|iv| iv.lo.is_finite() && iv.width() == 0.0) {
        return Ok(ProbabilityEstimate::exact(0.0));
    }
    let unbounded_y = dims == 5 && bx.y.lo == f64::NEG_INFINITY;
    let volume: f64 = ivs
        .iter()
        .enumerate()
        .map(|(c, iv)| if c == TTC && unbounded_y { 1.0 } else { iv.width() })
        .product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut done = 0;
    while done < n {
        let m = CHUNK.min(n - done);
        let mut pts = Array2::zeros((m, CHANNELS));
        let mut jac = Array1::<f64>::ones(m);
        for i in 0..m {
            for (c, iv) in ivs.iter().enumerate() {
                let r: f64 = rng.random();
                pts[[i, c]] = if c == TTC && unbounded_y {
                    jac[i] = 1.0 / ((1.0 - r) * (1.0 - r));
                    iv.hi - r / (1.0 - r)
                } else {
                    iv.lo + r * iv.width()
                };
            }
        }
        let g = density.grouped_logprob(pts.view(), done)?;
        for i in 0..m {
            let lp = match level {
                Level::U => g.u[i],
                Level::UX => g.u[i] + g.x[i],
                Level::UXY => g.u[i] + g.x[i] + g.y[i],
            };
            let f = lp.exp() * jac[i];
            sum += f;
            sum_sq += f * f;
        }
        done += m;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    let (value, stderr) = (volume * mean, volume * (var / nf).sqrt());
    if !value.is_finite() {
        return Err(Error::NumericFault {
            layer: 0,
            detail: "non-finite Monte Carlo integrand".into(),
        });
    }
    Ok(ProbabilityEstimate {
        value,
        stderr,
        n_samples: n,
    })
}

/// Full five-dimensional integral over `bx`.
pub fn mc_integrate(density: &dyn GroupedDensity, bx: &EventBox, n: usize, seed: u64) -> Result<ProbabilityEstimate> {
    mc_integrate_level(density, bx, Level::UXY, n, seed)
}

/// Named acceleration band for `a_i`, with `a_j` left free over `[-6, 6]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub name: String,
    pub a_i: Interval,
}

pub const ACCEL_LIMIT: f64 = 6.0;

/// Evasive, large and small deceleration, no action, acceleration.
pub fn action_taxonomy() -> Vec<Action> {
    [
        ("evasive", -6.0, -3.0),
        ("large_decel", -3.0, -2.0),
        ("small_decel", -2.0, -0.5),
        ("no_action", -0.5, 0.5),
        ("acceleration", 0.5, 6.0),
    ]
    .into_iter()
    .map(|(n, lo, hi)| Action {
        name: n.to_string(),
        a_i: Interval::new(lo, hi),
    })
    .collect()
}

pub fn full_action() -> Action {
    Action {
        name: "all".into(),
        a_i: Interval::new(-ACCEL_LIMIT, ACCEL_LIMIT),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    /// Percentiles of the model's own sampled speeds at the queried step.
    PerContext,
    /// Fixed speed band supplied by the caller (e.g. dataset-wide percentiles).
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbConfig {
    pub n_integration: usize,
    pub n_rollouts: usize,
    pub band_percentiles: [f64; 2],
    pub band_mode: BandMode,
    /// Physical speed band used in global mode.
    pub global_band: Option<[Interval; 2]>,
    /// Physical crash threshold on TTC.
    pub crash_ttc: f64,
    pub seed: u64,
}

impl Default for ProbConfig {
    fn default() -> Self {
        Self {
            n_integration: 10_000,
            n_rollouts: 1000,
            band_percentiles: [25.0, 75.0],
            band_mode: BandMode::PerContext,
            global_band: None,
            crash_ttc: 0.0,
            seed: 0,
        }
    }
}

impl ProbConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.band_percentiles;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::Config(format!("band percentiles [{lo}, {hi}] must be increasing within [0, 100]")));
        }
        if self.n_integration < 2 || self.n_rollouts == 0 {
            return Err(Error::Config("n_integration must be >= 2 and n_rollouts positive".into()));
        }
        if self.band_mode == BandMode::Global && self.global_band.is_none() {
            return Err(Error::Config("global band mode needs global_band".into()));
        }
        Ok(())
    }
}

/// Everything needed to answer queries at one target step of one window.
pub struct StepQuery<'a> {
    pub t: usize,
    pub density: ContextMixture<'a>,
    pub stats: &'a ChannelStats,
    /// Physical speed band `U`.
    pub band: [Interval; 2],
    pub config: &'a ProbConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Kind {
    U = 1,
    UX = 2,
    UXY = 3,
}

impl<'a> StepQuery<'a> {
    /// Builds the query for step `t` from a rollout of the window.
    pub fn from_rollout(
        model: &'a ForecastModel,
        stats: &'a ChannelStats,
        rollout: &Rollout,
        t: usize,
        config: &'a ProbConfig,
    ) -> Result<Self> {
        config.validate()?;
        if !(1..=rollout.contexts.len()).contains(&t) {
            return Err(Error::InvalidInput(format!("target step {t} outside 1..={}", rollout.contexts.len())));
        }
        let band = match config.band_mode {
            BandMode::Global => config.global_band.expect("validated"),
            BandMode::PerContext => {
                let u = rollout.step(t);
                let [plo, phi] = config.band_percentiles;
                let b = |c: usize| {
                    let phys = u.column(c).mapv(|v| stats.to_physical(c, v));
                    Interval::new(quantile(phys.iter().copied(), plo / 100.0), quantile(phys.iter().copied(), phi / 100.0))
                };
                [b(V_I), b(V_J)]
            }
        };
        Ok(Self {
            t,
            density: ContextMixture {
                model,
                contexts: rollout.contexts[t - 1].clone(),
            },
            stats,
            band,
            config,
        })
    }

    fn event(&self, action: &Action, y_hi: f64) -> EventBox {
        EventBox {
            u: self.band,
            x: [action.a_i, Interval::new(-ACCEL_LIMIT, ACCEL_LIMIT)],
            y: Interval::new(f64::NEG_INFINITY, y_hi),
        }
    }

    fn integral(&self, bx_phys: &EventBox, kind: Kind) -> Result<ProbabilityEstimate> {
        let level = match kind {
            Kind::U => Level::U,
            Kind::UX => Level::UX,
            Kind::UXY => Level::UXY,
        };
        let mut key: Vec<f64> = bx_phys.u.iter().chain(bx_phys.x.iter()).flat_map(|iv| [iv.lo, iv.hi]).collect();
        if kind == Kind::UXY {
            key.push(bx_phys.y.hi);
        }
        let s = seed::derive(self.config.seed, &[self.t as u64, kind as u64, seed::hash_f64s(&key)]);
        mc_integrate_level(&self.density, &bx_phys.to_model(self.stats), level, self.config.n_integration, s)
    }

    /// `P(u ∈ U)`.
    pub fn condition_probability(&self) -> Result<ProbabilityEstimate> {
        self.integral(&self.event(&full_action(), self.config.crash_ttc), Kind::U)
    }

    /// `P(x ∈ X, u ∈ U)`.
    pub fn joint_action_probability(&self, action: &Action) -> Result<ProbabilityEstimate> {
        if action.a_i.width() <= 0.0 {
            return Ok(ProbabilityEstimate::exact(0.0));
        }
        self.integral(&self.event(action, self.config.crash_ttc), Kind::UX)
    }

    /// `P(x ∈ X | u ∈ U)`.
    pub fn conditional_action_probability(&self, action: &Action) -> Result<ProbabilityEstimate> {
        let num = self.joint_action_probability(action)?;
        if num.value == 0.0 && num.stderr == 0.0 {
            return Ok(num);
        }
        num.ratio(&self.condition_probability()?)
    }

    /// `P(ttc <= y_hi, x ∈ X, u ∈ U)` with `y_hi` physical.
    pub fn joint_crash_probability_below(&self, action: &Action, y_hi: f64) -> Result<ProbabilityEstimate> {
        if action.a_i.width() <= 0.0 {
            return Ok(ProbabilityEstimate::exact(0.0));
        }
        self.integral(&self.event(action, y_hi), Kind::UXY)
    }

    /// Crash probability: TTC at or below the crash threshold, any action, `u` in the band.
    pub fn crash_probability(&self) -> Result<ProbabilityEstimate> {
        self.joint_crash_probability_below(&full_action(), self.config.crash_ttc)
    }

    /// `P(crash | x ∈ X, u ∈ U)`, clipped to `[0, 1]`.
    pub fn conditional_crash_probability(&self, action: &Action) -> Result<ProbabilityEstimate> {
        let num = self.joint_crash_probability_below(action, self.config.crash_ttc)?;
        let den = self.joint_action_probability(action)?;
        Ok(num.ratio(&den)?.clamp_unit())
    }

    /// The four table rows for one action.
    pub fn table_entry(&self, action: &Action) -> Result<TableEntry> {
        let u = self.condition_probability()?;
        let ux = self.joint_action_probability(action)?;
        let uxy = self.joint_crash_probability_below(action, self.config.crash_ttc)?;
        let px_u = if ux.value == 0.0 && ux.stderr == 0.0 { ux } else { ux.ratio(&u)? };
        let py_xu = if uxy.value == 0.0 && uxy.stderr == 0.0 {
            Some(uxy)
        } else {
            match uxy.ratio(&ux) {
                Ok(r) => Some(r.clamp_unit()),
                Err(Error::UnstableDenominator { .. }) => None,
                Err(e) => return Err(e),
            }
        };
        Ok(TableEntry {
            action_given_condition: px_u,
            crash_action_condition: uxy,
            action_condition: ux,
            crash_given_action_condition: py_xu,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    /// `P(X|U)`
    pub action_given_condition: ProbabilityEstimate,
    /// `P(Y,X,U)`
    pub crash_action_condition: ProbabilityEstimate,
    /// `P(X,U)`
    pub action_condition: ProbabilityEstimate,
    /// `P(Y|X,U)`; `None` when `P(X,U)` is too small to divide by.
    pub crash_given_action_condition: Option<ProbabilityEstimate>,
}

impl TableEntry {
    pub const ROW_NAMES: [&'static str; 4] = ["P(X|U)", "P(Y,X,U)", "P(X,U)", "P(Y|X,U)"];

    pub fn rows(&self) -> [Option<ProbabilityEstimate>; 4] {
        [
            Some(self.action_given_condition),
            Some(self.crash_action_condition),
            Some(self.action_condition),
            self.crash_given_action_condition,
        ]
    }
}

/// Per-action, per-step probability table of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityTable {
    pub actions: Vec<Action>,
    /// `entries[action][t - 1]`.
    pub entries: Vec<Vec<TableEntry>>,
    pub crash: Vec<ProbabilityEstimate>,
    /// `P(u ∈ U)` per step, the shared denominator of `P(X | U)`.
    pub condition: Vec<ProbabilityEstimate>,
    pub bands: Vec<[Interval; 2]>,
}

impl ProbabilityTable {
    /// `sum over actions of P(X | U)` per target step. The joint integrals are
    /// summed first so the shared denominator enters the stderr only once.
    pub fn action_sums(&self) -> Result<Vec<ProbabilityEstimate>> {
        (0..self.crash.len())
            .map(|t| ProbabilityEstimate::sum(self.entries.iter().map(|row| &row[t].action_condition)).ratio(&self.condition[t]))
            .collect()
    }
}

/// Rolls the window out once and evaluates every action at every target step.
pub fn probability_table(
    model: &ForecastModel,
    stats: &ChannelStats,
    window_model_space: &Array2<f64>,
    actions: &[Action],
    config: &ProbConfig,
) -> Result<ProbabilityTable> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[0x726f]));
    let rollout = model.rollout(window_model_space, config.n_rollouts, &mut rng, None)?;
    let steps = rollout.contexts.len();
    let mut entries = vec![Vec::with_capacity(steps); actions.len()];
    let mut crash = Vec::with_capacity(steps);
    let mut condition = Vec::with_capacity(steps);
    let mut bands = Vec::with_capacity(steps);
    for t in 1..=steps {
        let q = StepQuery::from_rollout(model, stats, &rollout, t, config)?;
        for (i, a) in actions.iter().enumerate() {
            entries[i].push(q.table_entry(a)?);
        }
        crash.push(q.crash_probability()?);
        condition.push(q.condition_probability()?);
        bands.push(q.band);
    }
    Ok(ProbabilityTable {
        actions: actions.to_vec(),
        entries,
        crash,
        condition,
        bands,
    })
}

/// Maximum over target steps of the crash probability, rolling out once.
pub fn max_crash_probability(
    model: &ForecastModel,
    stats: &ChannelStats,
    window_model_space: &Array2<f64>,
    config: &ProbConfig,
) -> Result<ProbabilityEstimate> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[0x726f]));
    let rollout = model.rollout(window_model_space, config.n_rollouts, &mut rng, None)?;
    let mut best: Option<ProbabilityEstimate> = None;
    for t in 1..=rollout.contexts.len() {
        let p = StepQuery::from_rollout(model, stats, &rollout, t, config)?.crash_probability()?;
        if best.is_none_or(|b| p.value > b.value) {
            best = Some(p);
        }
    }
    Ok(best.expect("ten steps"))
}

/// Writes the value table (percent, 2 decimals) and the aligned stderr table.
pub fn write_table_csv(table: &ProbabilityTable, values: &std::path::Path, stderrs: &std::path::Path) -> Result<()> {
    let steps = table.crash.len();
    let header: Vec<String> = ["action".to_string(), "quantity".to_string()]
        .into_iter()
        .chain((1..=steps).map(|t| format!("t{t}")))
        .collect();
    let mut wv = csv::Writer::from_path(values)?;
    let mut ws = csv::Writer::from_path(stderrs)?;
    wv.write_record(&header)?;
    ws.write_record(&header)?;
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    for (a, row) in table.actions.iter().zip(&table.entries) {
        for (qi, qname) in TableEntry::ROW_NAMES.iter().enumerate() {
            let mut rv = vec![a.name.clone(), qname.to_string()];
            let mut rs = rv.clone();
            for e in row {
                match e.rows()[qi] {
                    Some(p) => {
                        rv.push(pct(p.value));
                        rs.push(pct(p.stderr));
                    }
                    None => {
                        rv.push("NA".into());
                        rs.push("NA".into());
                    }
                }
            }
            wv.write_record(&rv)?;
            ws.write_record(&rs)?;
        }
    }
    let mut rv = vec!["sum".to_string(), TableEntry::ROW_NAMES[0].to_string()];
    let mut rs = rv.clone();
    for p in table.action_sums()? {
        rv.push(pct(p.value));
        rs.push(pct(p.stderr));
    }
    wv.write_record(&rv)?;
    ws.write_record(&rs)?;
    let mut rv = vec!["all".to_string(), "P(crash)".to_string()];
    let mut rs = rv.clone();
    for p in &table.crash {
        rv.push(pct(p.value));
        rs.push(pct(p.stderr));
    }
    wv.write_record(&rv)?;
    ws.write_record(&rs)?;
    wv.flush()?;
    ws.flush()?;
    Ok(())
}
