//! Surrogate-safety data model: kinematics, windowing, filtering,
//! standardisation and dataset splitting.
//!
//! A window is a `20 x 5` matrix sampled every 0.1 s with channels ordered
//! `(v_i, v_j, a_i, a_j, ttc)`: follower speed, leader speed, follower
//! acceleration, leader acceleration and time to collision. The first ten
//! steps are observed, the last ten are the forecast target.

pub mod io;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 5;
pub const WINDOW_LEN: usize = 20;
pub const OBSERVED_LEN: usize = 10;
pub const TARGET_LEN: usize = 10;
pub const DT: f64 = 0.1;
pub const DEFAULT_TTC_CAP: f64 = 10.0;
pub const DEFAULT_MIN_TTC_THRESHOLD: f64 = 4.0;

pub const V_I: usize = 0;
pub const V_J: usize = 1;
pub const A_I: usize = 2;
pub const A_J: usize = 3;
pub const TTC: usize = 4;

pub const CHANNEL_NAMES: [&str; CHANNELS] = ["v_i", "v_j", "a_i", "a_j", "ttc"];

/// Time to collision under constant speeds, capped at `cap` when the follower
/// is not closing in.
pub fn compute_ttc(gap: f64, v_follower: f64, v_leader: f64, cap: f64) -> Result<f64> {
    if !gap.is_finite() || gap <= 0.0 {
        return Err(Error::InvalidInput(format!("gap must be finite and positive, got {gap}")));
    }
    if !cap.is_finite() || cap <= 0.0 {
        return Err(Error::InvalidInput(format!("ttc cap must be positive, got {cap}")));
    }
    if !v_follower.is_finite() || !v_leader.is_finite() {
        return Err(Error::InvalidInput("speeds must be finite".into()));
    }
    let closing = v_follower - v_leader;
    if closing > 0.0 {
        Ok((gap / closing).min(cap))
    } else {
        Ok(cap)
    }
}

/// Acceleration from a sampled speed trace: central differences inside,
/// second-order one-sided differences at both ends.
pub fn differentiate_speed(speed: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = speed.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 samples, got {n}")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let mut out = vec![0.0; n];
    out[0] = (-3.0 * speed[0] + 4.0 * speed[1] - speed[2]) / (2.0 * dt);
    for i in 1..n - 1 {
        out[i] = (speed[i + 1] - speed[i - 1]) / (2.0 * dt);
    }
    out[n - 1] = (3.0 * speed[n - 1] - 4.0 * speed[n - 2] + speed[n - 3]) / (2.0 * dt);
    Ok(out)
}

/// One `20 x 5` interaction sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionWindow {
    values: Array2<f64>,
}

impl InteractionWindow {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.dim() != (WINDOW_LEN, CHANNELS) {
            return Err(Error::InvalidInput(format!(
                "window must be {WINDOW_LEN}x{CHANNELS}, got {:?}",
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("window contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn observed(&self) -> ArrayView2<'_, f64> {
        self.values.slice(s![..OBSERVED_LEN, ..])
    }

    pub fn target(&self) -> ArrayView2<'_, f64> {
        self.values.slice(s![OBSERVED_LEN.., ..])
    }

    pub fn min_ttc(&self) -> f64 {
        self.values.column(TTC).iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Checks the physical-unit invariants: `0 < ttc <= cap`, speeds `>= 0`.
    pub fn validate_physical(&self, ttc_cap: f64) -> Result<()> {
        for (t, row) in self.values.outer_iter().enumerate() {
            if row[V_I] < 0.0 || row[V_J] < 0.0 {
                return Err(Error::Data(format!("negative speed at step {t}")));
            }
            if !(row[TTC] > 0.0 && row[TTC] <= ttc_cap) {
                return Err(Error::Data(format!("ttc {} at step {t} outside (0, {ttc_cap}]", row[TTC])));
            }
        }
        Ok(())
    }
}

/// Cuts a `L x 5` stream into consecutive windows of `len` steps.
///
/// Yields `floor((L - len) / stride) + 1` windows, or none when the stream is
/// shorter than `len`.
pub fn window_interactions(stream: ArrayView2<'_, f64>, len: usize, stride: usize) -> Result<Vec<InteractionWindow>> {
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be positive".into()));
    }
    if len != WINDOW_LEN {
        return Err(Error::InvalidInput(format!("window length is fixed at {WINDOW_LEN}")));
    }
    if stream.ncols() != CHANNELS {
        return Err(Error::InvalidInput(format!("stream must have {CHANNELS} channels")));
    }
    let l = stream.nrows();
    if l < len {
        return Ok(Vec::new());
    }
    (0..=(l - len) / stride)
        .map(|k| InteractionWindow::new(stream.slice(s![k * stride..k * stride + len, ..]).to_owned()))
        .collect()
}

/// Keeps the windows whose minimum TTC is at most `threshold` seconds.
pub fn filter_min_ttc(windows: Vec<InteractionWindow>, threshold: f64) -> Vec<InteractionWindow> {
    windows.into_iter().filter(|w| w.min_ttc() <= threshold).collect()
}

/// Per-channel mean and standard deviation fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl ChannelStats {
    pub fn new(mean: [f64; CHANNELS], std: [f64; CHANNELS]) -> Result<Self> {
        for (c, s) in std.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::Config(format!(
                    "channel {} has non-positive standard deviation {s}",
                    CHANNEL_NAMES[c]
                )));
            }
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("channel mean must be finite".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    /// Population moments over every step of every window.
    pub fn fit(windows: &[InteractionWindow]) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Config("cannot fit channel statistics on an empty set".into()));
        }
        let n = (windows.len() * WINDOW_LEN) as f64;
        let mut mean = [0.0; CHANNELS];
        for w in windows {
            for row in w.values.outer_iter() {
                for c in 0..CHANNELS {
                    mean[c] += row[c];
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; CHANNELS];
        for w in windows {
            for row in w.values.outer_iter() {
                for c in 0..CHANNELS {
                    var[c] += (row[c] - mean[c]).powi(2);
                }
            }
        }
        let std = var.map(|v| (v / n).sqrt());
        Self::new(mean, std)
    }

    pub fn to_model(&self, channel: usize, value: f64) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn to_physical(&self, channel: usize, value: f64) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }

    /// Standardises every column of a `T x 5` matrix.
    pub fn standardize_matrix(&self, m: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = m.to_owned();
        for mut row in out.outer_iter_mut() {
            for c in 0..CHANNELS {
                row[c] = self.to_model(c, row[c]);
            }
        }
        out
    }

    pub fn destandardize_matrix(&self, m: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = m.to_owned();
        for mut row in out.outer_iter_mut() {
            for c in 0..CHANNELS {
                row[c] = self.to_physical(c, row[c]);
            }
        }
        out
    }

    pub fn standardize(&self, w: &InteractionWindow) -> InteractionWindow {
        InteractionWindow {
            values: self.standardize_matrix(w.values.view()),
        }
    }

    pub fn destandardize(&self, w: &InteractionWindow) -> InteractionWindow {
        InteractionWindow {
            values: self.destandardize_matrix(w.values.view()),
        }
    }
}

pub fn standardize(windows: &[InteractionWindow], stats: &ChannelStats) -> Vec<InteractionWindow> {
    windows.iter().map(|w| stats.standardize(w)).collect()
}

pub fn destandardize(windows: &[InteractionWindow], stats: &ChannelStats) -> Vec<InteractionWindow> {
    windows.iter().map(|w| stats.destandardize(w)).collect()
}

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<InteractionWindow>,
    pub validation: Vec<InteractionWindow>,
    pub test: Vec<InteractionWindow>,
}

/// Sizes of an 80/10/10 split: each share is floored and the remainder goes
/// to the training set.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = (n as f64 * SPLIT_RATIOS.1).floor() as usize;
    let test = (n as f64 * SPLIT_RATIOS.2).floor() as usize;
    (n - val - test, val, test)
}

/// Seeded shuffle followed by an 80/10/10 partition.
pub fn split_dataset(windows: Vec<InteractionWindow>, seed: u64) -> Result<DatasetSplit> {
    let (split, _) = split_dataset_indexed(windows, seed)?;
    Ok(split)
}

/// Like [`split_dataset`], also returning the original index of every window
/// in each partition.
pub fn split_dataset_indexed(
    windows: Vec<InteractionWindow>,
    seed: u64,
) -> Result<(DatasetSplit, [Vec<usize>; 3])> {
    let n = windows.len();
    if n < 10 {
        return Err(Error::InvalidInput(format!("need at least 10 windows to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = split_sizes(n);
    let mut slots: Vec<Option<InteractionWindow>> = windows.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<InteractionWindow> {
        idx.iter().map(|&i| slots[i].take().expect("index used once")).collect()
    };
    let train_idx = order[..n_train].to_vec();
    let val_idx = order[n_train..n_train + n_val].to_vec();
    let test_idx = order[n_train + n_val..].to_vec();
    let split = DatasetSplit {
        train: take(&train_idx),
        validation: take(&val_idx),
        test: take(&test_idx),
    };
    Ok((split, [train_idx, val_idx, test_idx]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window_with_ttc(ttc: f64) -> InteractionWindow {
        let mut v = Array2::from_elem((WINDOW_LEN, CHANNELS), 1.0);
        v.column_mut(TTC).fill(8.0);
        v[[13, TTC]] = ttc;
        InteractionWindow::new(v).unwrap()
    }

    /// Steps both vehicles forward in small increments until contact.
    fn simulated_contact_time(gap: f64, vf: f64, vl: f64) -> f64 {
        let dt = 1e-3;
        let (mut xf, mut xl, mut t) = (0.0, gap, 0.0);
        while xl - xf > 0.0 {
            xf += vf * dt;
            xl += vl * dt;
            t += dt;
        }
        t
    }

    #[test]
    fn ttc_examples() {
        assert_eq!(compute_ttc(10.0, 10.0, 5.0, 10.0).unwrap(), 2.0);
        assert_eq!(compute_ttc(10.0, 5.0, 5.0, 10.0).unwrap(), 10.0);
        let oracle = simulated_contact_time(3.0, 12.5, 0.5);
        let ttc = compute_ttc(3.0, 12.5, 0.5, 10.0).unwrap();
        assert!((ttc - oracle).abs() <= 1e-3 + 1e-9, "{ttc} vs {oracle}");
        assert!((ttc - 0.25).abs() < 1e-3);
    }

    #[test]
    fn ttc_rejects_bad_gap() {
        assert!(compute_ttc(0.0, 5.0, 1.0, 10.0).is_err());
        assert!(compute_ttc(-1.0, 5.0, 1.0, 10.0).is_err());
        assert!(compute_ttc(f64::NAN, 5.0, 1.0, 10.0).is_err());
        assert!(compute_ttc(f64::INFINITY, 5.0, 1.0, 10.0).is_err());
        assert!(compute_ttc(1.0, 5.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn differentiate_examples() {
        let constant = vec![7.0; 12];
        assert!(differentiate_speed(&constant, 0.1).unwrap().iter().all(|a| *a == 0.0));

        let linear: Vec<f64> = (0..12).map(|i| 2.0 * (i as f64 * 0.1)).collect();
        for a in differentiate_speed(&linear, 0.1).unwrap() {
            assert!((a - 2.0).abs() < 1e-9);
        }

        let ts: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let sine: Vec<f64> = ts.iter().map(|t| t.sin()).collect();
        let acc = differentiate_speed(&sine, 0.1).unwrap();
        for i in 1..ts.len() - 1 {
            assert!((acc[i] - ts[i].cos()).abs() < 0.01);
        }
        assert!(differentiate_speed(&[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn windowing_counts_and_alignment() {
        let stream = |l: usize| Array2::from_shape_fn((l, CHANNELS), |(t, c)| (t * 10 + c) as f64);
        assert_eq!(window_interactions(stream(20).view(), 20, 1).unwrap().len(), 1);
        assert_eq!(window_interactions(stream(29).view(), 20, 1).unwrap().len(), 10);
        assert!(window_interactions(stream(19).view(), 20, 1).unwrap().is_empty());

        let s40 = stream(40);
        let ws = window_interactions(s40.view(), 20, 10).unwrap();
        assert_eq!(ws.len(), 3);
        // brute enumeration of start offsets
        let starts: Vec<usize> = (0..40).filter(|k| k % 10 == 0 && k + 20 <= 40).collect();
        assert_eq!(starts, vec![0, 10, 20]);
        for (w, &k) in ws.iter().zip(&starts) {
            assert_eq!(w.values().row(0), s40.row(k));
            assert_eq!(w.values().row(19), s40.row(k + 19));
        }
    }

    #[test]
    fn filter_boundary() {
        let kept = filter_min_ttc(vec![window_with_ttc(2.3), window_with_ttc(4.01), window_with_ttc(4.0)], 4.0);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].min_ttc(), 2.3);
        assert_eq!(kept[1].min_ttc(), 4.0);
    }

    #[test]
    fn filter_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let windows: Vec<_> = (0..100)
            .map(|_| {
                let v = Array2::from_shape_fn((WINDOW_LEN, CHANNELS), |_| rand::Rng::random_range(&mut rng, 0.5..9.0));
                InteractionWindow::new(v).unwrap()
            })
            .collect();
        let brute = windows
            .iter()
            .filter(|w| {
                let mut lowest = f64::MAX;
                for t in 0..WINDOW_LEN {
                    if w.values()[[t, TTC]] < lowest {
                        lowest = w.values()[[t, TTC]];
                    }
                }
                lowest <= 4.0
            })
            .count();
        assert_eq!(filter_min_ttc(windows, 4.0).len(), brute);
    }

    #[test]
    fn standardize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let windows: Vec<_> = (0..50)
            .map(|_| {
                let v = Array2::from_shape_fn((WINDOW_LEN, CHANNELS), |(_, c)| {
                    rand::Rng::random_range(&mut rng, 0.0..1.0) * (c as f64 + 1.0) * 3.0 + c as f64
                });
                InteractionWindow::new(v).unwrap()
            })
            .collect();
        let id = ChannelStats::identity();
        assert_eq!(id.standardize(&windows[0]), windows[0]);

        let stats = ChannelStats::fit(&windows).unwrap();
        let back = stats.destandardize(&stats.standardize(&windows[3]));
        let err = (back.values() - windows[3].values()).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
        assert!(err < 1e-9);

        let z = standardize(&windows, &stats);
        for c in 0..CHANNELS {
            let vals: Vec<f64> = z.iter().flat_map(|w| w.values().column(c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_std_is_a_config_error() {
        let w = InteractionWindow::new(Array2::ones((WINDOW_LEN, CHANNELS))).unwrap();
        assert!(matches!(ChannelStats::fit(&[w]), Err(Error::Config(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let make = |n: usize| -> Vec<InteractionWindow> {
            (0..n)
                .map(|i| InteractionWindow::new(Array2::from_elem((WINDOW_LEN, CHANNELS), i as f64)).unwrap())
                .collect()
        };
        let s = split_dataset(make(100), 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split_dataset(make(100), 3).unwrap());
        assert_ne!(s, split_dataset(make(100), 4).unwrap());

        // floor(5.5) = 5 for both held-out shares, remainder of one to train
        assert_eq!(split_sizes(55), (45, 5, 5));
        let s = split_dataset(make(55), 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (45, 5, 5));

        let mut seen: Vec<f64> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .map(|w| w.values()[[0, 0]])
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..55).map(|i| i as f64).collect::<Vec<_>>());
        assert!(split_dataset(make(9), 1).is_err());
    }

    proptest! {
        #[test]
        fn ttc_is_monotone(gap in 0.1f64..100.0, extra in 0.0f64..50.0, vl in 0.0f64..30.0,
                           closing in -5.0f64..20.0, more in 0.0f64..10.0) {
            let vf = vl + closing;
            let base = compute_ttc(gap, vf, vl, 10.0).unwrap();
            prop_assert!(compute_ttc(gap + extra, vf, vl, 10.0).unwrap() >= base);
            prop_assert!(compute_ttc(gap, vf + more, vl, 10.0).unwrap() <= base);
        }

        #[test]
        fn differentiation_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0,
                                     v1 in proptest::collection::vec(-20.0f64..20.0, 5..30)) {
            let v2: Vec<f64> = v1.iter().enumerate().map(|(i, x)| (x * 0.3 + i as f64).sin()).collect();
            let combo: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| a * x + b * y).collect();
            let d1 = differentiate_speed(&v1, 0.1).unwrap();
            let d2 = differentiate_speed(&v2, 0.1).unwrap();
            let dc = differentiate_speed(&combo, 0.1).unwrap();
            for i in 0..v1.len() {
                prop_assert!((dc[i] - (a * d1[i] + b * d2[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn standardize_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 100),
                                  mean in proptest::array::uniform5(-50.0f64..50.0),
                                  std in proptest::array::uniform5(0.01f64..20.0)) {
            let stats = ChannelStats::new(mean, std).unwrap();
            let w = InteractionWindow::new(Array2::from_shape_vec((WINDOW_LEN, CHANNELS), vals).unwrap()).unwrap();
            let back = stats.destandardize(&stats.standardize(&w));
            for (x, y) in back.values().iter().zip(w.values().iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn filter_is_subset_and_idempotent(ttcs in proptest::collection::vec(0.1f64..9.0, 0..30)) {
            let windows: Vec<_> = ttcs.iter().map(|t| window_with_ttc(*t)).collect();
            let once = filter_min_ttc(windows.clone(), 4.0);
            prop_assert!(once.iter().all(|w| windows.contains(w)));
            let twice = filter_min_ttc(once.clone(), 4.0);
            prop_assert_eq!(once, twice);
        }
    }
}
