//! Small statistics helpers: empirical quantiles, rank correlation and the
//! two-sample Kolmogorov-Smirnov test.

use crate::error::{Error, Result};

/// Quantile of already sorted data by linear interpolation between order
/// statistics (position `q * (n - 1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn sorted(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn quantile(values: impl IntoIterator<Item = f64>, q: f64) -> f64 {
    quantile_sorted(&sorted(values), q)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut num = 0.0;
    let (mut da, mut db) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    num / (da * db).sqrt()
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput("spearman needs two equal-length samples of size >= 2".into()));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov survival function `P(K > x)`.
fn kolmogorov_sf(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * x * x).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("KS test needs non-empty samples".into()));
    }
    let (sa, sb) = (sorted(a.iter().copied()), sorted(b.iter().copied()));
    let (n, m) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let p_value = kolmogorov_sf((en + 0.12 + 0.11 / en) * d);
    Ok(KsResult { statistic: d, p_value })
}

/// Draws a standard normal restricted to `[lo, hi]` from a stream of
/// uniforms in `(0, 1)`. Uses Robert's accept-reject scheme: a uniform
/// proposal on short intervals, a translated exponential in the tails, and
/// plain normal draws when the interval holds most of the mass.
pub fn truncated_standard_normal(lo: f64, hi: f64, uniform: &mut dyn FnMut() -> f64) -> Result<f64> {
    if !(lo <= hi) || lo.is_nan() {
        return Err(Error::InvalidInput(format!("empty truncation interval [{lo}, {hi}]")));
    }
    if lo < 0.0 && hi > 0.0 && hi - lo > 2.0 {
        // mass at least P(-1 < Z < 1) here, so this loop is cheap
        let mut normal_draw = || {
            let (u1, u2) = (uniform(), uniform());
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        for _ in 0..TRUNCATION_ATTEMPTS {
            let z = normal_draw();
            if (lo..=hi).contains(&z) {
                return Ok(z);
            }
        }
    } else if hi <= 0.0 {
        return truncated_standard_normal(-hi, -lo, uniform).map(|z| -z);
    } else if lo >= 0.0 {
        let alpha = 0.5 * (lo + (lo * lo + 4.0).sqrt());
        let exp_ok = hi - lo > 2.0 / alpha;
        for _ in 0..TRUNCATION_ATTEMPTS {
            let z = if exp_ok { lo - uniform().ln() / alpha } else { lo + (hi - lo) * uniform() };
            if z > hi {
                continue;
            }
            let log_accept = if exp_ok { -0.5 * (z - alpha).powi(2) } else { 0.5 * (lo * lo - z * z) };
            if uniform().ln() <= log_accept {
                return Ok(z);
            }
        }
    } else {
        // short interval around zero: uniform proposal under the peak
        for _ in 0..TRUNCATION_ATTEMPTS {
            let z = lo + (hi - lo) * uniform();
            if uniform().ln() <= -0.5 * z * z {
                return Ok(z);
            }
        }
    }
    Err(Error::InvalidInput(format!("truncated normal sampler did not converge on [{lo}, {hi}]")))
}

const TRUNCATION_ATTEMPTS: usize = 100_000;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}
