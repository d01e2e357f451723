//! Conditional masked autoregressive flow over `a = (u, x, y)`.
//!
//! Each layer is an affine map `z_d = (a_d - mu_d) * exp(alpha_d)` whose
//! parameters come from a masked network of `(a, k)`. Degrees are assigned
//! per group: the two speeds share degree 1, the two accelerations degree 2,
//! TTC degree 3. Dimensions inside a group are therefore conditionally
//! independent given earlier groups and `k`, which makes the grouped
//! densities `p(u|k)`, `p(x|u,k)`, `p(y|x,u,k)` exact sums of per-dimension
//! terms. Layers are stacked without permutation so the order survives.
//!
//! Speed outputs have no admissible hidden unit (no degree below 1), so every
//! output also receives `k` through a direct unmasked linear path.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{normal, xavier};
use crate::nn::{Graph, Mat, ParamId, ParamStore, Var};
use crate::seed;
use crate::stats;

pub const DIMS: usize = 5;
pub const GROUPS: [std::ops::Range<usize>; 3] = [0..2, 2..4, 4..5];
/// Degree of each data dimension.
pub const DEGREES: [u8; DIMS] = [1, 1, 2, 2, 3];
pub const DEFAULT_MAX_ATTEMPTS: usize = 10_000;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn log_std_normal(z: f64) -> f64 {
    -0.5 * z * z - HALF_LN_2PI
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowVariant {
    Autoregressive,
    /// Data inputs are cut from the network; every parameter depends on `k` only.
    NonAutoregressive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub num_layers: usize,
    pub hidden_sizes: Vec<usize>,
    pub variant: FlowVariant,
    pub mask_seed: u64,
    pub alpha_bound: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_sizes: vec![64, 64],
            variant: FlowVariant::Autoregressive,
            mask_seed: 0,
            alpha_bound: 7.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("flow needs at least one layer".into()));
        }
        if self.hidden_sizes.is_empty() {
            return Err(Error::Config("flow needs at least one hidden layer".into()));
        }
        if let Some(h) = self.hidden_sizes.iter().find(|h| **h < 4) {
            return Err(Error::Config(format!("hidden layer of size {h} is below the minimum of 4")));
        }
        if !(self.alpha_bound > 0.0 && self.alpha_bound.is_finite()) {
            return Err(Error::Config("alpha_bound must be positive".into()));
        }
        Ok(())
    }
}

/// Connectivity of one masked network. Masks are `0/1` matrices in the
/// orientation of the weights they multiply (`inputs x outputs`).
#[derive(Clone, Debug, PartialEq)]
pub struct MadeMasks {
    pub variant: FlowVariant,
    pub context_dim: usize,
    pub hidden_degrees: Vec<Vec<u8>>,
    /// `(5 + context_dim) x h_1`: data rows first, then context rows.
    pub mask_a: Array2<f64>,
    /// Hidden-to-hidden masks, `h_l x h_{l+1}`.
    pub hidden: Vec<Array2<f64>>,
    /// `h_last x 5`, shared by the shift and log-scale outputs.
    pub mask_b: Array2<f64>,
}

fn balanced_degrees(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut d: Vec<u8> = (0..n).map(|i| if i < n / 2 { 1 } else { 2 }).collect();
    d.shuffle(rng);
    d
}

/// Autoregressive masks with balanced hidden degrees in `{1, 2}`.
pub fn build_masks(hidden_sizes: &[usize], context_dim: usize, seed: u64) -> Result<MadeMasks> {
    if hidden_sizes.is_empty() {
        return Err(Error::Config("need at least one hidden layer".into()));
    }
    if let Some(h) = hidden_sizes.iter().find(|h| **h < 4) {
        return Err(Error::Config(format!(
            "hidden layer of size {h} cannot host both degrees (minimum 4)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden_degrees: Vec<Vec<u8>> = hidden_sizes.iter().map(|n| balanced_degrees(*n, &mut rng)).collect();
    let first = &hidden_degrees[0];
    let mask_a = Array2::from_shape_fn((DIMS + context_dim, first.len()), |(i, h)| {
        if i >= DIMS || first[h] >= DEGREES[i] {
            1.0
        } else {
            0.0
        }
    });
    let hidden = hidden_degrees
        .windows(2)
        .map(|w| Array2::from_shape_fn((w[0].len(), w[1].len()), |(i, j)| f64::from(u8::from(w[1][j] >= w[0][i]))))
        .collect();
    let last = hidden_degrees.last().expect("non-empty");
    let mask_b = Array2::from_shape_fn((last.len(), DIMS), |(h, o)| f64::from(u8::from(DEGREES[o] > last[h])));
    Ok(MadeMasks {
        variant: FlowVariant::Autoregressive,
        context_dim,
        hidden_degrees,
        mask_a,
        hidden,
        mask_b,
    })
}

/// Ablation masks: no data input reaches the network, all other connections open.
pub fn build_masks_non_autoregressive(hidden_sizes: &[usize], context_dim: usize) -> Result<MadeMasks> {
    if hidden_sizes.is_empty() {
        return Err(Error::Config("need at least one hidden layer".into()));
    }
    let mut mask_a = Array2::ones((DIMS + context_dim, hidden_sizes[0]));
    mask_a.slice_mut(s![..DIMS, ..]).fill(0.0);
    Ok(MadeMasks {
        variant: FlowVariant::NonAutoregressive,
        context_dim,
        hidden_degrees: Vec::new(),
        mask_a,
        hidden: hidden_sizes.windows(2).map(|w| Array2::ones((w[0], w[1]))).collect(),
        mask_b: Array2::ones((*hidden_sizes.last().expect("non-empty"), DIMS)),
    })
}

impl MadeMasks {
    /// Number of masked paths from each data input (row) to each output (column).
    pub fn path_counts(&self) -> Array2<u64> {
        self.paths_from(self.mask_a.slice(s![..DIMS, ..]).to_owned())
    }

    /// Paths from each context input to each output through the hidden layers.
    pub fn context_path_counts(&self) -> Array2<u64> {
        self.paths_from(self.mask_a.slice(s![DIMS.., ..]).to_owned())
    }

    fn paths_from(&self, first: Array2<f64>) -> Array2<u64> {
        let to_u = |m: &Array2<f64>| m.mapv(|v| v as u64);
        let mut acc = to_u(&first);
        for h in &self.hidden {
            acc = acc.dot(&to_u(h));
        }
        acc.dot(&to_u(&self.mask_b))
    }

    fn output_mask(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.mask_b.view(), self.mask_b.view()]).expect("same rows")
    }
}

/// Parameter handles of one flow layer.
#[derive(Clone, Debug)]
pub struct MafLayer {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub hidden: Vec<(ParamId, ParamId)>,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub w_context_out: ParamId,
    masks: MadeMasks,
    output_mask: Array2<f64>,
}

impl MafLayer {
    pub fn masks(&self) -> &MadeMasks {
        &self.masks
    }
}

/// Latents and per-dimension log-density terms of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityEvaluation {
    pub latents: Array2<f64>,
    pub terms: Array2<f64>,
    pub total: Array1<f64>,
}

/// `log p(u|k)`, `log p(x|u,k)`, `log p(y|x,u,k)` per row.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedLogProb {
    pub u: Array1<f64>,
    pub x: Array1<f64>,
    pub y: Array1<f64>,
}

impl DensityEvaluation {
    pub fn grouped(&self) -> GroupedLogProb {
        let sum = |r: std::ops::Range<usize>| self.terms.slice(s![.., r]).sum_axis(Axis(1));
        GroupedLogProb {
            u: sum(GROUPS[0].clone()),
            x: sum(GROUPS[1].clone()),
            y: sum(GROUPS[2].clone()),
        }
    }
}

/// Latent magnitude beyond which a standard normal tail underflows `f64`.
const MAX_LATENT: f64 = 37.5;

/// How a forced dimension is realised during sampling (model-space units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Fixed(f64),
    /// Draw from the learned conditional restricted to `[lo, hi]`: rejection
    /// first, then an exact truncated draw if rejection runs out of attempts.
    Interval { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Forcing {
    pub dim: usize,
    pub constraint: Constraint,
    pub max_attempts: usize,
}

impl Forcing {
    pub fn new(dim: usize, constraint: Constraint) -> Self {
        Self {
            dim,
            constraint,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MafFlow {
    pub config: FlowConfig,
    pub context_dim: usize,
    pub layers: Vec<MafLayer>,
}

impl MafFlow {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: FlowConfig, context_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let masks = match config.variant {
                FlowVariant::Autoregressive => {
                    build_masks(&config.hidden_sizes, context_dim, seed::derive(config.mask_seed, &[l as u64]))?
                }
                FlowVariant::NonAutoregressive => build_masks_non_autoregressive(&config.hidden_sizes, context_dim)?,
            };
            let name = format!("flow.{l}");
            let h0 = config.hidden_sizes[0];
            let w_in = store.add(format!("{name}.in.weight"), xavier(rng, DIMS + context_dim, h0));
            let b_in = store.add(format!("{name}.in.bias"), Array2::zeros((1, h0)));
            let hidden = config
                .hidden_sizes
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    (
                        store.add(format!("{name}.h{i}.weight"), xavier(rng, w[0], w[1])),
                        store.add(format!("{name}.h{i}.bias"), Array2::zeros((1, w[1]))),
                    )
                })
                .collect();
            let hl = *config.hidden_sizes.last().expect("validated");
            let w_out = store.add(format!("{name}.out.weight"), normal(rng, hl, 2 * DIMS, 0.01));
            let b_out = store.add(format!("{name}.out.bias"), Array2::zeros((1, 2 * DIMS)));
            let w_context_out = store.add(format!("{name}.ctx.weight"), normal(rng, context_dim, 2 * DIMS, 0.01));
            let output_mask = masks.output_mask();
            layers.push(MafLayer {
                w_in,
                b_in,
                hidden,
                w_out,
                b_out,
                w_context_out,
                masks,
                output_mask,
            });
        }
        Ok(Self {
            config,
            context_dim,
            layers,
        })
    }

    /// Shift and clamped log-scale of layer `l` for inputs `x` and contexts `k`.
    pub fn layer_params(&self, g: &mut Graph, l: usize, x: Var, k: Var) -> (Var, Var) {
        let layer = &self.layers[l];
        let inp = g.concat_cols(x, k);
        let w = g.param(layer.w_in);
        let w = g.mul_const(w, layer.masks.mask_a.clone());
        let h = g.matmul(inp, w);
        let b = g.param(layer.b_in);
        let h = g.add_row(h, b);
        let mut h = g.gelu(h);
        for ((wid, bid), mask) in layer.hidden.iter().zip(&layer.masks.hidden) {
            let w = g.param(*wid);
            let w = g.mul_const(w, mask.clone());
            let z = g.matmul(h, w);
            let b = g.param(*bid);
            let z = g.add_row(z, b);
            h = g.gelu(z);
        }
        let w = g.param(layer.w_out);
        let w = g.mul_const(w, layer.output_mask.clone());
        let out = g.matmul(h, w);
        let wc = g.param(layer.w_context_out);
        let direct = g.matmul(k, wc);
        let out = g.add(out, direct);
        let b = g.param(layer.b_out);
        let out = g.add_row(out, b);
        let mu = g.cols(out, 0, DIMS);
        let alpha = g.cols(out, DIMS, 2 * DIMS);
        let alpha = g.clamp(alpha, -self.config.alpha_bound, self.config.alpha_bound);
        (mu, alpha)
    }

    /// Per-dimension log-density terms (`n x 5`) and final latents.
    pub fn log_prob_terms(&self, g: &mut Graph, a: Var, k: Var) -> (Var, Var) {
        let mut x = a;
        let mut alpha_sum: Option<Var> = None;
        for l in 0..self.layers.len() {
            let (mu, alpha) = self.layer_params(g, l, x, k);
            let diff = g.sub(x, mu);
            let e = g.exp(alpha);
            x = g.mul(diff, e);
            alpha_sum = Some(match alpha_sum {
                None => alpha,
                Some(s) => g.add(s, alpha),
            });
        }
        let sq = g.square(x);
        let half = g.scale(sq, -0.5);
        let c = g.input(Array2::from_elem((1, DIMS), -HALF_LN_2PI));
        let logphi = g.add_row(half, c);
        let terms = g.add(logphi, alpha_sum.expect("at least one layer"));
        (terms, x)
    }

    fn check_contexts(&self, a_rows: usize, k: ArrayView2<f64>) -> Result<()> {
        if k.ncols() != self.context_dim || k.nrows() != a_rows {
            return Err(Error::InvalidInput(format!(
                "expected {a_rows} contexts of width {}, got {:?}",
                self.context_dim,
                k.dim()
            )));
        }
        Ok(())
    }

    /// Exact density evaluation of a batch; row `n` of `a` is paired with row `n` of `k`.
    pub fn forward_logprob(&self, params: &ParamStore, a: ArrayView2<f64>, k: ArrayView2<f64>) -> Result<DensityEvaluation> {
        if a.ncols() != DIMS {
            return Err(Error::InvalidInput(format!("points must have {DIMS} columns, got {}", a.ncols())));
        }
        self.check_contexts(a.nrows(), k)?;
        if a.iter().chain(k.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite flow input".into()));
        }
        let mut g = Graph::new(params);
        let kv = g.input(k.to_owned());
        let mut x = g.input(a.to_owned());
        let mut alpha_sum = Array2::<f64>::zeros((a.nrows(), DIMS));
        for l in 0..self.layers.len() {
            let (mu, alpha) = self.layer_params(&mut g, l, x, kv);
            check_finite(g.value(mu), l)?;
            check_finite(g.value(alpha), l)?;
            alpha_sum += g.value(alpha);
            let next = (g.value(x) - g.value(mu)) * g.value(alpha).mapv(f64::exp);
            check_finite(&next, l)?;
            x = g.input(next);
        }
        let latents = g.value(x).clone();
        let terms = latents.mapv(log_std_normal) + alpha_sum;
        let total = terms.sum_axis(Axis(1));
        Ok(DensityEvaluation { latents, terms, total })
    }

    pub fn grouped_logprob(&self, params: &ParamStore, a: ArrayView2<f64>, k: ArrayView2<f64>) -> Result<GroupedLogProb> {
        Ok(self.forward_logprob(params, a, k)?.grouped())
    }

    /// Per-layer `(mu, alpha)` for every dimension of `group`, valid for the
    /// rows of `a` whose earlier groups are already realised.
    fn group_params(&self, params: &ParamStore, a: &Mat, k: &Mat, group: usize) -> Result<Vec<(Mat, Mat)>> {
        let r = GROUPS[group].clone();
        let mut g = Graph::new(params);
        let kv = g.input(k.clone());
        let mut x = g.input(a.clone());
        let mut out = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (mu, alpha) = self.layer_params(&mut g, l, x, kv);
            let (m, al) = (g.value(mu), g.value(alpha));
            check_finite(m, l)?;
            check_finite(al, l)?;
            out.push((m.slice(s![.., r.clone()]).to_owned(), al.slice(s![.., r.clone()]).to_owned()));
            let next = (g.value(x) - m) * al.mapv(f64::exp);
            x = g.input(next);
        }
        Ok(out)
    }

    /// Maps latents `z` back to data, one group at a time.
    pub fn inverse(&self, params: &ParamStore, z: ArrayView2<f64>, k: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_contexts(z.nrows(), k)?;
        self.realize(params, k, None, 0, &mut |n, d, _| z[[n, d]])
    }

    /// Draws one point per context row. A forced dimension is realised by its
    /// constraint and later groups condition on the forced value.
    pub fn sample(
        &self,
        params: &ParamStore,
        k: ArrayView2<f64>,
        rng: &mut ChaCha8Rng,
        forcing: Option<&Forcing>,
        step: usize,
    ) -> Result<Array2<f64>> {
        let z = Array2::from_shape_simple_fn((k.nrows(), DIMS), || rng.sample(StandardNormal));
        self.realize(params, k, forcing, step, &mut |n, d, retry| {
            if retry {
                rng.sample(StandardNormal)
            } else {
                z[[n, d]]
            }
        })
    }

    /// `n` draws sharing the single context `k`.
    pub fn sample_n(
        &self,
        params: &ParamStore,
        k: ArrayView1<f64>,
        n: usize,
        rng: &mut ChaCha8Rng,
        forcing: Option<&Forcing>,
    ) -> Result<Array2<f64>> {
        let ks = k.broadcast((n, k.len())).expect("broadcast row").to_owned();
        self.sample(params, ks.view(), rng, forcing, 0)
    }

    fn realize(
        &self,
        params: &ParamStore,
        k: ArrayView2<f64>,
        forcing: Option<&Forcing>,
        step: usize,
        draw: &mut dyn FnMut(usize, usize, bool) -> f64,
    ) -> Result<Array2<f64>> {
        let n = k.nrows();
        let kk = k.to_owned();
        let mut a = Array2::zeros((n, DIMS));
        let unwind = |z: f64, lp: &[(f64, f64)]| lp.iter().rev().fold(z, |v, (mu, al)| v * (-al).exp() + mu);
        for (gi, range) in GROUPS.iter().enumerate() {
            let lp = self.group_params(params, &a, &kk, gi)?;
            for row in 0..n {
                for (j, d) in range.clone().enumerate() {
                    let p: Vec<(f64, f64)> = lp.iter().map(|(m, al)| (m[[row, j]], al[[row, j]])).collect();
                    let value = match forcing.filter(|f| f.dim == d) {
                        None => unwind(draw(row, d, false), &p),
                        Some(f) => match f.constraint {
                            Constraint::Fixed(v) => v,
                            Constraint::Interval { lo, hi } => {
                                let mut accepted = None;
                                for attempt in 0..f.max_attempts {
                                    let v = unwind(draw(row, d, attempt > 0), &p);
                                    if (lo..=hi).contains(&v) {
                                        accepted = Some(v);
                                        break;
                                    }
                                }
                                match accepted {
                                    Some(v) => v,
                                    None => {
                                        // given earlier groups the dimension is an increasing affine
                                        // map of its latent, so the truncation can be drawn exactly
                                        let a0 = unwind(0.0, &p);
                                        let slope = unwind(1.0, &p) - a0;
                                        let (zl, zh) = ((lo - a0) / slope, (hi - a0) / slope);
                                        if !(zl <= MAX_LATENT && zh >= -MAX_LATENT) {
                                            return Err(Error::InfeasibleConstraint {
                                                step,
                                                detail: format!(
                                                    "dimension {d} has no representable mass in [{lo:.4}, {hi:.4}] \
                                                     (latent interval [{zl:.1}, {zh:.1}])"
                                                ),
                                            });
                                        }
                                        let mut uniform = || loop {
                                            let u = stats::normal_cdf(draw(row, d, true));
                                            if u > 0.0 && u < 1.0 {
                                                break u;
                                            }
                                        };
                                        let z = stats::truncated_standard_normal(zl, zh, &mut uniform)?;
                                        (a0 + slope * z).clamp(lo, hi)
                                    }
                                }
                            }
                        },
                    };
                    if !value.is_finite() {
                        return Err(Error::NumericFault {
                            layer: 0,
                            detail: format!("non-finite sample in dimension {d}"),
                        });
                    }
                    a[[row, d]] = value;
                }
            }
        }
        Ok(a)
    }
}

fn check_finite(m: &Mat, layer: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFault {
            layer,
            detail: "non-finite flow parameters".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CTX: usize = 6;

    fn flow(variant: FlowVariant, layers: usize) -> (ParamStore, MafFlow) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = FlowConfig {
            num_layers: layers,
            hidden_sizes: vec![16, 16],
            variant,
            mask_seed: 5,
            alpha_bound: 7.0,
        };
        let f = MafFlow::new(&mut store, &mut rng, cfg, CTX).unwrap();
        // larger output weights so the flow is far from the identity
        for l in &f.layers {
            let mut r = ChaCha8Rng::seed_from_u64(l.w_out.index() as u64);
            *store.get_mut(l.w_out) = normal(&mut r, 16, 2 * DIMS, 0.3);
            *store.get_mut(l.w_context_out) = normal(&mut r, CTX, 2 * DIMS, 0.3);
        }
        (store, f)
    }

    fn zero_flow(store: &mut ParamStore, f: &MafFlow) {
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let _ = f;
    }

    fn points(n: usize, seed: u64, width: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, width), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn mask_rules_hold_entrywise() {
        let m = build_masks(&[8, 6], CTX, 1).unwrap();
        for (h, dh) in m.hidden_degrees[0].iter().enumerate() {
            for i in 0..DIMS {
                assert_eq!(m.mask_a[[i, h]] == 1.0, *dh >= DEGREES[i]);
            }
            for c in 0..CTX {
                assert_eq!(m.mask_a[[DIMS + c, h]], 1.0);
            }
        }
        assert!(m.mask_a.row(4).iter().all(|v| *v == 0.0));
        for (h, dh) in m.hidden_degrees[1].iter().enumerate() {
            for o in 0..DIMS {
                assert_eq!(m.mask_b[[h, o]] == 1.0, DEGREES[o] > *dh);
            }
        }
        for layer in &m.hidden_degrees {
            assert!(layer.contains(&1) && layer.contains(&2));
        }
        assert!(matches!(build_masks(&[3], CTX, 1), Err(Error::Config(_))));
    }

    #[test]
    fn path_counts_follow_group_order() {
        let m = build_masks(&[8, 8], CTX, 2).unwrap();
        let p = m.path_counts();
        for i in 0..DIMS {
            for o in 0..DIMS {
                if DEGREES[i] >= DEGREES[o] {
                    assert_eq!(p[[i, o]], 0, "input {i} output {o}");
                } else {
                    assert!(p[[i, o]] > 0, "input {i} output {o}");
                }
            }
        }
    }

    #[test]
    fn identity_flow_is_base_density() {
        let (mut store, f) = flow(FlowVariant::Autoregressive, 2);
        zero_flow(&mut store, &f);
        let a = points(7, 1, DIMS);
        let k = points(7, 2, CTX);
        let ev = f.forward_logprob(&store, a.view(), k.view()).unwrap();
        for n in 0..7 {
            let expect: f64 = a.row(n).iter().map(|v| log_std_normal(*v)).sum();
            assert!((ev.total[n] - expect).abs() < 1e-12);
        }
        let gl = ev.grouped();
        assert!((gl.u[0] - log_std_normal(a[[0, 0]]) - log_std_normal(a[[0, 1]])).abs() < 1e-12);
    }

    #[test]
    fn constant_affine_layer_matches_gaussian() {
        let (mut store, f) = flow(FlowVariant::Autoregressive, 1);
        zero_flow(&mut store, &f);
        let (m, s_) = ([0.3, -1.0, 2.0, 0.0, 4.0], [0.5, -0.2, 1.1, 0.0, -2.0]);
        let b = store.get_mut(f.layers[0].b_out);
        for d in 0..DIMS {
            b[[0, d]] = m[d];
            b[[0, DIMS + d]] = s_[d];
        }
        let a = points(5, 3, DIMS);
        let k = points(5, 4, CTX);
        let ev = f.forward_logprob(&store, a.view(), k.view()).unwrap();
        for n in 0..5 {
            let mut expect = 0.0;
            for d in 0..DIMS {
                let sd = (-s_[d]).exp();
                let r = (a[[n, d]] - m[d]) / sd;
                expect += -0.5 * r * r - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
            assert!((ev.total[n] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_equals_single_and_groups_partition_total() {
        let (store, f) = flow(FlowVariant::Autoregressive, 2);
        let a = points(9, 5, DIMS);
        let k = points(9, 6, CTX);
        let ev = f.forward_logprob(&store, a.view(), k.view()).unwrap();
        let gl = ev.grouped();
        for n in 0..9 {
            let one = f
                .forward_logprob(&store, a.slice(s![n..n + 1, ..]), k.slice(s![n..n + 1, ..]))
                .unwrap();
            assert!((one.total[0] - ev.total[n]).abs() < 1e-9);
            assert!((gl.u[n] + gl.x[n] + gl.y[n] - ev.total[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn later_groups_never_move_earlier_terms() {
        let (store, f) = flow(FlowVariant::Autoregressive, 2);
        let a = points(20, 7, DIMS);
        let k = points(20, 8, CTX);
        let base = f.grouped_logprob(&store, a.view(), k.view()).unwrap();
        for delta in [-3.0, -0.5, 0.7, 2.5] {
            let mut b = a.clone();
            b.column_mut(4).mapv_inplace(|v| v + delta);
            let p = f.grouped_logprob(&store, b.view(), k.view()).unwrap();
            assert_eq!(p.u, base.u);
            assert_eq!(p.x, base.x);
            let mut c = a.clone();
            c.column_mut(2).mapv_inplace(|v| v + delta);
            assert_eq!(f.grouped_logprob(&store, c.view(), k.view()).unwrap().u, base.u);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let (store, f) = flow(FlowVariant::Autoregressive, 2);
        let a = points(50, 9, DIMS);
        let k = points(50, 10, CTX);
        let ev = f.forward_logprob(&store, a.view(), k.view()).unwrap();
        let back = f.inverse(&store, ev.latents.view(), k.view()).unwrap();
        assert!((&back - &a).iter().all(|v| v.abs() < 1e-6));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = f.sample(&store, k.view(), &mut rng, None, 0).unwrap();
        let z = f.forward_logprob(&store, s.view(), k.view()).unwrap().latents;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let drawn = Array2::from_shape_fn((50, DIMS), |_| rng.sample::<f64, _>(StandardNormal));
        assert!((&z - &drawn).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn jacobian_is_lower_triangular() {
        let (store, f) = flow(FlowVariant::Autoregressive, 2);
        let a = points(4, 12, DIMS);
        let k = points(4, 13, CTX);
        let h = 1e-5;
        for n in 0..4 {
            for j in 0..DIMS {
                let mut p = a.slice(s![n..n + 1, ..]).to_owned();
                let mut m = p.clone();
                p[[0, j]] += h;
                m[[0, j]] -= h;
                let kr = k.slice(s![n..n + 1, ..]);
                let zp = f.forward_logprob(&store, p.view(), kr).unwrap().latents;
                let zm = f.forward_logprob(&store, m.view(), kr).unwrap().latents;
                for i in 0..DIMS {
                    let dz = (zp[[0, i]] - zm[[0, i]]) / (2.0 * h);
                    if DEGREES[j] >= DEGREES[i] && i != j {
                        assert!(dz.abs() < 1e-6, "dz{i}/da{j} = {dz}");
                    }
                    if i == j {
                        assert!(dz > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_flow_samples_are_standard_normal() {
        let (mut store, f) = flow(FlowVariant::Autoregressive, 2);
        zero_flow(&mut store, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let s = f.sample_n(&store, Array1::zeros(CTX).view(), n, &mut rng, None).unwrap();
        for d in 0..DIMS {
            assert!(s.column(d).mean().unwrap().abs() < 3.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn forcing_contract() {
        let (store, f) = flow(FlowVariant::Autoregressive, 2);
        let k = points(1, 14, CTX);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fixed = Forcing::new(2, Constraint::Fixed(0.0));
        let s = f.sample_n(&store, k.row(0), 200, &mut rng, Some(&fixed)).unwrap();
        assert!(s.column(2).iter().all(|v| *v == 0.0));
        assert!(s.column(3).iter().any(|v| (*v - s[[0, 3]]).abs() > 1e-9));
        let free = f.sample_n(&store, k.row(0), 200, &mut rng, None).unwrap();
        let mut ai: Vec<f64> = free.column(2).to_vec();
        ai.sort_by(f64::total_cmp);
        let (lo, hi) = (ai[80], ai[120]);
        let band = Forcing::new(2, Constraint::Interval { lo, hi });
        let s = f.sample_n(&store, k.row(0), 200, &mut rng, Some(&band)).unwrap();
        assert!(s.column(2).iter().all(|v| (lo..=hi).contains(v)));
        // a speed has no earlier group, so its conditional is the free marginal;
        // one attempt sends most rows to the exact truncated draw
        let mut u0: Vec<f64> = free.column(0).to_vec();
        u0.sort_by(f64::total_cmp);
        let tail = Forcing {
            dim: 0,
            constraint: Constraint::Interval { lo: u0[190], hi: u0[199] },
            max_attempts: 1,
        };
        let s = f.sample_n(&store, k.row(0), 400, &mut rng, Some(&tail)).unwrap();
        assert!(s.column(0).iter().all(|v| (u0[190]..=u0[199]).contains(v)));
        let free_tail: Vec<f64> = f
            .sample_n(&store, k.row(0), 40_000, &mut rng, None)
            .unwrap()
            .column(0)
            .iter()
            .copied()
            .filter(|v| (u0[190]..=u0[199]).contains(v))
            .collect();
        let p = crate::stats::ks_two_sample(&free_tail, &s.column(0).to_vec()).unwrap().p_value;
        assert!(p > 0.01, "truncated draw differs from filtered free draws, p = {p}");
        let impossible = Forcing {
            dim: 2,
            constraint: Constraint::Interval { lo: 1e6, hi: 1e6 + 1.0 },
            max_attempts: 100,
        };
        let err = f.sample_n(&store, k.row(0), 3, &mut rng, Some(&impossible)).unwrap_err();
        assert!(matches!(err, Error::InfeasibleConstraint { .. }));
    }

    #[test]
    fn ablation_parameters_ignore_data() {
        let (store, f) = flow(FlowVariant::NonAutoregressive, 1);
        let a = points(6, 15, DIMS);
        let k = points(6, 16, CTX);
        let params = |a: &Array2<f64>| {
            let mut g = Graph::new(&store);
            let av = g.input(a.clone());
            let kv = g.input(k.clone());
            let (mu, al) = f.layer_params(&mut g, 0, av, kv);
            (g.value(mu).clone(), g.value(al).clone())
        };
        let base = params(&a);
        let mut b = a.clone();
        b.column_mut(0).mapv_inplace(|v| v + 1.0);
        b.column_mut(3).mapv_inplace(|v| v - 2.0);
        assert_eq!(params(&b), base);
        let m = f.layers[0].masks();
        assert!(m.path_counts().iter().all(|c| *c == 0));
        assert!(m.context_path_counts().iter().all(|c| *c > 0));
    }
}
