//! The full forecaster: context encoder plus flow head sharing one parameter store.
//!
//! All inputs are windows in model (standardized) space, `20 x 5`.

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{decoder_tokens, mask_observation, ContextEncoder, EncoderConfig, MaskedObservation};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, Forcing, MafFlow};
use crate::nn::{Graph, Mat, ParamStore, Var};
use crate::ssm::{CHANNELS, OBSERVED_LEN, TARGET_LEN, WINDOW_LEN};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub init_seed: u64,
}

pub struct ForecastModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: ContextEncoder,
    pub flow: MafFlow,
}

/// Forcing applied at a subset of target steps (1-based flags at index `t - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct StepForcing {
    pub forcing: Forcing,
    pub steps: [bool; TARGET_LEN],
}

impl StepForcing {
    pub fn all_steps(forcing: Forcing) -> Self {
        Self {
            forcing,
            steps: [true; TARGET_LEN],
        }
    }
}

/// Sampled futures and the contexts they were drawn under.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `n x 10 x 5`.
    pub samples: Array3<f64>,
    /// One `n x d` matrix per target step.
    pub contexts: Vec<Array2<f64>>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.samples.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `n x 5` draws at target step `t` (1-based).
    pub fn step(&self, t: usize) -> ArrayView2<'_, f64> {
        self.samples.index_axis(Axis(1), t - 1)
    }
}

fn check_window(w: &Array2<f64>) -> Result<()> {
    if w.dim() != (WINDOW_LEN, CHANNELS) {
        return Err(Error::InvalidInput(format!(
            "window must be {WINDOW_LEN}x{CHANNELS}, got {:?}",
            w.dim()
        )));
    }
    Ok(())
}

impl ForecastModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoder = ContextEncoder::new(&mut params, &mut rng, config.encoder.clone())?;
        let flow = MafFlow::new(&mut params, &mut rng, config.flow.clone(), encoder.context_dim())?;
        Ok(Self {
            config,
            params,
            encoder,
            flow,
        })
    }

    /// Mean over windows and target steps of `-log p(a_t | k_t)`, teacher forced.
    pub fn nll_graph(&self, g: &mut Graph, windows: &[&Array2<f64>]) -> Result<Var> {
        let b = windows.len();
        if b == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut obs_tokens = Vec::with_capacity(b);
        let mut dec = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        for w in windows {
            check_window(w)?;
            let obs = mask_observation(w.slice(s![..OBSERVED_LEN, ..]))?;
            obs_tokens.push(obs.tokens());
            dec.push(decoder_tokens(&obs, w.slice(s![OBSERVED_LEN..WINDOW_LEN - 1, ..])));
            targets.push(w.slice(s![OBSERVED_LEN.., ..]));
        }
        let stack = |ms: &[Array2<f64>]| {
            let views: Vec<_> = ms.iter().map(|m| m.view()).collect();
            concatenate(Axis(0), &views).expect("equal widths")
        };
        let memory = self.encoder.memory(g, stack(&obs_tokens), b);
        let ctx = self.encoder.decode(g, memory, false, stack(&dec), b);
        let a = g.input(concatenate(Axis(0), &targets).expect("equal widths"));
        let (terms, _) = self.flow.log_prob_terms(g, a, ctx);
        let per_step = g.row_sum(terms);
        let mean = g.mean_all(per_step);
        Ok(g.scale(mean, -1.0))
    }

    /// Evaluation-mode NLL over many windows, computed in chunks.
    pub fn nll(&self, windows: &[Array2<f64>], chunk: usize) -> Result<f64> {
        let mut total = 0.0;
        for c in windows.chunks(chunk.max(1)) {
            let refs: Vec<&Array2<f64>> = c.iter().collect();
            let mut g = Graph::new(&self.params);
            let loss = self.nll_graph(&mut g, &refs)?;
            total += g.value(loss)[[0, 0]] * c.len() as f64;
        }
        Ok(total / windows.len() as f64)
    }

    pub fn masked_observation(&self, window: &Array2<f64>) -> Result<MaskedObservation> {
        check_window(window)?;
        mask_observation(window.slice(s![..OBSERVED_LEN, ..]))
    }

    /// Teacher-forced contexts `k_1..k_10` (`10 x d`).
    pub fn contexts(&self, window: &Array2<f64>) -> Result<Array2<f64>> {
        let obs = self.masked_observation(window)?;
        self.encoder
            .teacher_forced_contexts(&self.params, &obs, window.slice(s![OBSERVED_LEN.., ..]))
    }

    /// Samples `n` futures autoregressively; each draw feeds the decoder as
    /// realised history. Only the observed half of `window` is read.
    pub fn rollout(
        &self,
        window: &Array2<f64>,
        n: usize,
        rng: &mut ChaCha8Rng,
        forcing: Option<&StepForcing>,
    ) -> Result<Rollout> {
        if n == 0 {
            return Err(Error::InvalidInput("rollout needs at least one sample".into()));
        }
        let obs = self.masked_observation(window)?;
        let memory = self.encoder.memory_eval(&self.params, &obs);
        let mut cache = self.encoder.new_cache(n);
        let first = decoder_tokens(&obs, Array2::zeros((0, CHANNELS)).view());
        let mut tokens: Mat = first.broadcast((n, first.ncols())).expect("one row").to_owned();
        let mut samples = Array3::zeros((n, TARGET_LEN, CHANNELS));
        let mut contexts = Vec::with_capacity(TARGET_LEN);
        for t in 0..TARGET_LEN {
            let ctx = self.encoder.decode_step(&self.params, &memory, true, tokens, &mut cache);
            let f = forcing.filter(|f| f.steps[t]).map(|f| &f.forcing);
            let draw = self.flow.sample(&self.params, ctx.view(), rng, f, t + 1)?;
            samples.index_axis_mut(Axis(1), t).assign(&draw);
            tokens = Mat::zeros((n, 2 * CHANNELS));
            tokens.slice_mut(s![.., ..CHANNELS]).assign(&draw);
            contexts.push(ctx);
        }
        Ok(Rollout { samples, contexts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Constraint;
    use crate::ssm::A_I;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                model_dim: 8,
                feedforward_dim: 16,
                num_heads: 2,
                encoder_blocks: 1,
                decoder_blocks: 1,
                ..Default::default()
            },
            flow: FlowConfig {
                hidden_sizes: vec![8],
                ..Default::default()
            },
            init_seed: 4,
        }
    }

    fn window(seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((WINDOW_LEN, CHANNELS), |_| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn nll_matches_flow_with_teacher_forced_contexts() {
        let m = ForecastModel::new(tiny_config()).unwrap();
        let ws: Vec<_> = (0..3).map(window).collect();
        let batched = m.nll(&ws, 8).unwrap();
        let mut manual = 0.0;
        for w in &ws {
            let k = m.contexts(w).unwrap();
            let ev = m
                .flow
                .forward_logprob(&m.params, w.slice(s![OBSERVED_LEN.., ..]), k.view())
                .unwrap();
            manual -= ev.total.sum() / TARGET_LEN as f64;
        }
        manual /= 3.0;
        assert!((batched - manual).abs() < 1e-9);
        let chunked = m.nll(&ws, 1).unwrap();
        assert!((batched - chunked).abs() < 1e-9);
    }

    #[test]
    fn rollout_is_seeded_and_respects_forcing() {
        let m = ForecastModel::new(tiny_config()).unwrap();
        let w = window(9);
        let a = m.rollout(&w, 16, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
        let b = m.rollout(&w, 16, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.dim(), (16, TARGET_LEN, CHANNELS));
        let mut steps = [false; TARGET_LEN];
        steps[2] = true;
        let f = StepForcing {
            forcing: Forcing::new(A_I, Constraint::Fixed(0.25)),
            steps,
        };
        let c = m.rollout(&w, 16, &mut ChaCha8Rng::seed_from_u64(1), Some(&f)).unwrap();
        assert!(c.step(3).column(A_I).iter().all(|v| *v == 0.25));
        assert!(c.step(2).column(A_I).iter().any(|v| *v != 0.25));
        // earlier steps are untouched by a later intervention
        assert_eq!(c.step(1), a.step(1));
        assert_eq!(c.step(2), a.step(2));
    }

    #[test]
    fn rollout_contexts_match_teacher_forcing_on_own_samples() {
        let m = ForecastModel::new(tiny_config()).unwrap();
        let w = window(12);
        let r = m.rollout(&w, 3, &mut ChaCha8Rng::seed_from_u64(2), None).unwrap();
        for i in 0..3 {
            let mut full = w.clone();
            full.slice_mut(s![OBSERVED_LEN.., ..]).assign(&r.samples.index_axis(Axis(0), i));
            let k = m.contexts(&full).unwrap();
            for t in 0..TARGET_LEN {
                let diff = (&k.row(t) - &r.contexts[t].row(i)).mapv(f64::abs);
                assert!(diff.iter().all(|d| *d < 1e-9));
            }
        }
    }
}
