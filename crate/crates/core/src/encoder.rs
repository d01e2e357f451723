//! Transformer encoder-decoder producing the per-step context vector `k_t`.
//!
//! The encoder reads the observed half of a window in which the action and
//! TTC channels of its last five steps are hidden. Hidden entries are set to
//! zero and marked by a parallel flag matrix, and both are projected together
//! so a hidden entry can never be mistaken for a real zero. The decoder is
//! causally masked; its token at target step `t` is the step `t - 1` value,
//! where step 0 is the last observed step.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, Linear, MultiHeadAttention};
use crate::nn::params::normal;
use crate::nn::{AttnShape, Graph, Mat, ParamId, ParamStore, Var};
use crate::ssm::{A_I, A_J, CHANNELS, OBSERVED_LEN, TARGET_LEN, TTC};

/// Observed steps (0-based) whose action and TTC entries are hidden.
pub const MASKED_STEPS: std::ops::Range<usize> = 5..OBSERVED_LEN;
pub const MASKED_CHANNELS: [usize; 3] = [A_I, A_J, TTC];
/// Width of one token before projection: values then missing flags.
pub const TOKEN_WIDTH: usize = 2 * CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    Learnable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub dropout: f64,
    pub num_heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub positional_encoding: PositionalEncoding,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            model_dim: 40,
            feedforward_dim: 160,
            dropout: 0.1,
            num_heads: 8,
            encoder_blocks: 3,
            decoder_blocks: 3,
            positional_encoding: PositionalEncoding::Learnable,
            activation: Activation::Gelu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.feedforward_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.decoder_blocks == 0 {
            return Err(Error::Config("need at least one decoder block".into()));
        }
        Ok(())
    }
}

/// Observed steps with hidden entries zeroed and flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedObservation {
    pub values: Array2<f64>,
    pub missing_flags: Array2<f64>,
}

impl MaskedObservation {
    /// `values | flags`, one row per observed step.
    pub fn tokens(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.values.view(), self.missing_flags.view()]).expect("same row count")
    }
}

/// Hides the action and TTC channels of observed steps 6 to 10.
pub fn mask_observation(observed: ArrayView2<f64>) -> Result<MaskedObservation> {
    if observed.dim() != (OBSERVED_LEN, CHANNELS) {
        return Err(Error::InvalidInput(format!(
            "observation must be {OBSERVED_LEN}x{CHANNELS}, got {:?}",
            observed.dim()
        )));
    }
    let mut values = observed.to_owned();
    let mut missing_flags = Array2::zeros((OBSERVED_LEN, CHANNELS));
    for t in MASKED_STEPS {
        for c in MASKED_CHANNELS {
            values[[t, c]] = 0.0;
            missing_flags[[t, c]] = 1.0;
        }
    }
    Ok(MaskedObservation { values, missing_flags })
}

/// Decoder tokens for target steps `1..=realized.nrows() + 1`.
pub fn decoder_tokens(obs: &MaskedObservation, realized: ArrayView2<f64>) -> Array2<f64> {
    let t = realized.nrows() + 1;
    let mut out = Array2::zeros((t, TOKEN_WIDTH));
    out.slice_mut(s![0, ..CHANNELS]).assign(&obs.values.row(OBSERVED_LEN - 1));
    out.slice_mut(s![0, CHANNELS..]).assign(&obs.missing_flags.row(OBSERVED_LEN - 1));
    out.slice_mut(s![1.., ..CHANNELS]).assign(&realized);
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn forward(&self, g: &mut Graph, x: Var, dropout: f64) -> Var {
        let h = self.inner.forward(g, x);
        let h = g.gelu(h);
        let h = g.dropout(h, dropout);
        self.outer.forward(g, h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EncoderBlock {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DecoderBlock {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

/// Parameter handles of the encoder-decoder; values live in a [`ParamStore`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContextEncoder {
    pub config: EncoderConfig,
    enc_in: Linear,
    dec_in: Linear,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc_blocks: Vec<EncoderBlock>,
    enc_norm: LayerNorm,
    dec_blocks: Vec<DecoderBlock>,
    dec_norm: LayerNorm,
}

/// Per-block self-attention keys and values of already decoded tokens,
/// laid out batch-major (`batch * len + step`).
pub struct DecoderCache {
    batches: usize,
    len: usize,
    keys: Vec<Mat>,
    values: Vec<Mat>,
}

impl DecoderCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn append_step(cache: &Mat, new: &Mat, batches: usize, len: usize) -> Mat {
    let d = new.ncols();
    let mut out = Mat::zeros((batches * (len + 1), d));
    for b in 0..batches {
        if len > 0 {
            out.slice_mut(s![b * (len + 1)..b * (len + 1) + len, ..])
                .assign(&cache.slice(s![b * len..(b + 1) * len, ..]));
        }
        out.row_mut(b * (len + 1) + len).assign(&new.row(b));
    }
    out
}

impl ContextEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let ff = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| FeedForward {
            inner: Linear::new(store, rng, &format!("{name}.ff1"), d, config.feedforward_dim),
            outer: Linear::new(store, rng, &format!("{name}.ff2"), config.feedforward_dim, d),
        };
        let enc_in = Linear::new(store, rng, "enc.input", TOKEN_WIDTH, d);
        let dec_in = Linear::new(store, rng, "dec.input", TOKEN_WIDTH, d);
        let enc_pos = store.add("enc.pos", normal(rng, OBSERVED_LEN, d, 0.02));
        let dec_pos = store.add("dec.pos", normal(rng, TARGET_LEN, d, 0.02));
        let enc_blocks = (0..config.encoder_blocks)
            .map(|i| {
                let n = format!("enc.{i}");
                EncoderBlock {
                    attn: MultiHeadAttention::new(store, rng, &format!("{n}.attn"), d, config.num_heads),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d),
                    ff: ff(store, rng, &n),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(store, "enc.norm", d);
        let dec_blocks = (0..config.decoder_blocks)
            .map(|i| {
                let n = format!("dec.{i}");
                DecoderBlock {
                    self_attn: MultiHeadAttention::new(store, rng, &format!("{n}.self"), d, config.num_heads),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d),
                    cross_attn: MultiHeadAttention::new(store, rng, &format!("{n}.cross"), d, config.num_heads),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d),
                    ff: ff(store, rng, &n),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), d),
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(store, "dec.norm", d);
        Ok(Self {
            config,
            enc_in,
            dec_in,
            enc_pos,
            dec_pos,
            enc_blocks,
            enc_norm,
            dec_blocks,
            dec_norm,
        })
    }

    pub fn context_dim(&self) -> usize {
        self.config.model_dim
    }

    fn positions(&self, g: &mut Graph, table: ParamId, len: usize) -> Var {
        let p = g.param(table);
        if len == g.shape(p).0 {
            p
        } else {
            g.take_rows(p, (0..len).collect())
        }
    }

    /// Encodes `batches` observations stacked as `batches * 10` token rows.
    pub fn memory(&self, g: &mut Graph, obs_tokens: Mat, batches: usize) -> Var {
        let p = self.config.dropout;
        let x = g.input(obs_tokens);
        let x = self.enc_in.forward(g, x);
        let pos = self.positions(g, self.enc_pos, OBSERVED_LEN);
        let mut x = g.add_tiled(x, pos);
        x = g.dropout(x, p);
        for blk in &self.enc_blocks {
            let a = blk.attn.forward(g, x, x, batches, OBSERVED_LEN, OBSERVED_LEN, false, false);
            let a = g.dropout(a, p);
            let r = g.add(x, a);
            x = blk.norm1.forward(g, r);
            let f = blk.ff.forward(g, x, p);
            let f = g.dropout(f, p);
            let r = g.add(x, f);
            x = blk.norm2.forward(g, r);
        }
        self.enc_norm.forward(g, x)
    }

    /// Runs the causal decoder over `batches * len` tokens against `memory`.
    /// With `memory_shared`, every batch attends to the same single memory block.
    pub fn decode(&self, g: &mut Graph, memory: Var, memory_shared: bool, dec_tokens: Mat, batches: usize) -> Var {
        let p = self.config.dropout;
        let len = dec_tokens.nrows() / batches;
        assert_eq!(len * batches, dec_tokens.nrows(), "decode: ragged token batch");
        assert!(len <= TARGET_LEN, "decode: at most {TARGET_LEN} steps");
        let x = g.input(dec_tokens);
        let x = self.dec_in.forward(g, x);
        let pos = self.positions(g, self.dec_pos, len);
        let mut x = g.add_tiled(x, pos);
        x = g.dropout(x, p);
        for blk in &self.dec_blocks {
            let a = blk.self_attn.forward(g, x, x, batches, len, len, false, true);
            let a = g.dropout(a, p);
            let r = g.add(x, a);
            x = blk.norm1.forward(g, r);
            let c = blk
                .cross_attn
                .forward(g, x, memory, batches, len, OBSERVED_LEN, memory_shared, false);
            let c = g.dropout(c, p);
            let r = g.add(x, c);
            x = blk.norm2.forward(g, r);
            let f = blk.ff.forward(g, x, p);
            let f = g.dropout(f, p);
            let r = g.add(x, f);
            x = blk.norm3.forward(g, r);
        }
        self.dec_norm.forward(g, x)
    }

    pub fn new_cache(&self, batches: usize) -> DecoderCache {
        let d = self.config.model_dim;
        DecoderCache {
            batches,
            len: 0,
            keys: vec![Mat::zeros((0, d)); self.dec_blocks.len()],
            values: vec![Mat::zeros((0, d)); self.dec_blocks.len()],
        }
    }

    /// Evaluation-only incremental decoding: consumes one token per batch
    /// (`batches x 10`) and returns the new contexts (`batches x d`).
    /// Equivalent to [`ContextEncoder::decode`] over the whole prefix.
    pub fn decode_step(
        &self,
        params: &ParamStore,
        memory: &Mat,
        memory_shared: bool,
        tokens: Mat,
        cache: &mut DecoderCache,
    ) -> Mat {
        let b = cache.batches;
        let t = cache.len;
        assert_eq!(tokens.nrows(), b, "decode_step: one token per batch");
        assert!(t < TARGET_LEN, "decode_step: decoder is full");
        let mut g = Graph::new(params);
        let mem = g.input(memory.clone());
        let x = g.input(tokens);
        let x = self.dec_in.forward(&mut g, x);
        let pos = g.param(self.dec_pos);
        let pos = g.take_rows(pos, vec![t]);
        let mut x = g.add_tiled(x, pos);
        for (i, blk) in self.dec_blocks.iter().enumerate() {
            let sa = &blk.self_attn;
            let q = sa.query.forward(&mut g, x);
            let k_new = sa.key.forward(&mut g, x);
            let v_new = sa.value.forward(&mut g, x);
            let keys = append_step(&cache.keys[i], g.value(k_new), b, t);
            let values = append_step(&cache.values[i], g.value(v_new), b, t);
            let kv = g.input(keys.clone());
            let vv = g.input(values.clone());
            cache.keys[i] = keys;
            cache.values[i] = values;
            let shape = AttnShape {
                heads: sa.heads,
                batches: b,
                q_len: 1,
                kv_len: t + 1,
                kv_shared: false,
                causal: false,
            };
            let a = g.attention(q, kv, vv, shape);
            let a = sa.output.forward(&mut g, a);
            let r = g.add(x, a);
            x = blk.norm1.forward(&mut g, r);
            let c = blk
                .cross_attn
                .forward(&mut g, x, mem, b, 1, OBSERVED_LEN, memory_shared, false);
            let r = g.add(x, c);
            x = blk.norm2.forward(&mut g, r);
            let f = blk.ff.forward(&mut g, x, 0.0);
            let r = g.add(x, f);
            x = blk.norm3.forward(&mut g, r);
        }
        cache.len += 1;
        let out = self.dec_norm.forward(&mut g, x);
        g.value(out).clone()
    }

    /// Encoded memory (`10 x d`) of one observation, evaluation mode.
    pub fn memory_eval(&self, params: &ParamStore, obs: &MaskedObservation) -> Mat {
        let mut g = Graph::new(params);
        let m = self.memory(&mut g, obs.tokens(), 1);
        g.value(m).clone()
    }

    /// `k_t` for `t = realized.nrows() + 1`, evaluation mode.
    pub fn encode(&self, params: &ParamStore, obs: &MaskedObservation, realized: ArrayView2<f64>) -> Result<Array1<f64>> {
        if realized.ncols() != CHANNELS || realized.nrows() >= TARGET_LEN {
            return Err(Error::InvalidInput(format!(
                "realized prefix must be at most {}x{CHANNELS}, got {:?}",
                TARGET_LEN - 1,
                realized.dim()
            )));
        }
        let mut g = Graph::new(params);
        let m = self.memory(&mut g, obs.tokens(), 1);
        let out = self.decode(&mut g, m, false, decoder_tokens(obs, realized), 1);
        Ok(g.value(out).row(realized.nrows()).to_owned())
    }

    /// All ten contexts from one causal pass over the ground-truth target.
    pub fn teacher_forced_contexts(
        &self,
        params: &ParamStore,
        obs: &MaskedObservation,
        target: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        if target.dim() != (TARGET_LEN, CHANNELS) {
            return Err(Error::InvalidInput(format!(
                "target must be {TARGET_LEN}x{CHANNELS}, got {:?}",
                target.dim()
            )));
        }
        let mut g = Graph::new(params);
        let m = self.memory(&mut g, obs.tokens(), 1);
        let toks = decoder_tokens(obs, target.slice(s![..TARGET_LEN - 1, ..]));
        let out = self.decode(&mut g, m, false, toks, 1);
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small() -> EncoderConfig {
        EncoderConfig {
            model_dim: 8,
            feedforward_dim: 16,
            num_heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 2,
            ..Default::default()
        }
    }

    fn setup(cfg: EncoderConfig) -> (ParamStore, ContextEncoder) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ContextEncoder::new(&mut store, &mut rng, cfg).unwrap();
        (store, enc)
    }

    fn random(rows: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, CHANNELS), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn masking_contract() {
        let obs = random(OBSERVED_LEN, 1);
        let m = mask_observation(obs.view()).unwrap();
        assert_eq!(m.missing_flags.sum(), 15.0);
        assert_eq!(m.values[[4, TTC]], obs[[4, TTC]]);
        assert_eq!(m.values[[6, A_I]], 0.0);
        assert_eq!(m.missing_flags[[6, A_I]], 1.0);
        for t in 0..OBSERVED_LEN {
            assert_eq!(m.values[[t, 0]], obs[[t, 0]]);
            assert_eq!(m.values[[t, 1]], obs[[t, 1]]);
        }
        assert!(mask_observation(random(9, 1).view()).is_err());
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = EncoderConfig {
            num_heads: 7,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        EncoderConfig::default().validate().unwrap();
    }

    #[test]
    fn causal_contract() {
        let (store, enc) = setup(small());
        let obs = mask_observation(random(OBSERVED_LEN, 2).view()).unwrap();
        let target = random(TARGET_LEN, 3);
        for t in 1..=TARGET_LEN {
            let prefix = target.slice(s![..t - 1, ..]);
            let k = enc.encode(&store, &obs, prefix).unwrap();
            let mut perturbed = target.clone();
            for s in t - 1..TARGET_LEN {
                perturbed.row_mut(s).mapv_inplace(|v| v + 1.5);
            }
            let full = enc.teacher_forced_contexts(&store, &obs, perturbed.view()).unwrap();
            let k2 = full.row(t - 1);
            assert_eq!(k, k2, "step {t}");
        }
    }

    #[test]
    fn hidden_entries_carry_no_signal() {
        let (store, enc) = setup(small());
        let raw = random(OBSERVED_LEN, 4);
        let mut raw2 = raw.clone();
        raw2[[7, A_I]] += 3.0;
        raw2[[9, TTC]] -= 1.0;
        let a = mask_observation(raw.view()).unwrap();
        let b = mask_observation(raw2.view()).unwrap();
        let empty = Array2::zeros((0, CHANNELS));
        assert_eq!(
            enc.encode(&store, &a, empty.view()).unwrap(),
            enc.encode(&store, &b, empty.view()).unwrap()
        );
        let mut raw3 = raw.clone();
        raw3[[1, 0]] += 0.5;
        let c = mask_observation(raw3.view()).unwrap();
        let diff = &enc.encode(&store, &a, empty.view()).unwrap() - &enc.encode(&store, &c, empty.view()).unwrap();
        assert!(diff.iter().any(|v| v.abs() > 1e-8));
    }

    #[test]
    fn teacher_forcing_matches_stepwise_and_cached_paths() {
        let (store, enc) = setup(EncoderConfig::default());
        for w in 0..5 {
            let obs = mask_observation(random(OBSERVED_LEN, 10 + w).view()).unwrap();
            let target = random(TARGET_LEN, 20 + w);
            let full = enc.teacher_forced_contexts(&store, &obs, target.view()).unwrap();
            let memory = enc.memory_eval(&store, &obs);
            let mut cache = enc.new_cache(1);
            for t in 1..=TARGET_LEN {
                let k = enc.encode(&store, &obs, target.slice(s![..t - 1, ..])).unwrap();
                let tok = decoder_tokens(&obs, target.slice(s![..t - 1, ..]));
                let step = enc.decode_step(&store, &memory, true, tok.slice(s![t - 1..t, ..]).to_owned(), &mut cache);
                for c in 0..enc.context_dim() {
                    assert!((k[c] - full[[t - 1, c]]).abs() < 1e-6);
                    assert!((step[[0, c]] - full[[t - 1, c]]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (store, enc) = setup(small());
        let obs = mask_observation(random(OBSERVED_LEN, 5).view()).unwrap();
        let target = random(TARGET_LEN, 6);
        let a = enc.teacher_forced_contexts(&store, &obs, target.view()).unwrap();
        let b = enc.teacher_forced_contexts(&store, &obs, target.view()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bad_prefix_is_rejected() {
        let (store, enc) = setup(small());
        let obs = mask_observation(random(OBSERVED_LEN, 5).view()).unwrap();
        assert!(matches!(
            enc.encode(&store, &obs, Array2::zeros((2, 4)).view()),
            Err(Error::InvalidInput(_))
        ));
    }
}
