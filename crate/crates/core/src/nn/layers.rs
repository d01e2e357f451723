use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{AttnShape, Graph, Var};
use super::params::{xavier, ParamId, ParamStore};

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out)),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, fan_out))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let h = g.matmul(x, w);
        let b = g.param(self.bias);
        g.add_row(h, b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            heads,
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
        }
    }

    /// `x` holds `batches * q_len` query rows; `memory` holds the key/value rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        memory: Var,
        batches: usize,
        q_len: usize,
        kv_len: usize,
        kv_shared: bool,
        causal: bool,
    ) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let shape = AttnShape {
            heads: self.heads,
            batches,
            q_len,
            kv_len,
            kv_shared,
            causal,
        };
        let a = g.attention(q, k, v, shape);
        self.output.forward(g, a)
    }
}
