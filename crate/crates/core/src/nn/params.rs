use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Name and shape of one stored tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Flat registry of trainable matrices, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| TensorSpec {
                name: n.clone(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect()
    }

    /// Little-endian `f64` dump of every tensor in registration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for t in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Overwrites tensor values from a blob written by [`ParamStore::to_bytes`],
    /// checking names and shapes against `specs`.
    pub fn load_bytes(&mut self, specs: &[TensorSpec], bytes: &[u8]) -> Result<()> {
        if specs != self.specs().as_slice() {
            return Err(Error::Data("parameter layout does not match the model configuration".into()));
        }
        if bytes.len() != self.num_scalars() * 8 {
            return Err(Error::Data(format!(
                "parameter blob holds {} bytes, expected {}",
                bytes.len(),
                self.num_scalars() * 8
            )));
        }
        let mut chunks = bytes.chunks_exact(8);
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                let c = chunks.next().expect("length checked");
                *v = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            }
        }
        Ok(())
    }
}

/// Glorot-uniform matrix.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}
