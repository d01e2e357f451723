//! Probabilistic forecasting of surrogate safety measures for car-following
//! interactions.
//!
//! A transformer encoder-decoder turns a partially masked history of
//! `(v_i, v_j, a_i, a_j, ttc)` into per-step context vectors, and a conditional
//! masked autoregressive flow models speeds, then accelerations, then TTC.
//! On top sit Monte Carlo action and crash probabilities, forced-action
//! counterfactual rollouts, a car-following simulator used as ground truth,
//! and a command-line pipeline.

pub mod cli;
pub mod counterfactual;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prob;
pub mod seed;
pub mod sim;
pub mod ssm;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
