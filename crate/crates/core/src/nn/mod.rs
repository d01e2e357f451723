//! Small neural-network toolkit: autodiff graph, parameter store, layers, Adam.

pub mod adam;
pub mod graph;
pub mod layers;
pub mod params;

pub use adam::Adam;
pub use graph::{AttnShape, Gradients, Graph, Mat, Var};
pub use params::{ParamId, ParamStore, TensorSpec};
