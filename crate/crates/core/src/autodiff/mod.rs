//! Reverse-mode differentiation for the ops used by the network, the losses
//! and the output-space transforms.

pub mod graph;
pub mod kernels;

pub use graph::{Gradients, Graph, ParamGrads, Var};
pub use kernels::ConvGeom;
