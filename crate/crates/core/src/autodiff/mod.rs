//! Minimal reverse-mode automatic differentiation over rank-4 tensors.

mod adam;
mod conv;
pub mod gradcheck;
mod graph;
mod ops;
mod params;

pub use adam::{Adam, AdamConfig};
pub use graph::{BackwardCtx, BackwardOp, Graph, Var};
pub use ops::{op, sigmoid, Activation, FnOp};
pub use params::{Bound, ParamId, ParamSet};

