//! Tape autodiff, tensor ops, and layer parameter containers.

mod graph;
mod layers;
mod ops;

pub use graph::{Gradients, Graph, Var};
pub use layers::{derive_seed, rng_from, Binder, BoundConv, BoundLinear, Conv2dParams, LinearParams};
