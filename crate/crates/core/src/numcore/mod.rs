//! Dense tensors, reverse-mode differentiation, neural primitives and the
//! Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use rng::SplitMix64;
pub use tensor::{Param, ParamStore, Real, Tensor};
