//! Dense tensors and a tape-style reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation performed during one forward pass.
//! Parameters live outside the graph (see [`crate::models::Parameter`]) and
//! are bound into a fresh graph per step, which keeps gradient ownership
//! explicit: the graph computes gradients, the caller decides where they are
//! accumulated, and the optimizer zeroes them.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;
pub(crate) use tensor::Fnv;
