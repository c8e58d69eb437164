//! Dense-tensor reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major `f64` tensors, a tape-ordered
//! [`Graph`] of operations, and exact hand-derived backward rules for every
//! primitive the codec families need (dense, conv2d, scaled dot-product
//! attention, elementwise activations, batch/layer normalization, reshapes).
//!
//! Graphs are built per forward pass and dropped after backward. A graph is
//! single-threaded; distinct graphs share nothing and may live on distinct
//! threads.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{Activation, BatchNormState, Graph, Mode, NodeId};
pub use tensor::Tensor;
