//! Dense row-major `f64` tensors and a define-by-run reverse-mode tape.
//!
//! Parameters live in [`Tensor`] values owned by the caller. A forward pass
//! records operations into a [`Graph`]; [`Graph::backward`] consumes the graph
//! and returns [`Gradients`] keyed by [`Var`].

mod error;
mod graph;
mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
