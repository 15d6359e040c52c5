//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Ops evaluate eagerly onto a [`Graph`] tape; [`Graph::backward`] walks the
//! tape in reverse. Matrix products and convolutions go through
//! `matrixmultiply` GEMM kernels; everything runs single-threaded so results
//! are bit-reproducible.

mod conv;
mod float;
mod graph;
mod tensor;

pub use float::Float;
pub use graph::{avg_pool2x, Grads, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
