//! Minimal reverse-mode differentiation over rank-2 `f64` tensors.
//!
//! The graph is eager and append-only. Backward passes are recorded as
//! ordinary primitive nodes, which makes gradient-of-gradient (needed by the
//! cross-environment variance penalty) a second call to [`Graph::grad`].

mod backward;
mod check;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use check::{check_gradient, finite_diff_check, relative_error, GradCheck};
pub use graph::{Graph, Reduce, Var};
pub use params::ParamStore;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: (usize, usize) },
    #[error("flat parameter vector has {got} values, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[cfg(test)]
mod tests;
