//! Minimal differentiable dense-tensor engine.
//!
//! Forward primitives record onto a [`Graph`]; [`Graph::backward`] returns
//! exact reverse-mode adjoints. [`gradcheck`] verifies them against central
//! differences in 64-bit.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{gradcheck, project_to_scalar, rel_err, GradReport};
pub use graph::{Grads, Graph, Var, MASK_NEG};
pub use tensor::{BitRepr, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got dims {dims:?}")]
    NotScalar { dims: Vec<usize> },
    #[error("forward is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("{0}")]
    Invalid(String),
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        DiffError::Shape { op, detail }
    }
}

#[cfg(test)]
mod tests;
