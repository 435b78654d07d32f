//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive as it executes. [`Tape::backward`]
//! walks the record in reverse and accumulates gradients into leaves that
//! were created with `requires_grad`. Forward values are never touched by
//! the backward sweep.

mod gradcheck;
pub mod suite;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_many, relative_error, Coordinates,
    GradCheckReport,
};
pub use tape::{Axis, Gradients, SparseMatrix, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("segment {0} has no members")]
    EmptySegment(usize),
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("function is not deterministic: repeated evaluations differ")]
    NonDeterministic,
    #[error("{0}")]
    InvalidArgument(String),
}
