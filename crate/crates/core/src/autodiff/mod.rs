//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! Operations are recorded on a [`Tape`] as they execute. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and adds
//! `∂loss/∂node` into every node that requires a gradient.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_compare, relative_error, GradCheckReport, GradComparison};
pub use tape::{CustomBackward, ElemKind, Tape, Var};
