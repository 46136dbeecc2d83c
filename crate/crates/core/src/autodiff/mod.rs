//! Dense reverse-mode differentiation over the handful of operations the
//! scorer and its loss need, plus central-difference gradient checking.
//!
//! Subgradients: `relu'(0) = 0` and `|x|'(0) = 0`.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, MAX_CHECKED_ENTRIES};
pub use graph::{bce, Graph, NodeId, Op, BCE_CLAMP};
pub use tensor::{ParamId, ParamSet, ParamStore, Parameter, Tensor};
