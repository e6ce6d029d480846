//! Dense tensors with tape-based reverse-mode differentiation.

pub mod dense;
pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod scalar;

pub use dense::Tensor;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{conv_out_len, Gradients, Graph, Var};
pub use param::{ParamGradients, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
