//! Dense tensors, angle utilities, plain kernels and reverse-mode differentiation.

mod angle;
mod gradcheck;
pub mod graph;
pub mod ops;
mod tensor;

pub use angle::{atan2_phase, circular_diff, wrap, wrap_pi, Angle};
pub use gradcheck::{grad_check, GradCheckReport, Objective};
pub use graph::{CustomOp, Gradients, Graph, ParamId, Unary, Var};
pub use ops::{layer_norm, softmax};
pub use tensor::Tensor;
