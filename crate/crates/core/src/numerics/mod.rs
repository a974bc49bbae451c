//! Dense tensors, a reverse-mode tape, parameters and finite-difference checks.

mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{is_masked, Activation, CustomOp, Gradients, Graph, Var, LAYER_NORM_EPS, MASK_SENTINEL};
pub use layers::{mlp, Linear, Mlp};
pub use params::{xavier_uniform, ParamId, ParamStore, Parameter};
pub use tensor::{broadcast_shapes, Tensor};

pub(crate) use graph::softmax_row;
#[cfg(test)]
pub(crate) use graph::matmul_forward;
