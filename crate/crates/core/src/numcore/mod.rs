//! Dense `f64` tensors, reverse-mode gradients and the optimizer.

mod gradcheck;
mod graph;
mod optim;
mod params;
pub(crate) mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{gelu, Fault, Gradients, Graph, NodeId, Segment, LAYER_NORM_EPS};
pub use optim::{clip_grad_norm, AdamState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
