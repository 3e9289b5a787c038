//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod check;
mod graph;
mod mlp;
mod params;
mod tensor;

pub use check::{finite_diff_grad, max_relative_error, relative_error, REL_ERR_FLOOR};
pub use graph::{Graph, Var};
pub use mlp::{Activation, LayerSpec, Mlp};
pub use params::{GradMap, Param, ParamSet, Partition};
pub use tensor::Tensor;
