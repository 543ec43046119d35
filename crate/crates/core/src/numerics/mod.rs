//! Dense tensors and a minimal reverse-mode differentiation tape.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use gradcheck::{grad_check, graph_grad_check, param_grad_check, relative_error};
pub use graph::{sigmoid, Gradients, Graph, ParamStore, Var};
pub use tensor::{log_add_exp, log_sum_exp, Tensor};
