//! Differentiable array substrate: tensors, parameters, a reverse-mode
//! tape, gradient checking and the optimizer used by both trainers.

mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_inputs, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
