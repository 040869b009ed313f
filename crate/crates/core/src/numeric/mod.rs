//! Dense double-precision tensors, reverse-mode differentiation, parameter
//! storage, and the optimizer.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::Adam;
pub use params::{Grads, ParamId, ParamStore};

pub use tensor::{log_sum_exp, masked_softmax, Tensor};
