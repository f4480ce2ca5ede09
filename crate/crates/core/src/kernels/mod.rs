//! Dense numeric core: tensors, a reverse-mode tape, FFTs and the
//! finite-difference oracle every differentiable op is checked against.

pub mod archive;
pub mod fft;
pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Graph, Tape, Var};
pub use tensor::Tensor;
