//! Dense tensors, a reverse-mode tape, and finite-difference checking.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use gradcheck::{gradcheck, gradcheck_sampled, GradcheckReport};
pub use graph::{Graph, Var};
pub use params::{Gradients, Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;
