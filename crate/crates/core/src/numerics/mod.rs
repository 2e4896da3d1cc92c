//! Dense tensors, a recorded computation graph with reverse-mode
//! differentiation, a seeded RNG and a finite-difference gradient checker.

mod gemm;
mod gradcheck;
mod graph;
mod packed;
mod rng;
mod tensor;

pub use gemm::{matmul_into, Transpose};
pub use gradcheck::{grad_check, grad_check_multi, grad_check_outputs, GradCheckReport};
pub use graph::{AttnSegment, Gradients, Graph, Var};
pub use packed::Packed;
pub use rng::Rng;
pub use tensor::{ParamId, ParamStore, Tensor};
