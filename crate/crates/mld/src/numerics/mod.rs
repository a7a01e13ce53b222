//! Minimal dense-tensor arithmetic with reverse-mode differentiation and a
//! decoupled-weight-decay optimizer. Everything the models in this crate
//! train with lives here; there is no BLAS and no implicit parallelism, so
//! results are deterministic given identical inputs.

mod graph;
mod linalg;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Value};
pub use linalg::{sqrt_spd, sym_eigen};
pub use optim::{adamw_step, grad_check, AdamwParams, GradCheckReport, OptimState};
pub use tensor::{Scalar, Tensor, TensorG};
