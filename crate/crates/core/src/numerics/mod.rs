//! Dense tensors, a reverse-mode tape, and the finite-difference harness.

mod gradcheck;
pub mod nn;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, param_gradient_check};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use params::{ParamId, ParamStore};
pub use real::{Precision, Real};
pub use tape::{
    causal_padding, interpolation_matrix, softmax_rows, ConvGeometry, Gradients, Tape, Unary, Var,
};
pub(crate) use tape::sigmoid;
pub use tensor::Tensor;
