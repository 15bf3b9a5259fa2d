//! Dense tensors, reverse-mode autodiff, AdamW, and learning-rate schedules.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use kernels::{rms_norm, softmax_rows};
pub use optim::{adamw_step, clip_grad_norm, lr_linear, AdamWConfig, OptimizerState, Schedule};
pub use params::{Bound, ParamStore};
pub use real::Real;
pub use tape::{CellRect, Gradients, Tape, Var};
pub use tensor::Tensor;
