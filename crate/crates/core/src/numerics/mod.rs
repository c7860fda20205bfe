//! Dense `f32` tensor algebra with hand-written backward passes.

mod grad;
pub mod gradcheck;
pub mod ops;
mod rng;
mod tensor;

pub use grad::{grad, DiffOp};
pub use rng::Rng;
pub use tensor::Tensor;
