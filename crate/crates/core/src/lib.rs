//! Mixture of LoRA experts over a tiny transformer: composition, learned
//! gating, training, synthetic tasks and on-disk artifacts.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod compose;
pub mod error;
pub mod gating;
pub mod io;
pub mod lora;
pub mod losses;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
