//! Minimal dense linear algebra with reverse-mode gradients.
//!
//! All training math runs in 64-bit reals so gradient checks are tight;
//! wire formats quantize to 32-bit separately. Every op rejects NaN/Inf
//! instead of propagating it.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, ScalarProgram};
pub use tape::{GradTape, Gradients, ValueId, NORM_EPSILON};
pub use tensor::Tensor;
