//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
pub mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use tape::{conv_out_len, logsumexp, Gradients, GruVars, OpKind, Reduction, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
