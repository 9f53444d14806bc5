//! Reverse-mode differentiation over dense tensors.
//!
//! Only the handful of operations the segmentation networks and the
//! adaptation losses need are provided. Values live on a [`Tape`]; each
//! operation appends a node, and [`Tape::backward`] walks the nodes in
//! reverse to accumulate gradients into the leaves that asked for them.

pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use scalar::{gemm, DType, Real};
pub use tape::{Tape, Var, LOG_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
