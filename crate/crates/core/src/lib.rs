//! Decoupled convolution networks: tensors, operators, layers, and optimizers.

// Range checks are written as negated comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod im2col;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};

/// Training passes update running statistics; evaluation passes only read them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}
