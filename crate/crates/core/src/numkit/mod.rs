//! Deterministic float64 numeric kernel: dense tensors, two-layer networks,
//! an Elman recurrent cell, softmax cross-entropy, cosine distance, Adam, and
//! tape-based reverse-mode gradients with a finite-difference checker.

mod adam;
mod check;
mod kernel;
mod nn;
mod pool;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::AdamState;
pub use check::{finite_diff_check, grad};
pub use nn::{
    argmax, cosine_distance, log_softmax, mlp2_forward, rnn_step, softmax_cross_entropy,
    Activation, Mlp2Params, RnnParams, DEFAULT_HIDDEN,
};
pub use pool::GradVec;
pub use tape::{Grads, Mlp2Vars, RnnVars, Tape, Var};
pub use tensor::{matvec, Tensor};
pub(crate) use kernel::matvec_cols_acc;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("usage error: {0}")]
    Usage(String),
}
