//! Reverse-mode automatic differentiation over dense arrays.
//!
//! Values live on a [`Tape`]; each op records its output and an adjoint
//! rule. [`Tape::backward`] fills gradients into a [`ParamStore`].

mod params;
mod tape;
mod tensor;

pub use params::{Param, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: dimensions must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalarLoss { shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("concatenation of zero tensors")]
    EmptyConcat,
}

/// `sqrt(mean((pred - target)^2))` as a differentiable scalar.
pub fn rmse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var, TensorError> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    let m = tape.mean(sq);
    Ok(tape.sqrt(m))
}
