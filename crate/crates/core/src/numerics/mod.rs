//! Dense tensor math, reverse-mode autodiff and Adam.

mod adam;
mod serialize;
mod tape;
mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use serialize::{read_tensor, read_tensors, write_tensor, write_tensors};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{gelu, log_sum_exp, softmax_in_place, Tensor};

pub(crate) use tensor::{dot, gemm_nn};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    BadShape(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropout(f32),
    #[error("adam step counter mismatch: state at {state}, caller expected {expected}")]
    StepMismatch { state: u64, expected: u64 },
    #[error("tensor stream: {0}")]
    Io(#[from] std::io::Error),
}

/// Numerically stable softmax of a vector, returned as a new `Vec`.
pub fn softmax(v: &[f32]) -> Result<Vec<f32>, NumericsError> {
    if v.is_empty() {
        return Err(NumericsError::Empty("softmax"));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(NumericsError::NonFinite("softmax input"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `-w[target] · log softmax(logits)[target]`.
pub fn weighted_cross_entropy(
    logits: &[f32],
    target: usize,
    class_weights: &[f32],
) -> Result<f64, NumericsError> {
    if target >= logits.len() {
        return Err(NumericsError::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    if class_weights.len() != logits.len() {
        return Err(NumericsError::ShapeMismatch {
            expected: vec![logits.len()],
            found: vec![class_weights.len()],
        });
    }
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(NumericsError::NonFinite("cross_entropy input"));
    }
    let lse = log_sum_exp(logits);
    Ok(class_weights[target] as f64 * (lse - logits[target] as f64))
}
