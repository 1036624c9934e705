//! Trainable KAN substrate: spline-parameterized layers, batch normalization,
//! dropout, the softmax cross-entropy loss, and Adam.
//!
//! Every differentiable piece exposes a forward pass that returns a cache and
//! a backward pass that consumes it, so gradients are exact and can be
//! composed by hand into larger models.

mod adam;
mod dropout;
mod layer;
mod loss;
mod network;
mod norm;

pub use adam::{adam_step, AdamState};
pub use dropout::{dropout, dropout_mask, DropoutMask};
pub use layer::{KanLayer, KanLayerCache, KanLayerGrads};
pub(crate) use loss::cross_entropy_grad;
pub use loss::{mse_loss, softmax_cross_entropy};
pub use network::{KanNetwork, NetworkGrads, Target};
pub use norm::{BatchNormCache, BatchNormGrads, BatchNormState, RunningUpdate};

use crate::spline::SplineError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KanError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("dimension must be >= 1 ({0})")]
    InvalidDimension(&'static str),
    #[error("batch of {0} rows is too small for batch normalization in train mode")]
    BatchTooSmall(usize),
    #[error("dropout rate {0} is outside [0, 1)")]
    InvalidRate(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

pub(crate) fn shape_err(expected: impl ToString, actual: impl ToString) -> KanError {
    KanError::ShapeMismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
