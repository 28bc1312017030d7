//! Numeric substrate: dense `f64` tensors, a reverse-mode tape, standard
//! losses, Adam, a portable SplitMix64 RNG and a finite-difference checker.

mod difference;
mod gradcheck;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Param, ParamStore};
pub use rng::Rng;
pub use tape::{bce_scalar, kl_diag_gaussian, sigmoid, Tape, Var, PROB_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("invalid tensor shape {0:?}: rank must be 1 or 2 with positive extents")]
    BadShape(Vec<usize>),
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("gradient for `{0}` has the wrong length")]
    GradientShape(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
}

impl NumericError {
    pub(crate) fn shape(op: &'static str, a: &Tensor, b: &Tensor) -> Self {
        Self::Shape {
            op,
            left: format!("{:?}", a.shape()),
            right: format!("{:?}", b.shape()),
        }
    }
}

pub type Result<T> = std::result::Result<T, NumericError>;
