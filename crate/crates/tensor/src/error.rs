//! Error types shared by the tensor engine.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two shapes that must agree (or broadcast) do not.
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single shape is unusable for the requested operation.
    InvalidShape { op: &'static str, detail: String },
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    /// `backward` was asked to start from a non-scalar tensor.
    NotScalar { shape: Vec<usize> },
    /// Two `Var`s from different graphs were combined.
    GraphMismatch,
    /// Configuration-level inconsistency (head widths, block counts, ...).
    Config { detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DimMismatch { op, lhs, rhs } => {
                write!(
                    f,
                    "{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}"
                )
            }
            TensorError::InvalidShape { op, detail } => write!(f, "{op}: invalid shape: {detail}"),
            TensorError::InvalidAxis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::GraphMismatch => write!(f, "operands belong to different graphs"),
            TensorError::Config { detail } => write!(f, "configuration error: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;
