//! Error type for the model crate.

use std::fmt;

use fmd_tensor::io::FdtnError;
use fmd_tensor::TensorError;

#[derive(Debug)]
pub enum ModelError {
    Tensor(TensorError),
    Fdtn(FdtnError),
    /// Bad inputs, configs, or domain invariant violations.
    Validation(String),
    /// A named parameter was not found in the set.
    MissingParam(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Fdtn(e) => write!(f, "{e}"),
            ModelError::Validation(s) => write!(f, "validation error: {s}"),
            ModelError::MissingParam(n) => write!(f, "missing parameter '{n}'"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<FdtnError> for ModelError {
    fn from(e: FdtnError) -> Self {
        ModelError::Fdtn(e)
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn validation(msg: impl Into<String>) -> ModelError {
    ModelError::Validation(msg.into())
}
