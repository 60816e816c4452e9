//! CLI error type carrying the process exit code.

use std::fmt;

use fmd_model::ModelError;
use fmd_tensor::io::FdtnError;
use fmd_tensor::TensorError;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configs, or datasets; exit code 1.
    Validation(String),
    /// I/O or computation failures; exit code 2.
    Runtime(String),
    /// Gradient check above threshold; exit code 3.
    GradcheckFailed,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::GradcheckFailed => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(s) => write!(f, "{s}"),
            CliError::Runtime(s) => write!(f, "{s}"),
            CliError::GradcheckFailed => write!(f, "gradient check failed"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Validation(_) | ModelError::MissingParam(_) => {
                CliError::Validation(e.to_string())
            }
            ModelError::Tensor(TensorError::Config { .. }) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Config { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<FdtnError> for CliError {
    fn from(e: FdtnError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}
