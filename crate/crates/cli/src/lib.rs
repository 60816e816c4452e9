//! Library surface of the command-line tool; the binary is a thin shell
//! around [`commands::run`], and the integration tests drive the same paths
//! in-process.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod dataset;
pub mod error;
pub mod pipeline;

pub use error::{CliError, Result};
