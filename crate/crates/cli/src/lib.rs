//! File formats, configuration, exports and subcommands for the `dyngam` binary.

// `!(x > 0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod commands;
pub mod config;
pub mod export;
pub mod io;

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Validation(#[from] dyngam_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn format(path: &Path, message: impl std::fmt::Display) -> Self {
        CliError::Format { path: path.display().to_string(), message: message.to_string() }
    }
}
