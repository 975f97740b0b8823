// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use mega_core::MegaError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] MegaError),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("csv {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Usage(String),

    /// Some cases failed; the remaining outputs were written.
    #[error("{} case(s) failed: {}", .0.len(), .0.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>().join(", "))]
    Partial(Vec<(String, String)>),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
