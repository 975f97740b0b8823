// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors raised by numerics, model loading, attribution, steering and
/// evaluation.
#[derive(Debug, thiserror::Error)]
pub enum MegaError {
    /// Tensor shape does not match its data or the expected layout.
    #[error("shape error: {0}")]
    Shape(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Input matrix is not symmetric within tolerance.
    #[error("matrix is not symmetric: |S[{row},{col}] - S[{col},{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    /// Input matrix has a materially negative eigenvalue.
    #[error("matrix is indefinite: eigenvalue {eigenvalue:e} below -1e-3 * norm {norm:e}")]
    Indefinite { eigenvalue: f64, norm: f64 },

    /// Iterative eigen-solver exhausted its sweep budget.
    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },

    /// PCA target dimension outside `1..=min(n-1, d)`.
    #[error("PCA dimension k={k} out of range (n={n}, d={d})")]
    PcaRange { k: usize, n: usize, d: usize },

    /// PCA input has zero variance.
    #[error("degenerate data: all rows are identical")]
    Degenerate,

    /// A model or run configuration violates an invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A required weight tensor is absent from the container.
    #[error("missing tensor {0}")]
    MissingTensor(String),

    /// Weight container could not be parsed.
    #[error("weight file {path}: {message}")]
    WeightFile { path: PathBuf, message: String },

    /// Tokenizer files are malformed or a symbol is unknown.
    #[error("tokenizer: {0}")]
    Tokenizer(String),

    /// Invalid forward-pass input.
    #[error("input error: {0}")]
    Input(String),

    /// Generation would exceed the model's position table.
    #[error("context overflow: {needed} positions needed, model supports {max}")]
    ContextOverflow { needed: usize, max: usize },

    /// Two profiles that must align do not.
    #[error("profile mismatch: {0}")]
    ProfileMismatch(String),

    /// Nothing left after filtering.
    #[error("empty selection: {0}")]
    Empty(String),

    /// Edit case is missing a required field.
    #[error("malformed case {case_id}: {message}")]
    MalformedCase { case_id: String, message: String },

    /// Steering policy file is malformed.
    #[error("policy: {0}")]
    Policy(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, MegaError>;

impl MegaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(case_id: &str, message: impl Into<String>) -> Self {
        Self::MalformedCase {
            case_id: case_id.to_string(),
            message: message.into(),
        }
    }
}
