// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream knowledge attribution and mechanism-guided activation
//! steering for GPT-2 family decoder-only transformers.
//!
//! - [`numerics`]: dense linear algebra (Jacobi eigensolver, PSD square
//!   roots, PCA).
//! - [`model`]: GPT-2 forward pass with a residual-stream trace and hook slots,
//!   safetensors weights and byte/BPE tokenizers.
//! - [`attribution`]: per-layer attention/FFN contribution scores, edited vs.
//!   base deltas, outcome classification and aggregation.
//! - [`steering`]: activation collection, PCA-reduced Gaussian transport maps,
//!   the Euclidean scope detector and steered inference.
//! - [`evaluation`]: edit-case datasets, answer matching and CounterFact /
//!   RippleEdits style metrics.

pub mod attribution;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod steering;

pub use error::{MegaError, Result};
