// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{MegaError, Result};

/// Hyperparameters of a GPT-2 family decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
}

fn default_ln_eps() -> f32 {
    1e-5
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(MegaError::Config("n_layers must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(MegaError::Config("vocab_size must be >= 2".into()));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(MegaError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_positions == 0 {
            return Err(MegaError::Config("d_ff and max_positions must be positive".into()));
        }
        if !(self.ln_eps.is_finite() && self.ln_eps > 0.0) {
            return Err(MegaError::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Published GPT-2 small (124M) dimensions.
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            vocab_size: 50257,
            max_positions: 1024,
            ln_eps: 1e-5,
        }
    }

    /// Byte-vocabulary toy model used by the test suite.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 256,
            max_positions: 256,
            ln_eps: 1e-5,
        }
    }
}
