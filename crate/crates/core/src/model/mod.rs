// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 family decoder: weights, tokenizers and the traced forward pass.

mod config;
mod forward;
mod tokenizer;
mod weights;

use std::path::Path;

pub use config::ModelConfig;
pub use forward::{argmax, log_softmax_at, Model, ResidualHook, ResidualTrace};
pub use tokenizer::{bytes_to_unicode, parse_merges, BpeTokenizer, Tokenizer};
pub use weights::{BlockWeights, LayerNormParams, Linear, ModelWeights};

use crate::error::{MegaError, Result};

/// Load a model from a safetensors file.
pub fn load_model(weights_path: &Path, config: ModelConfig) -> Result<Model> {
    Model::load(weights_path, config)
}

/// A model paired with its tokenizer: the unit that turns prompts into
/// traces and text.
#[derive(Debug, Clone)]
pub struct Engine {
    pub model: Model,
    pub tokenizer: Tokenizer,
}

impl Engine {
    pub fn new(model: Model, tokenizer: Tokenizer) -> Result<Self> {
        if tokenizer.vocab_size() > model.config().vocab_size {
            return Err(MegaError::Config(format!(
                "tokenizer has {} symbols but the model vocabulary is {}",
                tokenizer.vocab_size(),
                model.config().vocab_size
            )));
        }
        Ok(Self { model, tokenizer })
    }

    /// Token ids of a non-empty prompt.
    pub fn encode_prompt(&self, prompt: &str) -> Result<Vec<u32>> {
        let ids = self.tokenizer.encode(prompt)?;
        if ids.is_empty() {
            return Err(MegaError::Input("empty prompt".into()));
        }
        Ok(ids)
    }

    /// Trace at the last token of `prompt`.
    pub fn trace_prompt(&self, prompt: &str) -> Result<ResidualTrace> {
        let ids = self.encode_prompt(prompt)?;
        self.model.forward_trace(&ids, ids.len() - 1)
    }

    /// Greedy continuation of `prompt`, decoded to text.
    pub fn complete(
        &self,
        prompt: &str,
        max_new: usize,
        hook: Option<&dyn ResidualHook>,
    ) -> Result<String> {
        let ids = self.encode_prompt(prompt)?;
        let out = self.model.greedy_decode(&ids, max_new, hook)?;
        self.tokenizer.decode(&out)
    }
}
