// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON run configuration.
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use mega_core::evaluation::Sampling;
use mega_core::model::{BpeTokenizer, Engine, Model, ModelConfig, Tokenizer};
use mega_core::steering::SteeringConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// One token per byte; ids `0..256`.
    #[default]
    Byte,
    /// GPT-2 byte-level BPE from `vocab.json` and `merges.txt`.
    Bpe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TokenizerSection {
    #[serde(default)]
    pub mode: TokenizerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merges_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub weights_path: PathBuf,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default)]
    pub emit_svg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSection {
    /// In-context demonstrations `(prompt, target)` placed before the edit.
    #[serde(default)]
    pub ike_demos: Vec<(String, String)>,
    /// Upper bound on cases per class entering the mean profiles.
    #[serde(default = "default_max_per_class")]
    pub max_per_class: usize,
}

impl Default for AttributionSection {
    fn default() -> Self {
        Self {
            ike_demos: Vec::new(),
            max_per_class: default_max_per_class(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSection {
    /// Greedy tokens decoded per answer check.
    #[serde(default = "default_max_new")]
    pub max_new: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            max_new: default_max_new(),
        }
    }
}

/// Parameters for `gen-toy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySection {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_toy_cases")]
    pub n_cases: usize,
    /// Standard deviation of the random weight initialization.
    #[serde(default = "default_toy_scale")]
    pub init_scale: f32,
    /// Multiplier on the token embeddings after initialization; larger
    /// embeddings keep token identity legible through the random blocks.
    #[serde(default = "default_toy_embedding_scale")]
    pub embedding_scale: f32,
    /// Multiplier on the positional embeddings after initialization. Small
    /// values keep the last-token state from hinging on prompt length, so
    /// paraphrases of different lengths behave alike.
    #[serde(default = "default_toy_position_scale")]
    pub position_scale: f32,
    #[serde(default)]
    pub copy_head: CopyHeadSection,
    #[serde(default = "default_toy_paraphrases")]
    pub n_paraphrases: usize,
    #[serde(default = "default_toy_probes")]
    pub n_probes: usize,
    /// Candidate prompts tried before giving up.
    #[serde(default = "default_toy_attempts")]
    pub max_attempts: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            n_cases: default_toy_cases(),
            init_scale: default_toy_scale(),
            position_scale: default_toy_position_scale(),
            embedding_scale: default_toy_embedding_scale(),
            copy_head: CopyHeadSection::default(),
            n_paraphrases: default_toy_paraphrases(),
            n_probes: default_toy_probes(),
            max_attempts: default_toy_attempts(),
        }
    }
}

/// Planted attention layer that copies a digit token from the context.
///
/// Digit embeddings share a marker direction. Every head of the layer keys
/// on that direction with a constant query, so attention concentrates on
/// digits, and the value/output path is a scaled identity that writes the
/// attended token's normalized state into the residual stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyHeadSection {
    /// Layer holding the head; `None` uses the first steering-window layer.
    #[serde(default)]
    pub layer: Option<usize>,
    /// Length of the marker direction added to digit embeddings.
    #[serde(default = "default_digit_boost")]
    pub digit_boost: f32,
    /// Gain of the key projection onto the marker direction.
    #[serde(default = "default_key_gain")]
    pub key_gain: f32,
    /// Gain of the identity value/output path.
    #[serde(default = "default_copy_gain")]
    pub copy_gain: f32,
}

impl Default for CopyHeadSection {
    fn default() -> Self {
        Self {
            layer: None,
            digit_boost: default_digit_boost(),
            key_gain: default_key_gain(),
            copy_gain: default_copy_gain(),
        }
    }
}

fn default_digit_boost() -> f32 {
    2.0
}
fn default_key_gain() -> f32 {
    20.0
}
fn default_copy_gain() -> f32 {
    3.0
}
fn default_toy_embedding_scale() -> f32 {
    4.0
}

fn default_seed() -> u64 {
    42
}
fn default_max_per_class() -> usize {
    50
}
fn default_max_new() -> usize {
    mega_core::evaluation::DEFAULT_MAX_NEW
}
fn default_toy_cases() -> usize {
    10
}
fn default_toy_scale() -> f32 {
    0.1
}
fn default_toy_position_scale() -> f32 {
    0.05
}
fn default_toy_paraphrases() -> usize {
    4
}
fn default_toy_probes() -> usize {
    3
}
fn default_toy_attempts() -> usize {
    2000
}

/// Every hyperparameter of a run in one serializable record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub steering: SteeringConfig,
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default)]
    pub attribution: AttributionSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub toy: ToySection,
}

impl RunConfig {
    /// Defaults for the synthetic toy setup, with paths relative to the
    /// config file.
    pub fn toy_default() -> Self {
        let model = ModelConfig {
            max_positions: 512,
            ..ModelConfig::toy()
        };
        let n_layers = model.n_layers;
        Self {
            model: ModelSection {
                weights_path: "toy/model.safetensors".into(),
                tokenizer: TokenizerSection::default(),
                config: model,
            },
            dataset: DatasetSection {
                path: "toy/cases.jsonl".into(),
                limit: None,
                seed: default_seed(),
                sampling: Sampling::FirstN,
            },
            steering: SteeringConfig {
                window: middle_half(n_layers),
                k: 16,
                ..SteeringConfig::default()
            },
            output: OutputSection {
                dir: "out".into(),
                emit_svg: false,
            },
            threads: None,
            attribution: AttributionSection::default(),
            evaluation: EvaluationSection::default(),
            toy: ToySection::default(),
        }
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> CliResult<String> {
        serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Parse, validate and resolve relative paths against `path`'s directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.model.weights_path);
        if let Some(p) = self.model.tokenizer.vocab_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.model.tokenizer.merges_path.as_mut() {
            fix(p);
        }
        fix(&mut self.dataset.path);
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.config.validate()?;
        self.steering.validate(self.model.config.n_layers)?;
        if self.evaluation.max_new == 0 {
            return Err(CliError::Config("evaluation.max_new must be >= 1".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        if self.model.tokenizer.mode == TokenizerMode::Bpe
            && (self.model.tokenizer.vocab_path.is_none()
                || self.model.tokenizer.merges_path.is_none())
        {
            return Err(CliError::Config(
                "bpe tokenizer needs vocab_path and merges_path".into(),
            ));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> CliResult<Tokenizer> {
        let t = &self.model.tokenizer;
        Ok(match t.mode {
            TokenizerMode::Byte => Tokenizer::Byte,
            TokenizerMode::Bpe => Tokenizer::Bpe(BpeTokenizer::from_files(
                t.vocab_path.as_deref().unwrap_or(Path::new("")),
                t.merges_path.as_deref().unwrap_or(Path::new("")),
            )?),
        })
    }

    pub fn engine(&self) -> CliResult<Engine> {
        self.engine_with_weights(&self.model.weights_path)
    }

    pub fn engine_with_weights(&self, weights: &Path) -> CliResult<Engine> {
        let model = Model::load(weights, self.model.config.clone())?;
        Ok(Engine::new(model, self.tokenizer()?)?)
    }
}

/// Inclusive window covering the middle half of `n_layers` layers.
pub fn middle_half(n_layers: usize) -> [usize; 2] {
    let lo = n_layers / 4;
    let hi = (n_layers - n_layers / 4).saturating_sub(1).max(lo);
    [lo, hi]
}
