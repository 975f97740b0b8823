// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 weights and the safetensors container.
//!
//! Tensor names follow the published Hugging Face GPT-2 checkpoint, with an
//! optional `transformer.` prefix:
//!
//! | name                       | shape            |
//! |----------------------------|------------------|
//! | `wte.weight`               | `[V, d]`         |
//! | `wpe.weight`               | `[P, d]`         |
//! | `h.{i}.ln_1.{weight,bias}` | `[d]`            |
//! | `h.{i}.attn.c_attn.weight` | `[d, 3d]`        |
//! | `h.{i}.attn.c_attn.bias`   | `[3d]`           |
//! | `h.{i}.attn.c_proj.weight` | `[d, d]`         |
//! | `h.{i}.attn.c_proj.bias`   | `[d]`            |
//! | `h.{i}.ln_2.{weight,bias}` | `[d]`            |
//! | `h.{i}.mlp.c_fc.weight`    | `[d, d_ff]`      |
//! | `h.{i}.mlp.c_fc.bias`      | `[d_ff]`         |
//! | `h.{i}.mlp.c_proj.weight`  | `[d_ff, d]`      |
//! | `h.{i}.mlp.c_proj.bias`    | `[d]`            |
//! | `ln_f.{weight,bias}`       | `[d]`            |
//! | `lm_head.weight` (opt.)    | `[V, d]`         |
//!
//! Projection matrices use the Conv1D `[in, out]` layout on disk and are
//! transposed to `[out, in]` in memory so every output is one contiguous dot
//! product. Without `lm_head.weight` the head is tied to `wte.weight`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use super::config::ModelConfig;
use crate::error::{MegaError, Result};
use crate::numerics::check_finite;

/// Affine layer stored as `[out, in]` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn row(&self, j: usize) -> &[f32] {
        &self.weight[j * self.d_in..(j + 1) * self.d_in]
    }

    fn to_conv1d(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.weight.len()];
        for j in 0..self.d_out {
            for i in 0..self.d_in {
                out[i * self.d_out + j] = self.weight[j * self.d_in + i];
            }
        }
        out
    }

    fn from_conv1d(data: &[f32], bias: Vec<f32>, d_in: usize, d_out: usize) -> Self {
        let mut weight = vec![0.0; data.len()];
        for i in 0..d_in {
            for j in 0..d_out {
                weight[j * d_in + i] = data[i * d_out + j];
            }
        }
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormParams,
    /// Fused query/key/value projection, `d_out = 3 * d_model`.
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNormParams,
    pub fc: Linear,
    pub proj: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `[V, d]`
    pub token_embedding: Vec<f32>,
    /// `[P, d]`
    pub position_embedding: Vec<f32>,
    pub blocks: Vec<BlockWeights>,
    pub ln_f: LayerNormParams,
    /// Untied head `[V, d]`; `None` means tied to the token embedding.
    pub lm_head: Option<Vec<f32>>,
}

impl ModelWeights {
    /// Seeded random weights. `scale` is the standard deviation of every
    /// projection and embedding entry; layer norms start at identity.
    pub fn random(config: &ModelConfig, seed: u64, scale: f32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, scale)
            .map_err(|e| MegaError::Config(format!("bad init scale: {e}")))?;
        let mut sample = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        let d = config.d_model;
        let ln = |d: usize| LayerNormParams {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        };
        let token_embedding = sample(config.vocab_size * d);
        let position_embedding = sample(config.max_positions * d);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut linear = |d_in: usize, d_out: usize| Linear {
                weight: sample(d_in * d_out),
                bias: sample(d_out),
                d_in,
                d_out,
            };
            blocks.push(BlockWeights {
                ln1: ln(d),
                qkv: linear(d, 3 * d),
                attn_out: linear(d, d),
                ln2: ln(d),
                fc: linear(d, config.d_ff),
                proj: linear(config.d_ff, d),
            });
        }
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            ln_f: ln(d),
            lm_head: None,
        })
    }

    /// Head matrix `[V, d]`, honoring tying.
    pub fn head(&self) -> &[f32] {
        self.lm_head.as_deref().unwrap_or(&self.token_embedding)
    }

    /// Write the weights in safetensors format under GPT-2 tensor names.
    pub fn save_safetensors(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            owned.push((name, shape, f32_to_le(data)));
        };
        let d = config.d_model;
        push("wte.weight".into(), vec![config.vocab_size, d], &self.token_embedding);
        push("wpe.weight".into(), vec![config.max_positions, d], &self.position_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("h.{i}");
            push(format!("{p}.ln_1.weight"), vec![d], &b.ln1.gamma);
            push(format!("{p}.ln_1.bias"), vec![d], &b.ln1.beta);
            push(format!("{p}.attn.c_attn.weight"), vec![d, 3 * d], &b.qkv.to_conv1d());
            push(format!("{p}.attn.c_attn.bias"), vec![3 * d], &b.qkv.bias);
            push(format!("{p}.attn.c_proj.weight"), vec![d, d], &b.attn_out.to_conv1d());
            push(format!("{p}.attn.c_proj.bias"), vec![d], &b.attn_out.bias);
            push(format!("{p}.ln_2.weight"), vec![d], &b.ln2.gamma);
            push(format!("{p}.ln_2.bias"), vec![d], &b.ln2.beta);
            push(format!("{p}.mlp.c_fc.weight"), vec![d, config.d_ff], &b.fc.to_conv1d());
            push(format!("{p}.mlp.c_fc.bias"), vec![config.d_ff], &b.fc.bias);
            push(format!("{p}.mlp.c_proj.weight"), vec![config.d_ff, d], &b.proj.to_conv1d());
            push(format!("{p}.mlp.c_proj.bias"), vec![d], &b.proj.bias);
        }
        push("ln_f.weight".into(), vec![d], &self.ln_f.gamma);
        push("ln_f.bias".into(), vec![d], &self.ln_f.beta);
        if let Some(head) = &self.lm_head {
            push("lm_head.weight".into(), vec![config.vocab_size, d], head);
        }
        let views = owned
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| weight_err(path, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let bytes = safetensors::serialize(views, None).map_err(|e| weight_err(path, e))?;
        std::fs::write(path, bytes).map_err(|e| MegaError::io(path, e))
    }

    /// Read and validate a safetensors file against `config`.
    pub fn load_safetensors(config: &ModelConfig, path: &Path) -> Result<Self> {
        config.validate()?;
        let bytes = std::fs::read(path).map_err(|e| MegaError::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| weight_err(path, e))?;
        let names: HashMap<String, String> = st
            .names()
            .into_iter()
            .map(|n| (n.strip_prefix("transformer.").unwrap_or(n).to_string(), n.to_string()))
            .collect();
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let full = names
                .get(name)
                .ok_or_else(|| MegaError::MissingTensor(name.to_string()))?;
            let view = st.tensor(full).map_err(|e| weight_err(path, e))?;
            if view.dtype() != Dtype::F32 {
                return Err(weight_err(
                    path,
                    format!("tensor {name} has dtype {:?}, expected F32", view.dtype()),
                ));
            }
            if view.shape() != shape {
                return Err(MegaError::Shape(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    view.shape()
                )));
            }
            let data = le_to_f32(view.data());
            check_finite(name, &data)?;
            Ok(data)
        };
        let d = config.d_model;
        let ln = |prefix: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gamma: fetch(&format!("{prefix}.weight"), &[d])?,
                beta: fetch(&format!("{prefix}.bias"), &[d])?,
            })
        };
        let linear = |prefix: &str, d_in: usize, d_out: usize| -> Result<Linear> {
            let w = fetch(&format!("{prefix}.weight"), &[d_in, d_out])?;
            let b = fetch(&format!("{prefix}.bias"), &[d_out])?;
            Ok(Linear::from_conv1d(&w, b, d_in, d_out))
        };
        let token_embedding = fetch("wte.weight", &[config.vocab_size, d])?;
        let position_embedding = fetch("wpe.weight", &[config.max_positions, d])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("h.{i}");
            blocks.push(BlockWeights {
                ln1: ln(&format!("{p}.ln_1"))?,
                qkv: linear(&format!("{p}.attn.c_attn"), d, 3 * d)?,
                attn_out: linear(&format!("{p}.attn.c_proj"), d, d)?,
                ln2: ln(&format!("{p}.ln_2"))?,
                fc: linear(&format!("{p}.mlp.c_fc"), d, config.d_ff)?,
                proj: linear(&format!("{p}.mlp.c_proj"), config.d_ff, d)?,
            });
        }
        let ln_f = ln("ln_f")?;
        let lm_head = if names.contains_key("lm_head.weight") {
            Some(fetch("lm_head.weight", &[config.vocab_size, d])?)
        } else {
            None
        };
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            ln_f,
            lm_head,
        })
    }
}

fn weight_err(path: &Path, e: impl std::fmt::Display) -> MegaError {
    MegaError::WeightFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn f32_to_le(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn le_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}
