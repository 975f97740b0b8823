// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-LayerNorm GPT-2 forward pass with residual-stream tracing.
//!
//! Per layer the residual stream evolves as
//!
//! ```text
//! lres = lin  + attn(ln_1(lin))
//! lout = lres + ffn(ln_2(lres))
//! ```
//!
//! and `lin` of the next layer is `lout`. [`ResidualTrace`] copies these five
//! states at one position from the same buffers the forward pass uses, so the
//! additive identities hold bit-for-bit. [`ResidualHook`] slots let callers
//! rewrite the attention output, FFN output or layer output at the last
//! position before the stream moves on.

use std::path::Path;

use rayon::prelude::*;

use super::config::ModelConfig;
use super::weights::{LayerNormParams, Linear, ModelWeights};
use crate::error::{MegaError, Result};
use crate::numerics::{check_finite, dot};

/// Work size (multiply-adds) above which projections run in parallel.
const PAR_THRESHOLD: usize = 1 << 16;

/// Per-layer residual states at one token position.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub position: usize,
    /// `lin[l]`: input to layer `l`; `lin[0]` is the embedding state.
    pub lin: Vec<Vec<f32>>,
    pub attn: Vec<Vec<f32>>,
    pub lres: Vec<Vec<f32>>,
    pub ffn: Vec<Vec<f32>>,
    pub lout: Vec<Vec<f32>>,
    /// Next-token logits read out from `lout[L-1]`.
    pub logits: Vec<f32>,
}

impl ResidualTrace {
    pub fn n_layers(&self) -> usize {
        self.lin.len()
    }

    /// State after the last layer.
    pub fn final_state(&self) -> &[f32] {
        self.lout.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Intervention points at the last sequence position. Default methods leave
/// the stream untouched.
pub trait ResidualHook: Sync {
    /// Attention output of `layer`; `lin` is the residual state it will be
    /// added to.
    fn on_attn(&self, _layer: usize, _lin: &[f32], _attn: &mut [f32]) {}

    /// FFN output of `layer`; `lres` is the residual state it will be added to.
    fn on_ffn(&self, _layer: usize, _lres: &[f32], _ffn: &mut [f32]) {}

    /// Layer output after both additions.
    fn on_out(&self, _layer: usize, _lout: &mut [f32]) {}
}

/// Immutable GPT-2 model.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    /// Validate every tensor shape against `config`.
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let expect = |what: &str, got: usize, want: usize| -> Result<()> {
            if got == want {
                Ok(())
            } else {
                Err(MegaError::Shape(format!("{what}: {got} values, expected {want}")))
            }
        };
        expect("wte", weights.token_embedding.len(), config.vocab_size * d)?;
        expect("wpe", weights.position_embedding.len(), config.max_positions * d)?;
        expect("blocks", weights.blocks.len(), config.n_layers)?;
        let check_linear = |what: &str, l: &Linear, d_in: usize, d_out: usize| -> Result<()> {
            expect(what, l.d_in * l.d_out, d_in * d_out)?;
            expect(what, l.weight.len(), d_in * d_out)?;
            expect(what, l.bias.len(), d_out)?;
            check_finite(what, &l.weight)?;
            check_finite(what, &l.bias)
        };
        let check_ln = |what: &str, ln: &LayerNormParams| -> Result<()> {
            expect(what, ln.gamma.len(), d)?;
            expect(what, ln.beta.len(), d)?;
            check_finite(what, &ln.gamma)?;
            check_finite(what, &ln.beta)
        };
        for (i, b) in weights.blocks.iter().enumerate() {
            check_ln(&format!("h.{i}.ln_1"), &b.ln1)?;
            check_linear(&format!("h.{i}.attn.c_attn"), &b.qkv, d, 3 * d)?;
            check_linear(&format!("h.{i}.attn.c_proj"), &b.attn_out, d, d)?;
            check_ln(&format!("h.{i}.ln_2"), &b.ln2)?;
            check_linear(&format!("h.{i}.mlp.c_fc"), &b.fc, d, config.d_ff)?;
            check_linear(&format!("h.{i}.mlp.c_proj"), &b.proj, config.d_ff, d)?;
        }
        check_ln("ln_f", &weights.ln_f)?;
        if let Some(head) = &weights.lm_head {
            expect("lm_head", head.len(), config.vocab_size * d)?;
            check_finite("lm_head", head)?;
        }
        check_finite("wte", &weights.token_embedding)?;
        check_finite("wpe", &weights.position_embedding)?;
        Ok(Self { config, weights })
    }

    /// Load a safetensors weight file.
    pub fn load(path: &Path, config: ModelConfig) -> Result<Self> {
        let weights = ModelWeights::load_safetensors(&config, path)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(MegaError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_positions {
            return Err(MegaError::ContextOverflow {
                needed: tokens.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(t) = tokens.iter().find(|t| **t as usize >= self.config.vocab_size) {
            return Err(MegaError::Input(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Forward pass recording the residual decomposition at `position`.
    pub fn forward_trace(&self, tokens: &[u32], position: usize) -> Result<ResidualTrace> {
        self.forward_trace_hooked(tokens, position, None)
    }

    /// As [`Model::forward_trace`], with `hook` applied at the last position.
    pub fn forward_trace_hooked(
        &self,
        tokens: &[u32],
        position: usize,
        hook: Option<&dyn ResidualHook>,
    ) -> Result<ResidualTrace> {
        let (trace, _) = self.run(tokens, position, hook, true)?;
        Ok(trace.expect("trace requested"))
    }

    /// Next-token logits at `position`.
    pub fn forward_logits(&self, tokens: &[u32], position: usize) -> Result<Vec<f32>> {
        Ok(self.run(tokens, position, None, false)?.1)
    }

    /// Next-token logits at the last position with `hook` applied.
    pub fn forward_logits_hooked(
        &self,
        tokens: &[u32],
        hook: Option<&dyn ResidualHook>,
    ) -> Result<Vec<f32>> {
        let last = tokens.len().saturating_sub(1);
        Ok(self.run(tokens, last, hook, false)?.1)
    }

    fn run(
        &self,
        tokens: &[u32],
        position: usize,
        hook: Option<&dyn ResidualHook>,
        traced: bool,
    ) -> Result<(Option<ResidualTrace>, Vec<f32>)> {
        self.check_tokens(tokens)?;
        if position >= tokens.len() {
            return Err(MegaError::Input(format!(
                "position {position} out of range for {} tokens",
                tokens.len()
            )));
        }
        // Rows after `position` cannot influence it; without a hook (which
        // targets the true last row) they can be dropped.
        let tokens = if hook.is_none() {
            &tokens[..=position]
        } else {
            tokens
        };
        let cfg = &self.config;
        let d = cfg.d_model;
        let t_len = tokens.len();
        let last = t_len - 1;

        let mut x = vec![0.0f32; t_len * d];
        for (t, tok) in tokens.iter().enumerate() {
            let te = &self.weights.token_embedding[*tok as usize * d..(*tok as usize + 1) * d];
            let pe = &self.weights.position_embedding[t * d..(t + 1) * d];
            for ((o, a), b) in x[t * d..(t + 1) * d].iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }

        let mut trace = traced.then(|| ResidualTrace {
            position,
            lin: Vec::with_capacity(cfg.n_layers),
            attn: Vec::with_capacity(cfg.n_layers),
            lres: Vec::with_capacity(cfg.n_layers),
            ffn: Vec::with_capacity(cfg.n_layers),
            lout: Vec::with_capacity(cfg.n_layers),
            logits: Vec::new(),
        });
        let row = |buf: &[f32], t: usize| buf[t * d..(t + 1) * d].to_vec();

        for (layer, block) in self.weights.blocks.iter().enumerate() {
            let normed = layer_norm_rows(&x, d, &block.ln1, cfg.ln_eps);
            let qkv = linear_rows(&block.qkv, &normed, t_len);
            let mixed = causal_attention(&qkv, t_len, d, cfg.n_heads);
            let mut attn = linear_rows(&block.attn_out, &mixed, t_len);
            if let Some(h) = hook {
                h.on_attn(layer, &x[last * d..(last + 1) * d], &mut attn[last * d..(last + 1) * d]);
            }
            let mut lres = x.clone();
            add_assign(&mut lres, &attn);

            let normed = layer_norm_rows(&lres, d, &block.ln2, cfg.ln_eps);
            let mut hidden = linear_rows(&block.fc, &normed, t_len);
            hidden.iter_mut().for_each(|v| *v = gelu(*v));
            let mut ffn = linear_rows(&block.proj, &hidden, t_len);
            if let Some(h) = hook {
                h.on_ffn(layer, &lres[last * d..(last + 1) * d], &mut ffn[last * d..(last + 1) * d]);
            }
            let mut lout = lres.clone();
            add_assign(&mut lout, &ffn);
            if let Some(h) = hook {
                h.on_out(layer, &mut lout[last * d..(last + 1) * d]);
            }

            if let Some(tr) = trace.as_mut() {
                tr.lin.push(row(&x, position));
                tr.attn.push(row(&attn, position));
                tr.lres.push(row(&lres, position));
                tr.ffn.push(row(&ffn, position));
                tr.lout.push(row(&lout, position));
            }
            x = lout;
        }

        let logits = self.final_logits(&x[position * d..(position + 1) * d]);
        check_finite("logits", &logits)?;
        if let Some(tr) = trace.as_mut() {
            tr.logits = logits.clone();
        }
        Ok((trace, logits))
    }

    /// `LMhead(ln_f(h))` for a single residual state.
    pub fn final_logits(&self, h: &[f32]) -> Vec<f32> {
        let d = self.config.d_model;
        let normed = layer_norm_rows(h, d, &self.weights.ln_f, self.config.ln_eps);
        let head = self.weights.head();
        let vocab = self.config.vocab_size;
        let one = |v: usize| dot(&head[v * d..(v + 1) * d], &normed) as f32;
        if vocab * d >= PAR_THRESHOLD {
            (0..vocab).into_par_iter().map(one).collect()
        } else {
            (0..vocab).map(one).collect()
        }
    }

    /// `log softmax(LMhead(ln_f(h)))[token]`.
    pub fn logprob_from_state(&self, h: &[f32], token: u32) -> Result<f64> {
        if token as usize >= self.config.vocab_size {
            return Err(MegaError::Input(format!(
                "token id {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if h.len() != self.config.d_model {
            return Err(MegaError::Shape(format!(
                "state has {} entries, model width is {}",
                h.len(),
                self.config.d_model
            )));
        }
        check_finite("residual state", h)?;
        Ok(log_softmax_at(&self.final_logits(h), token as usize))
    }

    /// Greedy generation of `max_new` tokens; ties go to the lowest id.
    pub fn greedy_decode(
        &self,
        tokens: &[u32],
        max_new: usize,
        hook: Option<&dyn ResidualHook>,
    ) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(MegaError::Input("max_new must be >= 1".into()));
        }
        let needed = tokens.len() + max_new - 1;
        if needed > self.config.max_positions {
            return Err(MegaError::ContextOverflow {
                needed,
                max: self.config.max_positions,
            });
        }
        let mut seq = tokens.to_vec();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let logits = self.forward_logits_hooked(&seq, hook)?;
            let next = argmax(&logits) as u32;
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable log-softmax entry, computed in `f64`.
pub fn log_softmax_at(logits: &[f32], index: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(f64::from(*v)));
    let sum: f64 = logits.iter().map(|v| (f64::from(*v) - max).exp()).sum();
    f64::from(logits[index]) - max - sum.ln()
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

fn add_assign(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// GELU, tanh approximation.
fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044_715 * x * x * x)).tanh())) as f32
}

fn layer_norm_rows(x: &[f32], d: usize, p: &LayerNormParams, eps: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = src.iter().map(|v| f64::from(*v)).sum::<f64>() / d as f64;
        let var = src
            .iter()
            .map(|v| (f64::from(*v) - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        for (j, o) in dst.iter_mut().enumerate() {
            *o = ((f64::from(src[j]) - mean) * inv * f64::from(p.gamma[j]) + f64::from(p.beta[j]))
                as f32;
        }
    }
    out
}

/// `x · Wᵀ + b` for `rows` input rows.
fn linear_rows(lin: &Linear, x: &[f32], rows: usize) -> Vec<f32> {
    let (d_in, d_out) = (lin.d_in, lin.d_out);
    let cell = |t: usize, j: usize| -> f32 {
        (f64::from(lin.bias[j]) + dot(&x[t * d_in..(t + 1) * d_in], lin.row(j))) as f32
    };
    if rows * d_in * d_out < PAR_THRESHOLD {
        let mut out = Vec::with_capacity(rows * d_out);
        for t in 0..rows {
            for j in 0..d_out {
                out.push(cell(t, j));
            }
        }
        return out;
    }
    let by_feature: Vec<f32> = (0..d_out)
        .into_par_iter()
        .flat_map_iter(|j| (0..rows).map(move |t| cell(t, j)))
        .collect();
    let mut out = vec![0.0f32; rows * d_out];
    for j in 0..d_out {
        for t in 0..rows {
            out[t * d_out + j] = by_feature[j * rows + t];
        }
    }
    out
}

/// Multi-head causal self-attention over a fused `[T, 3d]` qkv buffer.
fn causal_attention(qkv: &[f32], t_len: usize, d: usize, n_heads: usize) -> Vec<f32> {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut out = vec![0.0f32; t_len * d];
    let mut weights = vec![0.0f64; t_len];
    let mut acc = vec![0.0f64; dh];
    for h in 0..n_heads {
        for t in 0..t_len {
            let q = &qkv[t * stride + h * dh..t * stride + (h + 1) * dh];
            let mut max = f64::NEG_INFINITY;
            for s in 0..=t {
                let k = &qkv[s * stride + d + h * dh..s * stride + d + (h + 1) * dh];
                let score = dot(q, k) * scale;
                weights[s] = score;
                max = max.max(score);
            }
            let mut total = 0.0;
            for w in &mut weights[..=t] {
                *w = (*w - max).exp();
                total += *w;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for s in 0..=t {
                let p = weights[s] / total;
                let v = &qkv[s * stride + 2 * d + h * dh..s * stride + 2 * d + (h + 1) * dh];
                for (a, vv) in acc.iter_mut().zip(v) {
                    *a += p * f64::from(*vv);
                }
            }
            for (j, a) in acc.iter().enumerate() {
                out[t * d + h * dh + j] = *a as f32;
            }
        }
    }
    out
}
