// SPDX-License-Identifier: MIT OR Apache-2.0

//! Last-token activation collection and Gaussian augmentation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::SteerComponent;
use crate::error::{MegaError, Result};
use crate::model::Engine;
use crate::numerics::TensorF32;

/// Component state at the last token of each prompt for every layer in
/// `layers`, one `n x d` matrix per layer. Prompts run in parallel; row order
/// follows `prompts`.
pub fn collect_window(
    engine: &Engine,
    prompts: &[String],
    layers: &[usize],
    component: SteerComponent,
) -> Result<Vec<TensorF32>> {
    if prompts.is_empty() {
        return Err(MegaError::Empty("no prompts to collect activations from".into()));
    }
    let n_layers = engine.model.n_layers();
    if let Some(l) = layers.iter().find(|l| **l >= n_layers) {
        return Err(MegaError::Input(format!(
            "layer {l} out of range for {n_layers} layers"
        )));
    }
    let rows: Vec<Vec<Vec<f32>>> = prompts
        .par_iter()
        .map(|p| {
            let trace = engine.trace_prompt(p)?;
            Ok(layers
                .iter()
                .map(|l| component.state(&trace, *l).to_vec())
                .collect())
        })
        .collect::<Result<_>>()?;
    layers
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let per_layer: Vec<Vec<f32>> = rows.iter().map(|r| r[i].clone()).collect();
            TensorF32::from_rows(&per_layer)
        })
        .collect()
}

/// `n x d_model` matrix of one layer's component states.
pub fn collect_activations(
    engine: &Engine,
    prompts: &[String],
    layer: usize,
    component: SteerComponent,
) -> Result<TensorF32> {
    let mut out = collect_window(engine, prompts, &[layer], component)?;
    Ok(out.remove(0))
}

/// Originals followed by `per_sample` noisy copies of each row, each copy
/// `row + N(0, sigma² I)`. `stream` selects an independent ChaCha stream so
/// several augmentations can share one seed.
pub fn augment_gaussian_stream(
    acts: &TensorF32,
    per_sample: usize,
    sigma: f64,
    seed: u64,
    stream: u64,
) -> Result<TensorF32> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(MegaError::Input(format!("invalid sigma {sigma}")));
    }
    let (n, d) = (acts.rows(), acts.cols());
    let mut data = Vec::with_capacity(n * d * (1 + per_sample));
    data.extend_from_slice(acts.data());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0f64, sigma).map_err(|e| MegaError::Input(e.to_string()))?;
    for i in 0..n {
        let row = acts.row(i);
        for _ in 0..per_sample {
            if sigma == 0.0 {
                data.extend_from_slice(row);
            } else {
                data.extend(
                    row.iter()
                        .map(|x| (f64::from(*x) + noise.sample(&mut rng)) as f32),
                );
            }
        }
    }
    TensorF32::new(vec![n * (1 + per_sample), d], data)
}

/// [`augment_gaussian_stream`] on stream 0.
pub fn augment_gaussian(
    acts: &TensorF32,
    per_sample: usize,
    sigma: f64,
    seed: u64,
) -> Result<TensorF32> {
    augment_gaussian_stream(acts, per_sample, sigma, seed, 0)
}
