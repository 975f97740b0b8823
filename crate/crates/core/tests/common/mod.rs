// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use mega_core::model::{Engine, Model, ModelConfig, ModelWeights, Tokenizer};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_model(seed: u64) -> Model {
    let cfg = ModelConfig::toy();
    Model::new(cfg.clone(), ModelWeights::random(&cfg, seed, 0.1).unwrap()).unwrap()
}

pub fn toy_engine(seed: u64) -> Engine {
    Engine::new(toy_model(seed), Tokenizer::Byte).unwrap()
}

/// Random printable-ASCII token sequences.
pub fn random_prompts(n: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            (0..len).map(|_| rng.random_range(32u32..127)).collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
