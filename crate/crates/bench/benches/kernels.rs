// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hot kernels on the toy model: traced forward pass, eigensolver, PCA,
//! transport fitting and the steered forward pass.

use criterion::{criterion_group, criterion_main, Criterion};
use mega_core::evaluation::EditCase;
use mega_core::model::{Engine, Model, ModelConfig, ModelWeights, Tokenizer};
use mega_core::numerics::{pca_fit, sym_eig, PcaOptions, SymmetricMatrix, TensorF32};
use mega_core::steering::{fit_policy, fit_transport, steered_forward, SteeringConfig};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn toy_engine() -> Engine {
    let cfg = ModelConfig::toy();
    let weights = ModelWeights::random(&cfg, 7, 0.1).unwrap();
    Engine::new(Model::new(cfg, weights).unwrap(), Tokenizer::Byte).unwrap()
}

fn random_matrix(n: usize, d: usize, seed: u64) -> TensorF32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    TensorF32::new(vec![n, d], data).unwrap()
}

fn gram(x: &TensorF32) -> SymmetricMatrix {
    let g = x.transpose().unwrap().matmul(x).unwrap();
    SymmetricMatrix::new(x.cols(), g.into_data()).unwrap()
}

fn case() -> EditCase {
    EditCase {
        case_id: "bench".into(),
        prompt: "The jersey number of Tavo Lin is".into(),
        subject: "Tavo Lin".into(),
        ground_truth: "4".into(),
        target_new: "7".into(),
        paraphrase_prompts: vec!["So the jersey number of Tavo Lin is".into(), "Q: The jersey number of Tavo Lin is".into()],
        locality_probes: Vec::new(),
        ripple_tests: Default::default(),
        implication_prompts: Vec::new(),
    }
}

fn kernels(c: &mut Criterion) {
    let engine = toy_engine();
    let tokens: Vec<u32> = b"The jersey number of Tavo Lin is".iter().map(|&b| u32::from(b)).collect();
    let last = tokens.len() - 1;
    c.bench_function("forward_trace/toy/32", |b| {
        b.iter(|| engine.model.forward_trace(black_box(&tokens), last).unwrap())
    });

    let cov = gram(&random_matrix(256, 32, 1));
    c.bench_function("sym_eig/32", |b| b.iter(|| sym_eig(black_box(&cov)).unwrap()));

    let acts = random_matrix(512, 32, 2);
    c.bench_function("pca_fit/512x32/k16", |b| {
        b.iter(|| pca_fit(black_box(&acts), 16, PcaOptions::default()).unwrap())
    });

    let src = random_matrix(512, 16, 3);
    let tgt = random_matrix(512, 16, 4);
    c.bench_function("fit_transport/512x16", |b| {
        b.iter(|| fit_transport(black_box(&src), black_box(&tgt), 1e-2).unwrap())
    });

    let cfg = SteeringConfig {
        window: [1, 2],
        k: 16,
        tau: 1e9,
        ..SteeringConfig::default()
    };
    let policy = fit_policy(&engine, &case(), &cfg).unwrap();
    c.bench_function("steered_forward/toy/32", |b| {
        b.iter(|| steered_forward(&engine.model, &policy, black_box(&tokens)).unwrap())
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
