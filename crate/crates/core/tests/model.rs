// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{max_abs_diff, random_prompts, toy_model};
use mega_core::model::{Model, ModelConfig, ModelWeights, ResidualHook};
use mega_core::MegaError;

struct NoOp;
impl ResidualHook for NoOp {}

#[test]
fn safetensors_roundtrip_and_missing_tensor() {
    let model = toy_model(7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.safetensors");
    model.weights().save_safetensors(model.config(), &path).unwrap();
    let back = Model::load(&path, model.config().clone()).unwrap();
    assert_eq!(back.weights(), model.weights());

    // Re-write without the final layer norm.
    let bytes = std::fs::read(&path).unwrap();
    let st = safetensors::SafeTensors::deserialize(&bytes).unwrap();
    let kept: Vec<(String, safetensors::tensor::TensorView<'_>)> = st
        .names()
        .into_iter()
        .filter(|n| !n.starts_with("ln_f"))
        .map(|n| (n.to_string(), st.tensor(n).unwrap()))
        .collect();
    let pruned = dir.path().join("pruned.safetensors");
    std::fs::write(&pruned, safetensors::serialize(kept, None).unwrap()).unwrap();
    let err = Model::load(&pruned, model.config().clone()).unwrap_err();
    assert!(matches!(err, MegaError::MissingTensor(ref n) if n.contains("ln_f")), "{err}");
}

#[test]
fn trace_satisfies_residual_identities() {
    let model = toy_model(1);
    for tokens in random_prompts(10, 1, 20, 3) {
        let pos = tokens.len() - 1;
        let tr = model.forward_trace(&tokens, pos).unwrap();
        for l in 0..tr.n_layers() {
            for i in 0..tr.lin[l].len() {
                assert_eq!(tr.lres[l][i], tr.lin[l][i] + tr.attn[l][i]);
                assert_eq!(tr.lout[l][i], tr.lres[l][i] + tr.ffn[l][i]);
            }
            if l + 1 < tr.n_layers() {
                assert_eq!(tr.lin[l + 1], tr.lout[l]);
            }
        }
        assert_eq!(tr.logits, model.final_logits(tr.final_state()));
        assert_eq!(tr.logits, model.forward_logits(&tokens, pos).unwrap());
    }
}

#[test]
fn noop_hook_is_bit_identical() {
    let model = toy_model(2);
    for tokens in random_prompts(10, 1, 30, 4) {
        let base = model.forward_logits(&tokens, tokens.len() - 1).unwrap();
        let hooked = model.forward_logits_hooked(&tokens, Some(&NoOp)).unwrap();
        assert_eq!(base, hooked);
    }
}

#[test]
fn attention_is_causal() {
    let model = toy_model(3);
    let a: Vec<u32> = b"The quick brown fox".iter().map(|b| u32::from(*b)).collect();
    let mut b = a.clone();
    *b.last_mut().unwrap() = u32::from(b'Z');
    for pos in 0..a.len() - 1 {
        assert_eq!(
            model.forward_trace(&a, pos).unwrap(),
            model.forward_trace(&b, pos).unwrap()
        );
    }
    assert_ne!(
        model.forward_logits(&a, a.len() - 1).unwrap(),
        model.forward_logits(&b, b.len() - 1).unwrap()
    );
}

#[test]
fn zeroed_attention_output_contributes_nothing() {
    let cfg = ModelConfig::toy();
    let mut w = ModelWeights::random(&cfg, 5, 0.1).unwrap();
    for block in &mut w.blocks {
        block.attn_out.weight.iter_mut().for_each(|v| *v = 0.0);
        block.attn_out.bias.iter_mut().for_each(|v| *v = 0.0);
    }
    let model = Model::new(cfg, w).unwrap();
    let tr = model.forward_trace(&[10, 20, 30], 2).unwrap();
    for l in 0..tr.n_layers() {
        assert!(tr.attn[l].iter().all(|v| *v == 0.0));
        assert_eq!(tr.lres[l], tr.lin[l]);
    }
}

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: vocab,
        max_positions: 16,
        ln_eps: 1e-5,
    }
}

#[test]
fn uniform_head_gives_log_quarter() {
    let cfg = tiny_config(4);
    let mut w = ModelWeights::random(&cfg, 9, 0.3).unwrap();
    w.lm_head = Some(vec![0.0; 4 * cfg.d_model]);
    let model = Model::new(cfg, w).unwrap();
    let tr = model.forward_trace(&[1, 2, 3], 2).unwrap();
    for y in 0..4 {
        let lp = model.logprob_from_state(tr.final_state(), y).unwrap();
        assert!((lp - (-1.386_294)).abs() < 1e-6, "{lp}");
    }
}

#[test]
fn forced_head_decodes_constant_token() {
    let cfg = tiny_config(10);
    let d = cfg.d_model;
    let mut w = ModelWeights::random(&cfg, 11, 0.3).unwrap();
    // ln_f output is the constant vector of ones; only row 7 of the head sees it.
    w.ln_f.gamma = vec![0.0; d];
    w.ln_f.beta = vec![1.0; d];
    let mut head = vec![0.0; 10 * d];
    head[7 * d..8 * d].iter_mut().for_each(|v| *v = 1.0);
    w.lm_head = Some(head);
    let model = Model::new(cfg, w).unwrap();
    assert_eq!(model.greedy_decode(&[1, 2], 3, None).unwrap(), vec![7, 7, 7]);
    assert!(matches!(
        model.greedy_decode(&[1; 15], 3, None),
        Err(MegaError::ContextOverflow { .. })
    ));
}

#[test]
fn invalid_tokens_rejected() {
    let model = toy_model(0);
    assert!(model.forward_logits(&[], 0).is_err());
    assert!(model.forward_logits(&[999], 0).is_err());
    assert!(model.forward_logits(&[1, 2], 2).is_err());
    let a = model.forward_logits(&[1, 2, 3], 1).unwrap();
    let b = model.forward_logits(&[1, 2], 1).unwrap();
    assert!(max_abs_diff(&a, &b) == 0.0);
}
