// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{max_abs_diff, random_prompts, toy_engine};
use mega_core::evaluation::{EditCase, LocalityProbe, RippleTests};
use mega_core::model::ResidualHook;
use mega_core::numerics::{pca_fit, PcaOptions, PcaProjector, TensorF32};
use mega_core::steering::{
    collect_activations, fit_policy, fit_transport, in_scope, steer_transform, steered_forward,
    ScopeDetector, ScopeSpace, SteerComponent, SteeringConfig, SteeringPolicy, TransportMap,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `n` samples of `mu + L·eps` as an `n x d` tensor.
fn gaussian_samples(n: usize, mu: &[f64], l: &[f64], seed: u64) -> TensorF32 {
    let d = mu.len();
    let eps = normal_matrix(n, d, seed);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for r in 0..d {
            let v: f64 = (0..d).map(|c| l[r * d + c] * eps[i * d + c]).sum();
            data.push((mu[r] + v) as f32);
        }
    }
    TensorF32::new(vec![n, d], data).unwrap()
}

fn moments(x: &TensorF32) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mean = x.column_means();
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (f64::from(r[a]) - mean[a]) * (f64::from(r[b]) - mean[b]);
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    (mean, cov)
}

fn frob(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                out[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    out
}

fn map_a_f64(m: &TransportMap) -> Vec<f64> {
    m.a.data().iter().map(|v| f64::from(*v)).collect()
}

fn lower_factor(seed: u64, d: usize) -> Vec<f64> {
    let mut l = normal_matrix(d, d, seed);
    for r in 0..d {
        for c in 0..d {
            if c > r {
                l[r * d + c] = 0.0;
            } else {
                l[r * d + c] *= 0.3;
            }
        }
        l[r * d + r] = 1.0 + l[r * d + r].abs();
    }
    l
}

#[test]
fn pushforward_matches_target_moments() {
    let d = 8;
    let mu_s: Vec<f64> = (0..d).map(|i| i as f64 * 0.5 - 1.0).collect();
    let mu_t: Vec<f64> = (0..d).map(|i| 3.0 + i as f64 * 0.25).collect();
    let src = gaussian_samples(10_000, &mu_s, &lower_factor(1, d), 11);
    let tgt = gaussian_samples(10_000, &mu_t, &lower_factor(2, d), 12);
    let map = fit_transport(&src, &tgt, 1e-2).unwrap();
    let pushed: Vec<Vec<f32>> = (0..src.rows()).map(|i| map.apply(src.row(i))).collect();
    let pushed = TensorF32::from_rows(&pushed).unwrap();
    let (pm, pc) = moments(&pushed);
    let (tm, tc) = moments(&tgt);
    let mean_gap: Vec<f64> = pm.iter().zip(&tm).map(|(a, b)| a - b).collect();
    let cov_gap: Vec<f64> = pc.iter().zip(&tc).map(|(a, b)| a - b).collect();
    assert!(frob(&mean_gap) <= 0.02 * frob(&tm), "mean gap {}", frob(&mean_gap));
    assert!(frob(&cov_gap) <= 0.05 * frob(&tc), "cov gap {}", frob(&cov_gap) / frob(&tc));
    // A is symmetric.
    let a = map_a_f64(&map);
    for i in 0..d {
        for j in 0..d {
            assert!((a[i * d + j] - a[j * d + i]).abs() <= 1e-4);
        }
    }
}

#[test]
fn reverse_map_is_inverse() {
    let d = 8;
    let mu_s = vec![0.0; d];
    let mu_t = vec![1.0; d];
    let src = gaussian_samples(10_000, &mu_s, &lower_factor(3, d), 21);
    let tgt = gaussian_samples(10_000, &mu_t, &lower_factor(4, d), 22);
    let fwd = fit_transport(&src, &tgt, 1e-6).unwrap();
    let bwd = fit_transport(&tgt, &src, 1e-6).unwrap();
    let mut prod = matmul(&map_a_f64(&fwd), &map_a_f64(&bwd), d);
    for i in 0..d {
        prod[i * d + i] -= 1.0;
    }
    assert!(frob(&prod) <= 0.1, "{}", frob(&prod));
}

#[test]
fn identical_samples_fit_near_identity() {
    let d = 4;
    let mu = vec![2.0, -1.0, 0.5, 3.0];
    let x = gaussian_samples(2_000, &mu, &lower_factor(5, d), 31);
    let map = fit_transport(&x, &x, 1e-2).unwrap();
    let mut a = map_a_f64(&map);
    for i in 0..d {
        a[i * d + i] -= 1.0;
    }
    let b: Vec<f64> = map.b.iter().map(|v| f64::from(*v)).collect();
    assert!(frob(&a) <= 0.05);
    assert!(frob(&b) <= 0.05 * (1.0 + frob(&mu)));
}

#[test]
fn full_space_transform_is_affine_map() {
    let d = 3;
    let map = TransportMap {
        a: TensorF32::new(vec![3, 3], vec![2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 3.0]).unwrap(),
        b: vec![1.0, -2.0, 0.25],
        lambda: 0.0,
    };
    let h = [0.5f32, -1.5, 2.0];
    let out = steer_transform(&h, &PcaProjector::identity(d), &map);
    assert_eq!(out, map.apply(&h));
}

fn random_projector(d: usize, k: usize, seed: u64) -> PcaProjector {
    let data = normal_matrix(50, d, seed).iter().map(|v| *v as f32).collect();
    pca_fit(&TensorF32::new(vec![50, d], data).unwrap(), k, PcaOptions::default())
        .unwrap()
        .projector
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn transform_only_moves_within_subspace(
        h in prop::collection::vec(-5.0f32..5.0, 16),
        a_diag in prop::collection::vec(0.1f32..3.0, 4),
        b in prop::collection::vec(-2.0f32..2.0, 4),
        seed in 0u64..8,
    ) {
        let p = random_projector(16, 4, seed);
        let mut a = vec![0.0f32; 16];
        for i in 0..4 { a[i * 4 + i] = a_diag[i]; }
        let map = TransportMap { a: TensorF32::new(vec![4, 4], a).unwrap(), b, lambda: 0.0 };
        let out = steer_transform(&h, &p, &map);
        let delta: Vec<f32> = out.iter().zip(&h).map(|(o, h)| o - h).collect();
        // (I - PᵀP)·delta computed explicitly.
        let z: Vec<f64> = (0..4).map(|r| p.basis().row(r).iter().zip(&delta).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()).collect();
        let mut resid: Vec<f64> = delta.iter().map(|v| f64::from(*v)).collect();
        for r in 0..4 {
            for (j, x) in p.basis().row(r).iter().enumerate() {
                resid[j] -= f64::from(*x) * z[r];
            }
        }
        prop_assert!(frob(&resid) <= 1e-5, "orthogonal residual {}", frob(&resid));
    }
}

fn case() -> EditCase {
    EditCase {
        case_id: "toy-1".into(),
        prompt: "The capital of Qarn is".into(),
        subject: "Qarn".into(),
        ground_truth: "Lome".into(),
        target_new: "Vask".into(),
        paraphrase_prompts: vec![
            "Qarn has its capital in".into(),
            "In Qarn, the capital city is".into(),
            "Qarn's capital is".into(),
        ],
        locality_probes: vec![LocalityProbe {
            prompt: "Water boils at".into(),
            answer: "100".into(),
        }],
        ripple_tests: RippleTests::default(),
        implication_prompts: vec![],
    }
}

fn config(component: SteerComponent, window: [usize; 2]) -> SteeringConfig {
    SteeringConfig {
        window,
        component,
        k: 8,
        tau: 1e6,
        ..SteeringConfig::default()
    }
}

#[test]
fn collected_rows_equal_trace_fields() {
    let engine = toy_engine(4);
    let prompts = vec!["alpha beta".to_string(), "gamma".to_string(), "alpha beta".to_string()];
    for component in SteerComponent::ALL {
        let acts = collect_activations(&engine, &prompts, 2, component).unwrap();
        assert_eq!(acts.row(0), acts.row(2));
        for (i, p) in prompts.iter().enumerate() {
            let tr = engine.trace_prompt(p).unwrap();
            assert_eq!(acts.row(i), component.state(&tr, 2));
        }
    }
}

#[test]
fn singleton_window_gives_one_entry_with_metadata() {
    let engine = toy_engine(4);
    let p = fit_policy(&engine, &case(), &config(SteerComponent::AttnRes, [2, 2])).unwrap();
    assert_eq!(p.entries.len(), 1);
    assert_eq!(p.entries[0].layer, 2);
    assert_eq!(p.metadata.k, 8);
    assert!(p.metadata.k_effective <= 8);
    assert_eq!(p.detector.space.layer, 2);
    let mut no_para = case();
    no_para.paraphrase_prompts.clear();
    assert!(fit_policy(&engine, &no_para, &config(SteerComponent::AttnRes, [2, 2])).is_err());
    assert!(fit_policy(&engine, &case(), &config(SteerComponent::AttnRes, [2, 4])).is_err());
}

#[test]
fn policy_fit_is_deterministic() {
    let engine = toy_engine(4);
    let cfg = config(SteerComponent::AttnRes, [1, 2]);
    let a = fit_policy(&engine, &case(), &cfg).unwrap().to_json().unwrap();
    let b = fit_policy(&engine, &case(), &cfg).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    let back = SteeringPolicy::from_json(&a).unwrap();
    assert_eq!(back.to_json().unwrap(), a);
}

/// Hooked trace at the first window layer equals the transform applied to the
/// base trace at that site, for every component.
#[test]
fn hook_rewrites_the_configured_site() {
    let engine = toy_engine(6);
    let prompt = case().prompt;
    let ids = engine.encode_prompt(&prompt).unwrap();
    let last = ids.len() - 1;
    let base = engine.model.forward_trace(&ids, last).unwrap();
    for component in SteerComponent::ALL {
        let policy = fit_policy(&engine, &case(), &config(component, [1, 2])).unwrap();
        let hook = policy.hook();
        let steered = engine
            .model
            .forward_trace_hooked(&ids, last, Some(&hook as &dyn ResidualHook))
            .unwrap();
        let e = &policy.entries[0];
        let expected = e.transform(component.state(&base, 1));
        assert!(max_abs_diff(component.state(&steered, 1), &expected) <= 1e-4, "{component}");
        assert_eq!(steered.lin[1], base.lin[1]);
        // Residual identities still hold for the steered run.
        for l in 0..4 {
            for i in 0..steered.lin[l].len() {
                assert_eq!(steered.lres[l][i], steered.lin[l][i] + steered.attn[l][i]);
                if component != SteerComponent::Res {
                    assert_eq!(steered.lout[l][i], steered.lres[l][i] + steered.ffn[l][i]);
                }
            }
        }
    }
}

fn identity_policy(engine: &mega_core::model::Engine, component: SteerComponent) -> SteeringPolicy {
    let mut p = fit_policy(engine, &case(), &config(component, [0, 3])).unwrap();
    for e in &mut p.entries {
        e.map = TransportMap::identity(e.map.k());
    }
    p
}

#[test]
fn identity_maps_are_neutral() {
    let engine = toy_engine(9);
    for component in SteerComponent::ALL {
        let policy = identity_policy(&engine, component);
        for tokens in random_prompts(10, 2, 30, 77) {
            let out = steered_forward(&engine.model, &policy, &tokens).unwrap();
            assert!(out.scope.in_scope);
            let base = engine.model.forward_logits(&tokens, tokens.len() - 1).unwrap();
            assert!(max_abs_diff(&out.logits, &base) <= 1e-5, "{component}");
        }
    }
}

#[test]
fn out_of_scope_prompts_are_bit_identical() {
    let engine = toy_engine(10);
    let mut policy = fit_policy(&engine, &case(), &config(SteerComponent::AttnRes, [1, 2])).unwrap();
    policy.detector.tau = 0.0;
    for tokens in random_prompts(50, 1, 40, 123) {
        let out = steered_forward(&engine.model, &policy, &tokens).unwrap();
        assert!(!out.scope.in_scope);
        let base = engine.model.forward_logits(&tokens, tokens.len() - 1).unwrap();
        assert_eq!(out.logits, base);
    }
}

#[test]
fn single_prompt_detector_contains_its_prompt() {
    let engine = toy_engine(2);
    let space = ScopeSpace {
        layer: 1,
        component: SteerComponent::AttnRes,
    };
    let tr = engine.trace_prompt("The capital of Qarn is").unwrap();
    let det = ScopeDetector::new(space.component.state(&tr, 1).to_vec(), 0.0, space).unwrap();
    let d = in_scope(&det, &engine, "The capital of Qarn is").unwrap();
    assert_eq!(d.distance, 0.0);
    assert!(d.in_scope);
    assert!(!in_scope(&det, &engine, "Something else entirely").unwrap().in_scope);
}
