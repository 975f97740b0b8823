// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Runs without the test harness (`cargo test -p mega-cli --test acceptance`)
//! and exits nonzero when any criterion fails. Tolerances and runtime budgets
//! are fixed below; a criterion that exceeds its budget fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{csv_rows, listing, mega, path_str, read, with_output};
use mega_cli::attribute::{DELTA_CSV, MEAN_SUCCESSFUL_CSV};
use mega_cli::config::{middle_half, RunConfig, TokenizerMode};
use mega_cli::steer::POLICY_DIR;
use mega_core::attribution::{
    classify_outcome, contribution_profile, ike_context_for, Classification, TokenRole,
};
use mega_core::evaluation::{
    aggregate_report, load_jsonl, make_doubt_prompts, render_table, BaseSystem, CaseScores,
    EditCase, EditSystem, MetricSet, SteeredSystem,
};
use mega_core::model::{Engine, Model, ModelConfig, ModelWeights, Tokenizer};
use mega_core::numerics::TensorF32;
use mega_core::steering::{
    fit_policy, fit_transport, in_scope, load_policy, steered_forward, SteerComponent,
    SteeringConfig, TransportMap,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::{Fail, Pass, Skip};

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

// ---------------------------------------------------------------------------
// Shared fixtures

fn toy_model(seed: u64) -> Model {
    let cfg = ModelConfig::toy();
    Model::new(cfg.clone(), ModelWeights::random(&cfg, seed, 0.1).unwrap()).unwrap()
}

fn random_prompts(n: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            (0..len).map(|_| rng.random_range(32u32..127)).collect()
        })
        .collect()
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

// ---------------------------------------------------------------------------
// 1. Telescoping attribution identity

fn telescoping() -> Verdict {
    let model = toy_model(42);
    let cfg = model.config();
    if (cfg.n_layers, cfg.d_model, cfg.vocab_size) != (4, 32, 256) {
        return Fail("toy shape mismatch".into());
    }
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, tokens) in random_prompts(100, 1, 32, 2024).iter().enumerate() {
        let pos = tokens.len() - 1;
        let trace = model.forward_trace(tokens, pos).unwrap();
        let roles = [
            ((i * 37 % 256) as u32, TokenRole::TargetNew),
            ((i * 91 % 256) as u32, TokenRole::GroundTruth),
        ];
        for (y, role) in roles {
            let p = contribution_profile(&model, tokens, pos, y, role).unwrap();
            let expected = model.logprob_from_state(&trace.lout[cfg.n_layers - 1], y).unwrap()
                - model.logprob_from_state(&trace.lin[0], y).unwrap();
            worst = worst.max((p.total() - expected).abs());
            checked += 1;
        }
    }
    check(worst <= 1e-4, format!("{checked} profiles, max gap {worst:.2e} (tol 1e-4)"))
}

// ---------------------------------------------------------------------------
// 2. Transport closed form

fn gaussian(n: usize, mu: &[f64], l: &[f64], seed: u64) -> TensorF32 {
    let d = mu.len();
    let eps = normals(n * d, seed);
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

fn transport() -> Verdict {
    // 1-D: N(0,1) -> N(3,4).
    let src = gaussian(10_000, &[0.0], &[1.0], 1);
    let tgt = gaussian(10_000, &[3.0], &[2.0], 2);
    let m1 = fit_transport(&src, &tgt, 1e-6).unwrap();
    let a = f64::from(m1.a.data()[0]);
    let b = f64::from(m1.b[0]);
    let one_d = (1.95..=2.05).contains(&a) && (2.9..=3.1).contains(&b);

    // 8-D correlated Gaussians.
    let d = 8;
    let lower = |seed: u64| {
        let mut l = normals(d * d, seed);
        for r in 0..d {
            for c in 0..d {
                l[r * d + c] = if c > r { 0.0 } else { 0.3 * l[r * d + c] };
            }
            l[r * d + r] = 1.0 + l[r * d + r].abs();
        }
        l
    };
    let mu_s: Vec<f64> = (0..d).map(|i| i as f64 * 0.5 - 1.0).collect();
    let mu_t: Vec<f64> = (0..d).map(|i| 3.0 + i as f64 * 0.25).collect();
    let src = gaussian(10_000, &mu_s, &lower(3), 4);
    let tgt = gaussian(10_000, &mu_t, &lower(5), 6);
    let m8 = fit_transport(&src, &tgt, 1e-2).unwrap();
    let pushed: Vec<Vec<f32>> = (0..src.rows()).map(|i| m8.apply(src.row(i))).collect();
    let (pm, pc) = moments(&TensorF32::from_rows(&pushed).unwrap());
    let (tm, tc) = moments(&tgt);
    let mean_rel = frob(&pm.iter().zip(&tm).map(|(x, y)| x - y).collect::<Vec<_>>()) / frob(&tm);
    let cov_rel = frob(&pc.iter().zip(&tc).map(|(x, y)| x - y).collect::<Vec<_>>()) / frob(&tc);
    check(
        one_d && mean_rel <= 0.02 && cov_rel <= 0.05,
        format!(
            "1-D A={a:.4} b={b:.4}; 8-D mean gap {:.2}% (tol 2%), cov gap {:.2}% (tol 5%)",
            100.0 * mean_rel,
            100.0 * cov_rel
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Identity neutrality and gate-off purity

fn probe_case() -> EditCase {
    EditCase {
        case_id: "neutral".into(),
        prompt: "The capital of Qarn is".into(),
        subject: "Qarn".into(),
        ground_truth: "Lome".into(),
        target_new: "Vask".into(),
        paraphrase_prompts: vec!["Qarn has its capital in".into(), "Qarn's capital is".into()],
        locality_probes: Vec::new(),
        ripple_tests: Default::default(),
        implication_prompts: Vec::new(),
    }
}

fn neutrality() -> Verdict {
    let engine = Engine::new(toy_model(9), Tokenizer::Byte).unwrap();
    let mut worst = 0.0f32;
    for component in SteerComponent::ALL {
        let cfg = SteeringConfig {
            window: [0, 3],
            component,
            k: 8,
            tau: 1e9,
            ..SteeringConfig::default()
        };
        let mut policy = fit_policy(&engine, &probe_case(), &cfg).unwrap();
        for e in &mut policy.entries {
            e.map = TransportMap::identity(e.map.k());
        }
        for tokens in random_prompts(10, 2, 30, 77) {
            let out = steered_forward(&engine.model, &policy, &tokens).unwrap();
            let base = engine.model.forward_logits(&tokens, tokens.len() - 1).unwrap();
            worst = worst.max(max_abs_diff(&out.logits, &base));
        }
    }
    let cfg = SteeringConfig {
        window: [1, 2],
        k: 8,
        tau: 0.0,
        ..SteeringConfig::default()
    };
    let policy = fit_policy(&engine, &probe_case(), &cfg).unwrap();
    let mut identical = 0;
    let prompts = random_prompts(50, 1, 40, 123);
    for tokens in &prompts {
        let out = steered_forward(&engine.model, &policy, tokens).unwrap();
        let base = engine.model.forward_logits(tokens, tokens.len() - 1).unwrap();
        if !out.scope.in_scope && out.logits == base {
            identical += 1;
        }
    }
    check(
        worst <= 1e-5 && identical == prompts.len(),
        format!(
            "identity max-norm change {worst:.2e} (tol 1e-5); {identical}/{} out-of-scope prompts bit-identical",
            prompts.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Classification truth table

fn classification() -> Verdict {
    use Classification::*;
    let table = [
        (0.0, 1.0, false, Successful),
        (0.0, 0.85, false, Failed),
        (0.5, 0.95, false, Successful),
        (0.95, 0.9, false, Failed),
        (0.0, 1.0, true, Excluded),
        (1.0, 0.0, true, Excluded),
    ];
    let wrong: Vec<String> = table
        .iter()
        .filter(|(pre, post, c, want)| classify_outcome(*pre, *post, *c) != *want)
        .map(|(pre, post, c, _)| format!("({pre},{post},{c})"))
        .collect();
    check(
        wrong.is_empty(),
        format!("{}/{} rows exact{}", table.len() - wrong.len(), table.len(), if wrong.is_empty() { String::new() } else { format!("; wrong {wrong:?}") }),
    )
}

// ---------------------------------------------------------------------------
// 5. Doubt templates

fn doubt_templates() -> Verdict {
    let case = EditCase {
        case_id: "doubt".into(),
        prompt: "The capital of X is".into(),
        subject: "X".into(),
        ground_truth: "A".into(),
        target_new: "B".into(),
        paraphrase_prompts: Vec::new(),
        locality_probes: Vec::new(),
        ripple_tests: Default::default(),
        implication_prompts: Vec::new(),
    };
    let golden_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    let di_gold = std::fs::read_to_string(golden_dir.join("doubt_di.txt")).unwrap();
    let dii_gold = std::fs::read_to_string(golden_dir.join("doubt_dii.txt")).unwrap();
    let (di, dii) = make_doubt_prompts(&case).unwrap();
    check(
        di == di_gold && dii == dii_gold,
        format!("DI {} bytes, DII {} bytes byte-compared to golden files", di.len(), dii.len()),
    )
}

// ---------------------------------------------------------------------------
// 6. Avg aggregation

fn avg_aggregation() -> Verdict {
    let scores: BTreeMap<_, _> = MetricSet::Counterfact
        .metrics()
        .iter()
        .copied()
        .zip([0.99, 0.93, 0.87, 1.00, 1.00])
        .collect();
    let report = aggregate_report(
        &[CaseScores {
            case_id: "row".into(),
            scores,
        }],
        MetricSet::Counterfact,
        None,
    )
    .unwrap();
    let table = render_table(MetricSet::Counterfact, &[("MEGA".into(), &report)]);
    let shown = table.lines().nth(1).and_then(|l| l.split_whitespace().last()).unwrap_or("");
    check(
        (report.avg - 0.958).abs() < 1e-12 && shown == "0.96",
        format!("Avg {:.6}, displayed {shown}", report.avg),
    )
}

// ---------------------------------------------------------------------------
// 7. Synthetic end-to-end steering

fn end_to_end() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    mega(&["gen-toy", "--config", path_str(&cfg_path)]).unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let n_layers = cfg.model.config.n_layers;
    if cfg.steering.window != middle_half(n_layers)
        || cfg.steering.component != SteerComponent::AttnRes
        || cfg.steering.k != 16
    {
        return Fail(format!("unexpected steering config {:?}", cfg.steering));
    }
    let cases = load_jsonl(&cfg.dataset.path).unwrap();
    let engine = cfg.engine().unwrap();
    let base = BaseSystem { engine: &engine };

    // Oracle: the in-context edit flips the base argmax to the target.
    let first = |p: &str| engine.complete(p, 1, None).unwrap();
    let flips = cases
        .iter()
        .filter(|c| {
            first(&c.prompt) != c.target_new
                && first(&ike_context_for(&[], c, &c.prompt).unwrap()) == c.target_new
        })
        .count();

    mega(&["steer-fit", "--config", path_str(&cfg_path)]).unwrap();
    let summary = mega(&["eval", "--config", path_str(&cfg_path), "--policies", path_str(&cfg.output.dir.join(POLICY_DIR))]).unwrap();
    let report: serde_json::Value =
        serde_json::from_slice(&read(&cfg.output.dir.join("eval_report.json"))).unwrap();
    let acc = report["report"]["scores"]["Acc"].as_f64().unwrap();
    let spec_all = report["report"]["scores"]["Spec"].as_f64().unwrap();

    let (mut oos, mut oos_kept, mut ins) = (0, 0, 0);
    for c in &cases {
        let policy = load_policy(&cfg.output.dir.join(POLICY_DIR).join(format!("{}.json", c.case_id))).unwrap();
        let steered = SteeredSystem {
            engine: &engine,
            policy: &policy,
        };
        for probe in &c.locality_probes {
            if in_scope(&policy.detector, &engine, &probe.prompt).unwrap().in_scope {
                ins += 1;
                continue;
            }
            oos += 1;
            let max_new = cfg.evaluation.max_new;
            if steered.complete(&probe.prompt, max_new).unwrap()
                == base.complete(&probe.prompt, max_new).unwrap()
            {
                oos_kept += 1;
            }
        }
    }
    let spec_oos = if oos > 0 { oos_kept as f64 / oos as f64 } else { f64::NAN };
    let _ = summary;
    check(
        cases.len() == 10 && flips == 10 && acc >= 0.9 && oos > 0 && spec_oos == 1.0,
        format!(
            "{} cases ({flips} in-context flips); Acc {acc:.2} (min 0.90); Spec {spec_oos:.2} on {oos} out-of-scope probes (need 1.00); {ins} in-scope probes, overall Spec {spec_all:.2}",
            cases.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Determinism across thread counts

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    listing(dir)
        .into_iter()
        .filter(|f| dir.join(f).is_file())
        .map(|f| (f.clone(), read(&dir.join(f))))
        .collect()
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    mega(&["gen-toy", "--config", path_str(&cfg)]).unwrap();
    let mut attribute = Vec::new();
    let mut policies = Vec::new();
    for threads in ["1", "8"] {
        let out = dir.path().join(format!("t{threads}"));
        let c = with_output(&cfg, &dir.path().join(format!("t{threads}.json")), &out);
        let args = ["--config", path_str(&c), "--seed", "42", "--threads", threads];
        mega(&[&["attribute"][..], &args[..]].concat()).unwrap();
        mega(&[&["steer-fit"][..], &args[..]].concat()).unwrap();
        attribute.push(dir_bytes(&out));
        policies.push(dir_bytes(&out.join(POLICY_DIR)));
    }
    let csvs = attribute[0].iter().filter(|(f, _)| f.ends_with(".csv")).count();
    check(
        attribute[0] == attribute[1] && policies[0] == policies[1] && csvs == 3,
        format!(
            "threads 1 vs 8: {} attribution files ({csvs} CSVs) and {} policy files compared byte-for-byte",
            attribute[0].len(),
            policies[0].len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. GPT-2 small smoke test (needs published weights)

fn gpt2_smoke() -> Verdict {
    let Some(dir) = std::env::var_os("MEGA_GPT2_DIR").map(PathBuf::from) else {
        return Skip("set MEGA_GPT2_DIR to a directory with model.safetensors, vocab.json, merges.txt".into());
    };
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::toy_default();
    cfg.model.weights_path = dir.join("model.safetensors");
    cfg.model.config = ModelConfig::gpt2_small();
    cfg.model.tokenizer.mode = TokenizerMode::Bpe;
    cfg.model.tokenizer.vocab_path = Some(dir.join("vocab.json"));
    cfg.model.tokenizer.merges_path = Some(dir.join("merges.txt"));
    cfg.dataset.path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/counterfact5.jsonl");
    cfg.steering.window = middle_half(12);
    cfg.output.dir = tmp.path().join("out");
    let cfg_path = tmp.path().join("gpt2.json");
    std::fs::write(&cfg_path, cfg.to_json().unwrap()).unwrap();
    if let Err(e) = mega(&["attribute", "--config", path_str(&cfg_path), "--baseline", "ike"]) {
        return Fail(format!("attribute failed: {e}"));
    }
    let (_, rows) = csv_rows(&cfg.output.dir.join(DELTA_CSV));

    let engine = cfg.engine().unwrap();
    let cases = load_jsonl(&cfg.dataset.path).unwrap();
    let mut worst = 0.0f64;
    for c in &cases {
        let ids = engine.encode_prompt(&c.prompt).unwrap();
        let pos = ids.len() - 1;
        let trace = engine.model.forward_trace(&ids, pos).unwrap();
        let y = engine.tokenizer.answer_token(&c.target_new).unwrap();
        let p = contribution_profile(&engine.model, &ids, pos, y, TokenRole::TargetNew).unwrap();
        let expected = engine.model.logprob_from_state(&trace.lout[11], y).unwrap()
            - engine.model.logprob_from_state(&trace.lin[0], y).unwrap();
        worst = worst.max((p.total() - expected).abs());
    }

    let (_, mean) = csv_rows(&cfg.output.dir.join(MEAN_SUCCESSFUL_CSV));
    let positive_layers: Vec<usize> = mean
        .iter()
        .filter(|r| r[1] == "attn" && r[2] == "target_new")
        .filter_map(|r| {
            let layer: usize = r[0].parse().ok()?;
            let delta: f64 = r[5].parse().ok()?;
            (layer >= 6 && delta > 0.0).then_some(layer)
        })
        .collect();
    check(
        rows.len() == 5 * 12 * 2 * 2 && worst <= 1e-3 && !positive_layers.is_empty(),
        format!(
            "{} delta rows; telescoping gap {worst:.2e} (tol 1e-3); mid-to-late attention layers with positive mean delta: {positive_layers:?}",
            rows.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "telescoping attribution identity", budget: Duration::from_secs(10), run: telescoping },
        Criterion { id: 2, name: "transport closed form", budget: Duration::from_secs(5), run: transport },
        Criterion { id: 3, name: "identity neutrality and gate-off purity", budget: Duration::from_secs(30), run: neutrality },
        Criterion { id: 4, name: "classification rules", budget: Duration::from_secs(1), run: classification },
        Criterion { id: 5, name: "doubt templates", budget: Duration::from_secs(1), run: doubt_templates },
        Criterion { id: 6, name: "Avg aggregation", budget: Duration::from_secs(1), run: avg_aggregation },
        Criterion { id: 7, name: "synthetic end-to-end steering", budget: Duration::from_secs(120), run: end_to_end },
        Criterion { id: 8, name: "determinism across thread counts", budget: Duration::from_secs(120), run: determinism },
        Criterion { id: 9, name: "GPT-2 small smoke test", budget: Duration::from_secs(20 * 60), run: gpt2_smoke },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|_| Fail("panicked".into()));
        let elapsed = start.elapsed();
        let verdict = match verdict {
            Pass(d) if elapsed > c.budget => Fail(format!("{d}; over budget {:?}", c.budget)),
            v => v,
        };
        let (tag, detail) = match &verdict {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!(
            "{tag} [{}] {}: {detail} ({:.2}s, budget {}s)",
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
