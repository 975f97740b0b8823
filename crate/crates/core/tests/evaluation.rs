// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;

use common::toy_engine;
use mega_core::evaluation::{
    aggregate_report, answer_match, eval_counterfact, eval_ripple, make_doubt_prompts, parse_jsonl,
    render_table, select_balanced_ripple, BaseSystem, CaseScores, EditCase, EditSystem,
    LocalityProbe, Metric, MetricSet, RippleTest, RippleTests, SteeredSystem,
};
use mega_core::model::{Engine, Model, ModelConfig, ModelWeights, Tokenizer};
use mega_core::steering::{fit_policy, SteerComponent, SteeringConfig};

fn fixture_case() -> EditCase {
    EditCase {
        case_id: "fixture".into(),
        prompt: "The capital of X is".into(),
        subject: "X".into(),
        ground_truth: "A".into(),
        target_new: "B".into(),
        paraphrase_prompts: vec![],
        locality_probes: vec![],
        ripple_tests: RippleTests::default(),
        implication_prompts: vec![],
    }
}

#[test]
fn doubt_prompts_match_golden_files() {
    let (di, dii) = make_doubt_prompts(&fixture_case()).unwrap();
    assert_eq!(di, include_str!("fixtures/doubt_di.txt"));
    assert_eq!(dii, include_str!("fixtures/doubt_dii.txt"));
    assert_eq!(di.matches(", B ").count(), 1);
    assert_eq!(dii.matches(", B?").count(), 1);
}

fn forced_engine(token: u8) -> Engine {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 256,
        max_positions: 64,
        ln_eps: 1e-5,
    };
    let d = cfg.d_model;
    let mut w = ModelWeights::random(&cfg, 1, 0.2).unwrap();
    w.ln_f.gamma = vec![0.0; d];
    w.ln_f.beta = vec![1.0; d];
    let mut head = vec![0.0; 256 * d];
    let t = usize::from(token);
    head[t * d..(t + 1) * d].iter_mut().for_each(|v| *v = 1.0);
    w.lm_head = Some(head);
    Engine::new(Model::new(cfg, w).unwrap(), Tokenizer::Byte).unwrap()
}

#[test]
fn forced_head_matches_only_its_token() {
    let engine = forced_engine(b'X');
    let base = BaseSystem { engine: &engine };
    assert_eq!(base.complete("anything", 3).unwrap(), "XXX");
    assert!(answer_match(&base, "anything", "X", 8).unwrap());
    assert!(answer_match(&base, "anything", "xx", 8).unwrap());
    assert!(!answer_match(&base, "anything", "Y", 8).unwrap());
}

/// Brute-force mean oracle over hand-set booleans.
#[test]
fn aggregation_matches_hand_means() {
    let rows: [[Option<f64>; 5]; 3] = [
        [Some(1.0), Some(0.5), Some(1.0), Some(0.0), Some(1.0)],
        [Some(0.0), None, Some(1.0), Some(1.0), Some(1.0)],
        [Some(1.0), Some(1.0), None, Some(0.0), Some(0.0)],
    ];
    let metrics = MetricSet::Counterfact.metrics();
    let cases: Vec<CaseScores> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| CaseScores {
            case_id: i.to_string(),
            scores: metrics
                .iter()
                .zip(r)
                .filter_map(|(m, v)| v.map(|v| (*m, v)))
                .collect(),
        })
        .collect();
    let report = aggregate_report(&cases, MetricSet::Counterfact, None).unwrap();
    let expect = [2.0 / 3.0, 0.75, 1.0, 1.0 / 3.0, 2.0 / 3.0];
    for (m, e) in metrics.iter().zip(expect) {
        assert!((report.scores[m] - e).abs() < 1e-12, "{m:?}");
    }
    assert!((report.avg - expect.iter().sum::<f64>() / 5.0).abs() < 1e-12);
    assert_eq!(report.counts[&Metric::Gen], 2);
    // Order of cases does not matter.
    let mut rev = cases.clone();
    rev.reverse();
    assert_eq!(aggregate_report(&rev, MetricSet::Counterfact, None).unwrap(), report);
}

#[test]
fn headline_row_average() {
    let scores: BTreeMap<Metric, f64> = MetricSet::Counterfact
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
    assert!((report.avg - 0.958).abs() < 1e-9);
    assert_eq!(format!("{:.2}", report.avg), "0.96");
    let table = render_table(MetricSet::Counterfact, &[("MEGA".into(), &report)]);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["System", "Acc", "Gen", "Spec", "DI", "DII", "Avg"]);
}

fn toy_case() -> EditCase {
    EditCase {
        case_id: "t".into(),
        prompt: "The capital of Qarn is".into(),
        subject: "Qarn".into(),
        ground_truth: "Lome".into(),
        target_new: "Vask".into(),
        paraphrase_prompts: vec!["Qarn has its capital in".into(), "Qarn's capital is".into()],
        locality_probes: vec![
            LocalityProbe {
                prompt: "Water boils at".into(),
                answer: "100".into(),
            },
            LocalityProbe {
                prompt: "1 2 3 4 5 6 7".into(),
                answer: "8".into(),
            },
        ],
        ripple_tests: RippleTests {
            rs: vec![RippleTest {
                prompt: "The language of Qarn is".into(),
                answers: vec!["Qarnish".into()],
            }],
            ..RippleTests::default()
        },
        implication_prompts: vec![],
    }
}

#[test]
fn base_system_agrees_with_itself_on_locality() {
    let engine = toy_engine(3);
    let base = BaseSystem { engine: &engine };
    let s = eval_counterfact(&base, &base, &toy_case(), 8).unwrap();
    assert_eq!(s.scores[&Metric::Spec], 1.0);
    let r = eval_ripple(&base, &base, &toy_case(), 8).unwrap();
    assert_eq!(r.scores[&Metric::RS], 1.0);
    assert!(!r.scores.contains_key(&Metric::CI));
}

#[test]
fn out_of_scope_probes_keep_full_specificity() {
    let engine = toy_engine(3);
    let cfg = SteeringConfig {
        window: [1, 2],
        component: SteerComponent::AttnRes,
        k: 8,
        tau: 0.0,
        ..SteeringConfig::default()
    };
    let policy = fit_policy(&engine, &toy_case(), &cfg).unwrap();
    let base = BaseSystem { engine: &engine };
    let steered = SteeredSystem {
        engine: &engine,
        policy: &policy,
    };
    let s = eval_counterfact(&steered, &base, &toy_case(), 8).unwrap();
    assert_eq!(s.scores[&Metric::Spec], 1.0);
    assert_eq!(eval_ripple(&steered, &base, &toy_case(), 8).unwrap().scores[&Metric::RS], 1.0);
}

#[test]
fn balanced_ripple_subset_counts() {
    let mk = |i: usize, ci: bool, cii: bool| {
        let t = || {
            vec![RippleTest {
                prompt: "q".into(),
                answers: vec!["a".into()],
            }]
        };
        format!(
            "{}\n",
            serde_json::to_string(&EditCase {
                case_id: i.to_string(),
                ripple_tests: RippleTests {
                    ci: if ci { t() } else { vec![] },
                    cii: if cii { t() } else { vec![] },
                    ..RippleTests::default()
                },
                ..fixture_case()
            })
            .unwrap()
        )
    };
    let mut text = String::new();
    for i in 0..200 {
        text.push_str(&mk(i, i % 3 != 1, i % 3 != 0));
    }
    let cases = parse_jsonl(&text).unwrap();
    let subset = select_balanced_ripple(&cases, 26, 47, 47);
    assert_eq!(subset.len(), 120);
    let ci = subset.iter().filter(|c| !c.ripple_tests.ci.is_empty()).count();
    let cii = subset.iter().filter(|c| !c.ripple_tests.cii.is_empty()).count();
    assert_eq!((ci, cii), (73, 73));
}
