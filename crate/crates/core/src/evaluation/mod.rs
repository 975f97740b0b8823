// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edit evaluation: answer matching, per-case metrics and report aggregation.
//!
//! A system under test is anything that greedily completes a prompt
//! ([`EditSystem`]). Locality metrics (`Spec`, `RS`) compare the system's
//! answer with the unmodified model's answer on the same prompt, so an
//! untouched system scores exactly 1 on them.

mod dataset;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attribution::ike_context_for;
use crate::error::{MegaError, Result};
use crate::model::Engine;
use crate::steering::{steered_decode, SteerComponent, SteeringPolicy};

pub use dataset::{
    convert_counterfact, convert_counterfact_record, load_jsonl, parse_jsonl, select,
    select_balanced_ripple, write_jsonl, EditCase, LocalityProbe, RippleTest, RippleTests,
    Sampling,
};

/// Greedy tokens decoded for every answer check.
pub const DEFAULT_MAX_NEW: usize = 8;

/// Something that answers prompts by greedy decoding.
pub trait EditSystem: Sync {
    fn complete(&self, prompt: &str, max_new: usize) -> Result<String>;
}

/// The unmodified model.
pub struct BaseSystem<'a> {
    pub engine: &'a Engine,
}

impl EditSystem for BaseSystem<'_> {
    fn complete(&self, prompt: &str, max_new: usize) -> Result<String> {
        self.engine.complete(prompt, max_new, None)
    }
}

/// The model under a single-edit steering policy. Scope is decided once per
/// prompt.
pub struct SteeredSystem<'a> {
    pub engine: &'a Engine,
    pub policy: &'a SteeringPolicy,
}

impl EditSystem for SteeredSystem<'_> {
    fn complete(&self, prompt: &str, max_new: usize) -> Result<String> {
        let ids = self.engine.encode_prompt(prompt)?;
        let (out, _) = steered_decode(&self.engine.model, self.policy, &ids, max_new)?;
        self.engine.tokenizer.decode(&out)
    }
}

/// In-context editing: every prompt is wrapped in the edit prefix.
pub struct IkeSystem<'a> {
    pub engine: &'a Engine,
    pub case: &'a EditCase,
    pub demos: &'a [(String, String)],
}

impl EditSystem for IkeSystem<'_> {
    fn complete(&self, prompt: &str, max_new: usize) -> Result<String> {
        let wrapped = ike_context_for(self.demos, self.case, prompt)?;
        self.engine.complete(&wrapped, max_new, None)
    }
}

/// Trim, lowercase and collapse internal whitespace runs to one space.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether the normalized completion starts with the normalized answer.
pub fn matches_answer(completion: &str, expected: &str) -> bool {
    normalize(completion).starts_with(&normalize(expected))
}

/// Greedy-decode `max_new` tokens and prefix-match against `expected`.
pub fn answer_match(
    system: &dyn EditSystem,
    prompt: &str,
    expected: &str,
    max_new: usize,
) -> Result<bool> {
    if normalize(expected).is_empty() {
        return Err(MegaError::Input("expected answer is empty".into()));
    }
    Ok(matches_answer(&system.complete(prompt, max_new)?, expected))
}

/// The two doubt-raising prompts for a case: one that rejects the new answer
/// outright and one that asserts the old fact and asks again.
pub fn make_doubt_prompts(case: &EditCase) -> Result<(String, String)> {
    let (p, o, o_new) = (&case.prompt, &case.ground_truth, &case.target_new);
    if p.is_empty() || o_new.is_empty() || o.is_empty() {
        return Err(MegaError::malformed(
            &case.case_id,
            "doubt prompts need prompt, ground_truth and target_new",
        ));
    }
    let di = format!(
        "{p}, {o_new} ??? No, it can't be, this contradicts my understanding. \
         It is pretty clear that the answer to {p} is something else. \
         Rethink and give the correct answer:"
    );
    let dii = format!(
        "{p}, {o_new}? Really? But I am pretty sure that {p} {o}. Am I right? \
         Yes, you are right. I apologize for any confusion. \
         Reconsider that the answer to {p} should be:"
    );
    Ok((di, dii))
}

/// Named metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Acc,
    Gen,
    Spec,
    DI,
    DII,
    CI,
    CII,
    RS,
    SA,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Acc => "Acc",
            Metric::Gen => "Gen",
            Metric::Spec => "Spec",
            Metric::DI => "DI",
            Metric::DII => "DII",
            Metric::CI => "CI",
            Metric::CII => "CII",
            Metric::RS => "RS",
            Metric::SA => "SA",
        }
    }
}

/// Which table a report belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSet {
    Counterfact,
    Ripple,
}

impl MetricSet {
    pub fn metrics(self) -> &'static [Metric] {
        match self {
            MetricSet::Counterfact => &[Metric::Acc, Metric::Gen, Metric::Spec, Metric::DI, Metric::DII],
            MetricSet::Ripple => &[Metric::Acc, Metric::CI, Metric::CII, Metric::RS, Metric::SA],
        }
    }

    /// Ripple when any case carries ripple tests, else CounterFact.
    pub fn detect(cases: &[EditCase]) -> Self {
        if cases.iter().any(|c| !c.ripple_tests.is_empty()) {
            MetricSet::Ripple
        } else {
            MetricSet::Counterfact
        }
    }
}

/// Per-case metric fractions; a metric with no attempts is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    pub scores: BTreeMap<Metric, f64>,
}

fn fraction<T>(
    items: &[T],
    mut hit: impl FnMut(&T) -> Result<bool>,
) -> Result<Option<f64>> {
    if items.is_empty() {
        return Ok(None);
    }
    let mut n = 0usize;
    for item in items {
        if hit(item)? {
            n += 1;
        }
    }
    Ok(Some(n as f64 / items.len() as f64))
}

fn bool_score(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn agrees_with_base(
    system: &dyn EditSystem,
    base: &dyn EditSystem,
    prompt: &str,
    max_new: usize,
) -> Result<bool> {
    Ok(normalize(&system.complete(prompt, max_new)?) == normalize(&base.complete(prompt, max_new)?))
}

/// Acc, Gen, Spec, DI and DII for one case.
pub fn eval_counterfact(
    system: &dyn EditSystem,
    base: &dyn EditSystem,
    case: &EditCase,
    max_new: usize,
) -> Result<CaseScores> {
    case.validate()?;
    let target = &case.target_new;
    let mut scores = BTreeMap::new();
    scores.insert(
        Metric::Acc,
        bool_score(answer_match(system, &case.prompt, target, max_new)?),
    );
    if let Some(v) = fraction(&case.paraphrase_prompts, |p| {
        answer_match(system, p, target, max_new)
    })? {
        scores.insert(Metric::Gen, v);
    }
    if let Some(v) = fraction(&case.locality_probes, |probe| {
        agrees_with_base(system, base, &probe.prompt, max_new)
    })? {
        scores.insert(Metric::Spec, v);
    }
    let (di, dii) = make_doubt_prompts(case)?;
    scores.insert(Metric::DI, bool_score(answer_match(system, &di, target, max_new)?));
    scores.insert(Metric::DII, bool_score(answer_match(system, &dii, target, max_new)?));
    Ok(CaseScores {
        case_id: case.case_id.clone(),
        scores,
    })
}

fn any_answer(system: &dyn EditSystem, test: &RippleTest, max_new: usize) -> Result<bool> {
    let out = system.complete(&test.prompt, max_new)?;
    Ok(test
        .answers
        .iter()
        .filter(|a| !normalize(a).is_empty())
        .any(|a| matches_answer(&out, a)))
}

/// Acc plus the ripple fractions CI, CII, RS and SA for one case.
pub fn eval_ripple(
    system: &dyn EditSystem,
    base: &dyn EditSystem,
    case: &EditCase,
    max_new: usize,
) -> Result<CaseScores> {
    case.validate()?;
    let rt = &case.ripple_tests;
    if rt.is_empty() {
        return Err(MegaError::malformed(&case.case_id, "no ripple tests"));
    }
    let mut scores = BTreeMap::new();
    scores.insert(
        Metric::Acc,
        bool_score(answer_match(system, &case.prompt, &case.target_new, max_new)?),
    );
    for (metric, tests) in [(Metric::CI, &rt.ci), (Metric::CII, &rt.cii), (Metric::SA, &rt.sa)] {
        if let Some(v) = fraction(tests, |t| any_answer(system, t, max_new))? {
            scores.insert(metric, v);
        }
    }
    if let Some(v) = fraction(&rt.rs, |t| agrees_with_base(system, base, &t.prompt, max_new))? {
        scores.insert(Metric::RS, v);
    }
    Ok(CaseScores {
        case_id: case.case_id.clone(),
        scores,
    })
}

/// Steering settings echoed into a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDescriptor {
    pub system: String,
    pub window: Option<[usize; 2]>,
    pub component: Option<SteerComponent>,
    pub k: Option<usize>,
}

/// Mean metric values over cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric_set: MetricSet,
    /// Mean over the cases where the metric is present; absent metrics are
    /// omitted.
    pub scores: BTreeMap<Metric, f64>,
    /// Number of cases contributing to each metric.
    pub counts: BTreeMap<Metric, usize>,
    /// Mean of the present metric scores.
    pub avg: f64,
    pub n_cases: usize,
    pub config: Option<ConfigDescriptor>,
}

/// Average per-case scores. Metrics outside `set` are ignored.
pub fn aggregate_report(
    cases: &[CaseScores],
    set: MetricSet,
    config: Option<ConfigDescriptor>,
) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(MegaError::Empty("no case scores to aggregate".into()));
    }
    let mut scores = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for metric in set.metrics() {
        let present: Vec<f64> = cases.iter().filter_map(|c| c.scores.get(metric).copied()).collect();
        if !present.is_empty() {
            scores.insert(*metric, present.iter().sum::<f64>() / present.len() as f64);
            counts.insert(*metric, present.len());
        }
    }
    let avg = average(&scores);
    Ok(MetricReport {
        metric_set: set,
        scores,
        counts,
        avg,
        n_cases: cases.len(),
        config,
    })
}

/// Arithmetic mean of the values, 0 when empty.
pub fn average(scores: &BTreeMap<Metric, f64>) -> f64 {
    if scores.is_empty() {
        0.0
    } else {
        scores.values().sum::<f64>() / scores.len() as f64
    }
}

/// Aligned text table, one row per labelled report, values rounded to two
/// decimals. Absent metrics print as `-`.
pub fn render_table(set: MetricSet, rows: &[(String, &MetricReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("System".len());
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "System");
    for m in set.metrics() {
        let _ = write!(out, "  {:>5}", m.as_str());
    }
    let _ = writeln!(out, "  {:>5}", "Avg");
    for (label, report) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for m in set.metrics() {
            match report.scores.get(m) {
                Some(v) => {
                    let _ = write!(out, "  {v:>5.2}");
                }
                None => {
                    let _ = write!(out, "  {:>5}", "-");
                }
            }
        }
        let _ = writeln!(out, "  {:>5.2}", report.avg);
    }
    out
}
