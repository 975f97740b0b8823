// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edit-case records and the JSONL dataset format.
//!
//! One JSON object per line:
//!
//! ```json
//! {"case_id": "0", "prompt": "...", "subject": "...", "ground_truth": "...",
//!  "target_new": "...", "paraphrase_prompts": ["..."],
//!  "locality_probes": [{"prompt": "...", "answer": "..."}],
//!  "ripple_tests": {"ci": [{"prompt": "...", "answers": ["..."]}], "cii": [], "rs": [], "sa": []},
//!  "implication_prompts": ["..."]}
//! ```
//!
//! Missing list fields default to empty. `case_id` may be a string or an
//! integer.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{MegaError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityProbe {
    pub prompt: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RippleTest {
    pub prompt: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RippleTests {
    #[serde(default)]
    pub ci: Vec<RippleTest>,
    #[serde(default)]
    pub cii: Vec<RippleTest>,
    #[serde(default)]
    pub rs: Vec<RippleTest>,
    #[serde(default)]
    pub sa: Vec<RippleTest>,
}

impl RippleTests {
    pub fn is_empty(&self) -> bool {
        self.ci.is_empty() && self.cii.is_empty() && self.rs.is_empty() && self.sa.is_empty()
    }
}

/// One knowledge edit `(subject, relation, ground_truth) -> target_new` with
/// its evaluation prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCase {
    #[serde(deserialize_with = "id_string")]
    pub case_id: String,
    pub prompt: String,
    #[serde(default)]
    pub subject: String,
    pub ground_truth: String,
    pub target_new: String,
    #[serde(default)]
    pub paraphrase_prompts: Vec<String>,
    #[serde(default)]
    pub locality_probes: Vec<LocalityProbe>,
    #[serde(default)]
    pub ripple_tests: RippleTests,
    #[serde(default)]
    pub implication_prompts: Vec<String>,
}

fn id_string<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!(
            "case_id must be a string or number, got {other}"
        ))),
    }
}

impl EditCase {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(MegaError::malformed(&self.case_id, "empty prompt"));
        }
        if self.target_new.trim().is_empty() {
            return Err(MegaError::malformed(&self.case_id, "empty target_new"));
        }
        if self.target_new == self.ground_truth {
            return Err(MegaError::malformed(
                &self.case_id,
                "target_new equals ground_truth",
            ));
        }
        Ok(())
    }
}

/// Read a JSONL dataset, validating every case.
pub fn load_jsonl(path: &Path) -> Result<Vec<EditCase>> {
    let text = std::fs::read_to_string(path).map_err(|e| MegaError::io(path, e))?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<EditCase>> {
    let mut cases = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let case: EditCase = serde_json::from_str(line)?;
        case.validate()?;
        cases.push(case);
    }
    Ok(cases)
}

pub fn write_jsonl(path: &Path, cases: &[EditCase]) -> Result<()> {
    let mut out = Vec::new();
    for c in cases {
        serde_json::to_writer(&mut out, c)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| MegaError::io(path, e))?;
    f.write_all(&out).map_err(|e| MegaError::io(path, e))
}

/// How to pick a subset of cases.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Leading items in file order.
    #[default]
    FirstN,
    /// Seeded random subset, returned in file order.
    Random,
}

/// Pick up to `limit` items (all when `None`).
pub fn select<T: Clone>(items: &[T], limit: Option<usize>, sampling: Sampling, seed: u64) -> Vec<T> {
    let n = limit.unwrap_or(items.len()).min(items.len());
    match sampling {
        Sampling::FirstN => items[..n].to_vec(),
        Sampling::Random => {
            let mut idx: Vec<usize> = (0..items.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut chosen = idx[..n].to_vec();
            chosen.sort_unstable();
            chosen.into_iter().map(|i| items[i].clone()).collect()
        }
    }
}

/// Balanced ripple subset: `both` cases with CI and CII tests, then
/// `ci_only` and `cii_only` cases, each group in file order.
pub fn select_balanced_ripple(
    cases: &[EditCase],
    both: usize,
    ci_only: usize,
    cii_only: usize,
) -> Vec<EditCase> {
    let has = |c: &EditCase| (!c.ripple_tests.ci.is_empty(), !c.ripple_tests.cii.is_empty());
    let take = |want: (bool, bool), n: usize| {
        cases
            .iter()
            .filter(move |c| has(c) == want)
            .take(n)
            .cloned()
    };
    take((true, true), both)
        .chain(take((true, false), ci_only))
        .chain(take((false, true), cii_only))
        .collect()
}

// ---------------------------------------------------------------------------
// EasyEdit CounterFact conversion
// ---------------------------------------------------------------------------

/// Convert one EasyEdit CounterFact record.
///
/// | EasyEdit field                                  | EditCase field       |
/// |-------------------------------------------------|----------------------|
/// | `case_id` (else record index)                   | `case_id`            |
/// | `prompt` / `src`                                | `prompt`             |
/// | `subject`                                       | `subject`            |
/// | `ground_truth`                                  | `ground_truth`       |
/// | `target_new` / `alt`                            | `target_new`         |
/// | `rephrase_prompt` / `rephrase` (string or list) | `paraphrase_prompts` |
/// | `locality_prompt` + `locality_ground_truth`     | `locality_probes`    |
/// | `locality.*.{prompt, ground_truth}`             | `locality_probes`    |
///
/// Portability prompts are dropped.
pub fn convert_counterfact_record(record: &Value, index: usize) -> Result<EditCase> {
    let id = match record.get("case_id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => index.to_string(),
    };
    let text = |keys: &[&str]| -> Option<String> {
        keys.iter()
            .find_map(|k| record.get(*k))
            .and_then(first_string)
    };
    let required = |keys: &[&str]| -> Result<String> {
        text(keys).ok_or_else(|| MegaError::malformed(&id, format!("missing {}", keys[0])))
    };
    let mut locality_probes: Vec<LocalityProbe> = Vec::new();
    if let (Some(p), Some(a)) = (
        record.get("locality_prompt"),
        record.get("locality_ground_truth"),
    ) {
        for (prompt, answer) in strings(p).into_iter().zip(strings(a)) {
            locality_probes.push(LocalityProbe { prompt, answer });
        }
    }
    if let Some(Value::Object(groups)) = record.get("locality") {
        for group in groups.values() {
            let items = match group {
                Value::Array(a) => a.clone(),
                other => vec![other.clone()],
            };
            for item in items {
                let prompts = item.get("prompt").map(strings).unwrap_or_default();
                let answers = item.get("ground_truth").map(strings).unwrap_or_default();
                for (prompt, answer) in prompts.into_iter().zip(answers) {
                    locality_probes.push(LocalityProbe { prompt, answer });
                }
            }
        }
    }
    let case = EditCase {
        prompt: required(&["prompt", "src"])?,
        subject: text(&["subject"]).unwrap_or_default(),
        ground_truth: required(&["ground_truth"])?,
        target_new: required(&["target_new", "alt"])?,
        paraphrase_prompts: ["rephrase_prompt", "rephrase"]
            .iter()
            .find_map(|k| record.get(*k))
            .map(strings)
            .unwrap_or_default(),
        locality_probes,
        ripple_tests: RippleTests::default(),
        implication_prompts: Vec::new(),
        case_id: id,
    };
    case.validate()?;
    Ok(case)
}

/// Convert an EasyEdit CounterFact JSON array.
pub fn convert_counterfact(json: &str) -> Result<Vec<EditCase>> {
    let value: Value = serde_json::from_str(json)?;
    let records = value
        .as_array()
        .ok_or_else(|| MegaError::Input("CounterFact file must hold a JSON array".into()))?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| convert_counterfact_record(r, i))
        .collect()
}

fn first_string(v: &Value) -> Option<String> {
    strings(v).into_iter().next()
}

/// Flatten a string, a list of strings, or a list of lists of strings.
fn strings(v: &Value) -> Vec<String> {
    match v {
        Value::String(s) => vec![s.clone()],
        Value::Array(items) => items.iter().flat_map(strings).collect(),
        _ => Vec::new(),
    }
}
