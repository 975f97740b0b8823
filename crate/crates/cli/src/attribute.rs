// SPDX-License-Identifier: MIT OR Apache-2.0

//! `attribute`: per-layer contribution deltas between a base and an edited
//! system, outcome classification and class-mean profiles.

use std::path::{Path, PathBuf};

use mega_core::attribution::{
    aggregate_deltas, build_ike_context, delta_profile, profile_from_trace, Classification,
    Component, DeltaProfile, EditOutcome, TokenRole,
};
use mega_core::evaluation::{answer_match, select, BaseSystem, EditCase, EditSystem, IkeSystem};
use mega_core::model::Engine;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{sig6, svgs_for_csv, write_csv, write_json};
use crate::Baseline;

pub const DELTA_CSV: &str = "attribution_deltas.csv";
pub const MEAN_SUCCESSFUL_CSV: &str = "mean_delta_successful.csv";
pub const MEAN_FAILED_CSV: &str = "mean_delta_failed.csv";
pub const SUMMARY_JSON: &str = "attribution_summary.json";

const DELTA_HEADER: [&str; 7] = [
    "case_id",
    "layer",
    "component",
    "token_role",
    "c_base",
    "c_edit",
    "delta",
];
const MEAN_HEADER: [&str; 7] = [
    "layer",
    "component",
    "token_role",
    "c_base",
    "c_edit",
    "delta",
    "n_cases",
];

/// The system whose contributions are compared against the base model.
pub enum EditedSource<'a> {
    /// Same prompt through a separately loaded edited model.
    Weights(&'a Engine),
    /// Base model on the in-context edit prompt, read at its last token.
    Ike(&'a [(String, String)]),
    /// The base model itself; every delta is zero.
    Base,
}

impl EditedSource<'_> {
    fn label(&self) -> &'static str {
        match self {
            EditedSource::Weights(_) => "edited_weights",
            EditedSource::Ike(_) => "ike",
            EditedSource::Base => "none",
        }
    }
}

/// Attribution result for one case.
pub struct CaseAttribution {
    pub outcome: EditOutcome,
    /// One profile per token role, in [`TokenRole::ALL`] order.
    pub deltas: Vec<DeltaProfile>,
}

fn binary(b: bool) -> f64 {
    if b { 1.0 } else { 0.0 }
}

pub fn attribute_case(
    base: &Engine,
    edited: &EditedSource<'_>,
    case: &EditCase,
    max_new: usize,
) -> CliResult<CaseAttribution> {
    case.validate()?;
    let base_ids = base.encode_prompt(&case.prompt)?;
    let base_trace = base.model.forward_trace(&base_ids, base_ids.len() - 1)?;
    let (edited_model, edited_trace) = match edited {
        EditedSource::Weights(e) => {
            let ids = e.encode_prompt(&case.prompt)?;
            (&e.model, e.model.forward_trace(&ids, ids.len() - 1)?)
        }
        EditedSource::Ike(demos) => {
            let ids = base.encode_prompt(&build_ike_context(demos, case)?)?;
            (&base.model, base.model.forward_trace(&ids, ids.len() - 1)?)
        }
        EditedSource::Base => (&base.model, base_trace.clone()),
    };

    let mut deltas = Vec::with_capacity(2);
    for role in TokenRole::ALL {
        let answer = match role {
            TokenRole::TargetNew => &case.target_new,
            TokenRole::GroundTruth => &case.ground_truth,
        };
        let y = base.tokenizer.answer_token(answer)?;
        let b = profile_from_trace(&base.model, &base_trace, y, role)?;
        let e = profile_from_trace(edited_model, &edited_trace, y, role)?;
        deltas.push(delta_profile(&b, &e)?);
    }

    let base_sys = BaseSystem { engine: base };
    let acc_pre = binary(answer_match(&base_sys, &case.prompt, &case.target_new, max_new)?);
    let acc_post = match edited {
        EditedSource::Weights(e) => {
            answer_match(&BaseSystem { engine: e }, &case.prompt, &case.target_new, max_new)?
        }
        EditedSource::Ike(demos) => {
            let sys = IkeSystem {
                engine: base,
                case,
                demos,
            };
            answer_match(&sys as &dyn EditSystem, &case.prompt, &case.target_new, max_new)?
        }
        EditedSource::Base => acc_pre == 1.0,
    };
    let outcome = EditOutcome::new(&case.case_id, acc_pre, binary(acc_post), acc_pre == 1.0);
    Ok(CaseAttribution { outcome, deltas })
}

fn delta_rows(case_id: &str, d: &DeltaProfile) -> Vec<Vec<String>> {
    let mut rows = Vec::with_capacity(d.n_layers() * 2);
    for layer in 0..d.n_layers() {
        for c in Component::ALL {
            rows.push(vec![
                case_id.to_string(),
                layer.to_string(),
                c.as_str().to_string(),
                d.role.as_str().to_string(),
                sig6(d.base_at(layer, c)),
                sig6(d.edited_at(layer, c)),
                sig6(d.get(layer, c)),
            ]);
        }
    }
    rows
}

/// Mean profiles of up to `cap` cases of one class, per token role.
fn mean_rows(
    results: &[&CaseAttribution],
    class: Classification,
    cfg: &RunConfig,
) -> CliResult<(Vec<Vec<String>>, usize)> {
    let members: Vec<&CaseAttribution> = results
        .iter()
        .copied()
        .filter(|r| r.outcome.classification == class)
        .collect();
    let chosen = select(
        &members,
        Some(cfg.attribution.max_per_class),
        cfg.dataset.sampling,
        cfg.dataset.seed,
    );
    let mut rows = Vec::new();
    if chosen.is_empty() {
        return Ok((rows, 0));
    }
    let all: Vec<DeltaProfile> = chosen.iter().flat_map(|r| r.deltas.iter().cloned()).collect();
    for role in TokenRole::ALL {
        let (mean, n) = aggregate_deltas(&all, Some(role))?;
        for layer in 0..mean.n_layers() {
            for c in Component::ALL {
                rows.push(vec![
                    layer.to_string(),
                    c.as_str().to_string(),
                    role.as_str().to_string(),
                    sig6(mean.base_at(layer, c)),
                    sig6(mean.edited_at(layer, c)),
                    sig6(mean.get(layer, c)),
                    n.to_string(),
                ]);
            }
        }
    }
    Ok((rows, chosen.len()))
}

#[derive(Serialize)]
struct ClassCounts {
    successful: usize,
    failed: usize,
    excluded: usize,
    errored: usize,
    successful_in_mean: usize,
    failed_in_mean: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    edited_system: &'a str,
    n_cases: usize,
    counts: ClassCounts,
    max_per_class: usize,
    success_rule: &'static str,
    /// Cases where the base already answers the ground truth are not
    /// filtered; only pre-correct cases (base already answers the target)
    /// are excluded.
    ground_truth_restriction: bool,
    outcomes: Vec<&'a EditOutcome>,
    errors: Vec<CaseErrorRecord<'a>>,
}

#[derive(Serialize)]
struct CaseErrorRecord<'a> {
    case_id: &'a str,
    error: &'a str,
}

/// Files written by [`run_attribute`].
pub struct AttributeOutputs {
    pub files: Vec<PathBuf>,
    pub failures: Vec<(String, String)>,
}

pub fn run_attribute(
    cfg: &RunConfig,
    cases: &[EditCase],
    edited_weights: Option<&Path>,
    baseline: Option<Baseline>,
    emit_svg: bool,
) -> CliResult<AttributeOutputs> {
    let base = cfg.engine()?;
    let edited_engine = edited_weights
        .map(|p| cfg.engine_with_weights(p))
        .transpose()?;
    let edited = match (&edited_engine, baseline) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--edited-weights and --baseline are mutually exclusive".into(),
            ))
        }
        (Some(e), None) => EditedSource::Weights(e),
        (None, Some(Baseline::None)) => EditedSource::Base,
        (None, _) => EditedSource::Ike(&cfg.attribution.ike_demos),
    };
    let max_new = cfg.evaluation.max_new;

    let results: Vec<(String, CliResult<CaseAttribution>)> = cases
        .par_iter()
        .map(|c| (c.case_id.clone(), attribute_case(&base, &edited, c, max_new)))
        .collect();

    let mut ok: Vec<&CaseAttribution> = Vec::new();
    let mut failures: Vec<(String, String)> = Vec::new();
    for (id, r) in &results {
        match r {
            Ok(a) => ok.push(a),
            Err(e) => failures.push((id.clone(), e.to_string())),
        }
    }

    let dir = &cfg.output.dir;
    let mut files = Vec::new();
    let rows: Vec<Vec<String>> = ok
        .iter()
        .flat_map(|a| a.deltas.iter().flat_map(|d| delta_rows(&a.outcome.case_id, d)))
        .collect();
    let path = dir.join(DELTA_CSV);
    write_csv(&path, &DELTA_HEADER, &rows)?;
    files.push(path);

    let (succ_rows, n_succ) = mean_rows(&ok, Classification::Successful, cfg)?;
    let (fail_rows, n_fail) = mean_rows(&ok, Classification::Failed, cfg)?;
    for (name, rows) in [(MEAN_SUCCESSFUL_CSV, &succ_rows), (MEAN_FAILED_CSV, &fail_rows)] {
        let path = dir.join(name);
        write_csv(&path, &MEAN_HEADER, rows)?;
        files.push(path);
    }

    let count = |c: Classification| {
        ok.iter()
            .filter(|a| a.outcome.classification == c)
            .count()
    };
    let summary = Summary {
        edited_system: edited.label(),
        n_cases: cases.len(),
        counts: ClassCounts {
            successful: count(Classification::Successful),
            failed: count(Classification::Failed),
            excluded: count(Classification::Excluded),
            errored: failures.len(),
            successful_in_mean: n_succ,
            failed_in_mean: n_fail,
        },
        max_per_class: cfg.attribution.max_per_class,
        success_rule: "acc_post > acc_pre and acc_post >= 0.9; pre-correct cases excluded",
        ground_truth_restriction: false,
        outcomes: ok.iter().map(|a| &a.outcome).collect(),
        errors: failures
            .iter()
            .map(|(id, e)| CaseErrorRecord {
                case_id: id,
                error: e,
            })
            .collect(),
    };
    let path = dir.join(SUMMARY_JSON);
    write_json(&path, &summary)?;
    files.push(path);

    if emit_svg {
        for name in [MEAN_SUCCESSFUL_CSV, MEAN_FAILED_CSV] {
            files.extend(svgs_for_csv(&dir.join(name), dir)?);
        }
    }
    Ok(AttributeOutputs { files, failures })
}
