// SPDX-License-Identifier: MIT OR Apache-2.0

//! `eval`: metric report for the base model, the in-context baseline or
//! fitted steering policies.

use std::path::Path;

use mega_core::evaluation::{
    aggregate_report, eval_counterfact, eval_ripple, render_table, BaseSystem, CaseScores,
    ConfigDescriptor, EditCase, EditSystem, IkeSystem, MetricReport, MetricSet, SteeredSystem,
};
use mega_core::model::Engine;
use mega_core::steering::{load_policy, SteeringPolicy};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{file_stem, write_json, write_text};
use crate::Baseline;

pub const REPORT_JSON: &str = "eval_report.json";
pub const REPORT_TABLE: &str = "eval_table.txt";

/// System under evaluation.
pub enum SystemChoice<'a> {
    Base,
    Ike,
    Policies(&'a Path),
}

impl SystemChoice<'_> {
    fn label(&self) -> &'static str {
        match self {
            SystemChoice::Base => "base",
            SystemChoice::Ike => "ike",
            SystemChoice::Policies(_) => "mega",
        }
    }
}

pub fn eval_case(
    engine: &Engine,
    choice: &SystemChoice<'_>,
    set: MetricSet,
    case: &EditCase,
    cfg: &RunConfig,
) -> CliResult<CaseScores> {
    let base = BaseSystem { engine };
    let policy: Option<SteeringPolicy> = match choice {
        SystemChoice::Policies(dir) => {
            let p = load_policy(&dir.join(format!("{}.json", file_stem(&case.case_id))))?;
            p.check_model(&engine.model)?;
            Some(p)
        }
        _ => None,
    };
    let ike;
    let steered;
    let system: &dyn EditSystem = match choice {
        SystemChoice::Base => &base,
        SystemChoice::Ike => {
            ike = IkeSystem {
                engine,
                case,
                demos: &cfg.attribution.ike_demos,
            };
            &ike
        }
        SystemChoice::Policies(_) => {
            steered = SteeredSystem {
                engine,
                policy: policy.as_ref().expect("policy loaded"),
            };
            &steered
        }
    };
    let max_new = cfg.evaluation.max_new;
    Ok(match set {
        MetricSet::Counterfact => eval_counterfact(system, &base, case, max_new)?,
        MetricSet::Ripple => eval_ripple(system, &base, case, max_new)?,
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    report: &'a MetricReport,
    cases: &'a [CaseScores],
    failures: &'a [(String, String)],
}

pub struct EvalOutputs {
    pub report: MetricReport,
    pub cases: Vec<CaseScores>,
    pub table: String,
    pub failures: Vec<(String, String)>,
}

pub fn run_eval(
    cfg: &RunConfig,
    cases: &[EditCase],
    policies: Option<&Path>,
    baseline: Option<Baseline>,
) -> CliResult<EvalOutputs> {
    let choice = match (policies, baseline) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--policies and --baseline are mutually exclusive".into(),
            ))
        }
        (Some(dir), None) => SystemChoice::Policies(dir),
        (None, Some(Baseline::Ike)) => SystemChoice::Ike,
        (None, Some(Baseline::None)) => SystemChoice::Base,
        (None, None) => {
            return Err(CliError::Usage(
                "eval needs --policies DIR or --baseline {none,ike}".into(),
            ))
        }
    };
    let engine = cfg.engine()?;
    let set = MetricSet::detect(cases);
    let results: Vec<(String, CliResult<CaseScores>)> = cases
        .par_iter()
        .map(|c| (c.case_id.clone(), eval_case(&engine, &choice, set, c, cfg)))
        .collect();
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(s) => scores.push(s),
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    let descriptor = ConfigDescriptor {
        system: choice.label().to_string(),
        window: matches!(choice, SystemChoice::Policies(_)).then_some(cfg.steering.window),
        component: matches!(choice, SystemChoice::Policies(_)).then_some(cfg.steering.component),
        k: matches!(choice, SystemChoice::Policies(_)).then_some(cfg.steering.k),
    };
    let report = aggregate_report(&scores, set, Some(descriptor))?;
    let table = render_table(set, &[(choice.label().to_string(), &report)]);
    let dir = &cfg.output.dir;
    write_json(
        &dir.join(REPORT_JSON),
        &ReportFile {
            report: &report,
            cases: &scores,
            failures: &failures,
        },
    )?;
    write_text(&dir.join(REPORT_TABLE), &table)?;
    Ok(EvalOutputs {
        report,
        cases: scores,
        table,
        failures,
    })
}
