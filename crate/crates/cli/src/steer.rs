// SPDX-License-Identifier: MIT OR Apache-2.0

//! `steer-fit`: one steering policy per case plus a manifest of scope
//! distances.

use std::path::PathBuf;

use mega_core::evaluation::EditCase;
use mega_core::model::Engine;
use mega_core::steering::{fit_policy, in_scope, ScopeDecision, SteeringConfig, SteeringPolicy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::output::{file_stem, write_json, write_text};

pub const POLICY_DIR: &str = "policies";
pub const MANIFEST: &str = "manifest.json";

/// Scope verdict for one prompt under a fitted policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScope {
    pub prompt: String,
    pub distance: f64,
    pub in_scope: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    /// Policy file name relative to the manifest.
    pub file: String,
    pub tau: f64,
    pub k: usize,
    pub k_effective: usize,
    pub k_capped: bool,
    pub edit_prompt: PromptScope,
    pub paraphrases: Vec<PromptScope>,
    pub locality_probes: Vec<PromptScope>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub steering: SteeringConfig,
    pub policies: Vec<ManifestEntry>,
    pub failures: Vec<(String, String)>,
}

fn scope_of(engine: &Engine, policy: &SteeringPolicy, prompt: &str) -> CliResult<PromptScope> {
    let ScopeDecision { distance, in_scope } = in_scope(&policy.detector, engine, prompt)?;
    Ok(PromptScope {
        prompt: prompt.to_string(),
        distance,
        in_scope,
    })
}

/// Fit a policy and measure the scope of the case's own prompts.
pub fn fit_case(
    engine: &Engine,
    case: &EditCase,
    steering: &SteeringConfig,
) -> CliResult<(SteeringPolicy, ManifestEntry)> {
    let policy = fit_policy(engine, case, steering)?;
    let scopes = |prompts: &mut dyn Iterator<Item = &String>| -> CliResult<Vec<PromptScope>> {
        prompts.map(|p| scope_of(engine, &policy, p)).collect()
    };
    let entry = ManifestEntry {
        case_id: case.case_id.clone(),
        file: format!("{}.json", file_stem(&case.case_id)),
        tau: policy.detector.tau,
        k: policy.metadata.k,
        k_effective: policy.metadata.k_effective,
        k_capped: policy.metadata.k_effective < policy.metadata.k,
        edit_prompt: scope_of(engine, &policy, &case.prompt)?,
        paraphrases: scopes(&mut case.paraphrase_prompts.iter())?,
        locality_probes: scopes(&mut case.locality_probes.iter().map(|p| &p.prompt))?,
    };
    Ok((policy, entry))
}

pub struct SteerOutputs {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

pub fn run_steer_fit(cfg: &RunConfig, cases: &[EditCase]) -> CliResult<SteerOutputs> {
    let engine = cfg.engine()?;
    let results: Vec<(String, CliResult<(SteeringPolicy, ManifestEntry)>)> = cases
        .par_iter()
        .map(|c| (c.case_id.clone(), fit_case(&engine, c, &cfg.steering)))
        .collect();
    let dir = cfg.output.dir.join(POLICY_DIR);
    let mut policies = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok((policy, entry)) => {
                write_text(&dir.join(&entry.file), &policy.to_json()?)?;
                policies.push(entry);
            }
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    let manifest = Manifest {
        steering: cfg.steering.clone(),
        policies,
        failures,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(SteerOutputs { dir, manifest })
}
