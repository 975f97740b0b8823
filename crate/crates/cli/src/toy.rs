// SPDX-License-Identifier: MIT OR Apache-2.0

//! `gen-toy`: seeded random byte-level model plus synthetic edit cases.
//!
//! The model is random apart from one planted copy layer (see
//! [`CopyHeadSection`]) that lets an in-context statement of a digit decide
//! the next token, which is the behavior an in-context edit relies on.
//! A candidate case is a numeric relation prompt about an invented subject
//! with a random digit target. It is kept when the base model answers
//! something else on the edit prompt while the in-context edit answers the
//! target on the prompt and on every paraphrase. Paraphrases prepend short
//! lead-ins; locality probes are digit-free strings whose expected answer
//! is the base model's own. The scope threshold is placed between the
//! largest edit-prompt distance and the smallest probe distance under
//! fitted policies and written back to the config.

use std::path::{Path, PathBuf};

use mega_core::attribution::ike_context_for;
use mega_core::evaluation::{write_jsonl, EditCase, LocalityProbe, RippleTests};
use mega_core::model::{Engine, Model, ModelConfig, ModelWeights, Tokenizer};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{middle_half, CopyHeadSection, RunConfig, TokenizerMode};
use crate::error::{CliError, CliResult};
use crate::output::{write_json, write_text};
use crate::steer::fit_case;

const RELATIONS: [&str; 8] = [
    "The jersey number of {} is",
    "{} lives in room",
    "The lucky number of {} is",
    "The office of {} is on floor",
    "{} finished the race in place",
    "The locker of {} has number",
    "{} was ranked number",
    "The grade of {} is",
];

const LEAD_INS: [&str; 12] = [
    "So ", "And ", "Yes, ", "Now ", "Ok, ", "Hm, ", "Oh, ", "Q: ", "A: ", "- ", "* ", "> ",
];

const WORDS: [&str; 12] = [
    "red", "green", "blue", "apple", "river", "stone", "cloud", "lamp", "wind", "salt", "moss", "iron",
];

/// Redraws allowed for a probe whose base answer is not printable.
const PROBE_DRAWS: usize = 20;

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "th", "qu",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "y"];

fn subject(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        s.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => s,
    }
}

/// Digit-free probe strings that share no structure with relation prompts.
fn probe(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..3) {
        0 => (0..rng.random_range(4..7))
            .map(|_| WORDS[rng.random_range(0..WORDS.len())])
            .collect::<Vec<_>>()
            .join(", "),
        1 => {
            let start = rng.random_range(0..20u32);
            (0..6)
                .map(|i| char::from(b'a' + ((start + i) % 26) as u8).to_string())
                .collect::<Vec<_>>()
                .join(", ")
        }
        _ => (0..rng.random_range(10..16))
            .map(|_| char::from(b"#*+=-~|/"[rng.random_range(0..8)]))
            .collect(),
    }
}

/// Random unit vector, uniform direction up to the cube's anisotropy.
fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Overwrite attention layer `layer` with the digit-copy circuit.
pub fn plant_copy_head(
    weights: &mut ModelWeights,
    config: &ModelConfig,
    head: &CopyHeadSection,
    layer: usize,
    rng: &mut ChaCha8Rng,
) -> CliResult<()> {
    let d = config.d_model;
    let dh = d / config.n_heads;
    if layer >= config.n_layers {
        return Err(CliError::Config(format!(
            "copy head layer {layer} outside 0..{}",
            config.n_layers
        )));
    }
    let marker = unit_vector(rng, d);
    let probe_dir = unit_vector(rng, dh);
    for t in b'0'..=b'9' {
        let row = &mut weights.token_embedding[t as usize * d..(t as usize + 1) * d];
        for (x, m) in row.iter_mut().zip(&marker) {
            *x += head.digit_boost * m;
        }
    }
    let block = &mut weights.blocks[layer];
    block.qkv.weight.iter_mut().for_each(|x| *x = 0.0);
    block.qkv.bias.iter_mut().for_each(|x| *x = 0.0);
    // Rows are [q; k; v], each d wide, stored [out, in].
    for h in 0..config.n_heads {
        for j in 0..dh {
            block.qkv.bias[h * dh + j] = probe_dir[j];
            let row = (d + h * dh + j) * d;
            for i in 0..d {
                block.qkv.weight[row + i] = head.key_gain * probe_dir[j] * marker[i];
            }
        }
    }
    for i in 0..d {
        block.qkv.weight[(2 * d + i) * d + i] = 1.0;
    }
    block.attn_out.weight.iter_mut().for_each(|x| *x = 0.0);
    block.attn_out.bias.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..d {
        block.attn_out.weight[i * d + i] = head.copy_gain;
    }
    Ok(())
}

/// Seeded random weights with rescaled embeddings and the planted head.
pub fn toy_weights(cfg: &RunConfig) -> CliResult<ModelWeights> {
    let model = &cfg.model.config;
    let toy = &cfg.toy;
    let mut weights = ModelWeights::random(model, toy.seed, toy.init_scale)?;
    for x in &mut weights.token_embedding {
        *x *= toy.embedding_scale;
    }
    for x in &mut weights.position_embedding {
        *x *= toy.position_scale;
    }
    let layer = toy.copy_head.layer.unwrap_or(cfg.steering.window[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(toy.seed);
    rng.set_stream(1);
    plant_copy_head(&mut weights, model, &toy.copy_head, layer, &mut rng)?;
    Ok(weights)
}

fn first_byte(engine: &Engine, prompt: &str) -> CliResult<u8> {
    let ids = engine.encode_prompt(prompt)?;
    Ok(engine.model.greedy_decode(&ids, 1, None)?[0] as u8)
}

fn ike_byte(engine: &Engine, case: &EditCase, prompt: &str) -> CliResult<u8> {
    first_byte(engine, &ike_context_for(&[], case, prompt)?)
}

fn candidate(engine: &Engine, cfg: &RunConfig, rng: &mut ChaCha8Rng, id: usize) -> CliResult<Option<EditCase>> {
    let subj = subject(rng);
    let prompt = RELATIONS[rng.random_range(0..RELATIONS.len())].replace("{}", &subj);
    let mut lead_ins = LEAD_INS.to_vec();
    lead_ins.shuffle(rng);
    let paraphrase_prompts: Vec<String> = lead_ins
        .iter()
        .take(cfg.toy.n_paraphrases)
        .map(|f| format!("{f}{prompt}"))
        .collect();
    let target = b'0' + rng.random_range(0..10u8);
    let base_answer = first_byte(engine, &prompt)?;
    if !base_answer.is_ascii_graphic() || base_answer == target {
        return Ok(None);
    }
    let case = EditCase {
        case_id: format!("toy-{id:03}"),
        prompt,
        subject: subj,
        ground_truth: char::from(base_answer).to_string(),
        target_new: char::from(target).to_string(),
        paraphrase_prompts,
        locality_probes: Vec::new(),
        ripple_tests: RippleTests::default(),
        implication_prompts: Vec::new(),
    };
    for p in std::iter::once(&case.prompt).chain(&case.paraphrase_prompts) {
        if ike_byte(engine, &case, p)? != target {
            return Ok(None);
        }
    }
    let mut locality_probes = Vec::new();
    for _ in 0..cfg.toy.n_probes {
        for _ in 0..PROBE_DRAWS {
            let p = probe(rng);
            let b = first_byte(engine, &p)?;
            if b.is_ascii_graphic() {
                locality_probes.push(LocalityProbe {
                    prompt: p,
                    answer: char::from(b).to_string(),
                });
                break;
            }
        }
    }
    if locality_probes.len() < cfg.toy.n_probes {
        return Ok(None);
    }
    Ok(Some(EditCase {
        locality_probes,
        ..case
    }))
}

/// Distances that place a case relative to the scope threshold.
#[derive(Debug, Clone, Serialize)]
pub struct CaseSeparation {
    pub case_id: String,
    /// Largest distance among the edit prompt and its paraphrases.
    pub max_edit_distance: f64,
    /// Smallest distance among the locality probes.
    pub min_probe_distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToySummary {
    pub weights_path: PathBuf,
    pub dataset_path: PathBuf,
    pub n_cases: usize,
    pub attempts: usize,
    pub tau: f64,
    pub window: [usize; 2],
    pub separations: Vec<CaseSeparation>,
}

fn separation(engine: &Engine, case: &EditCase, cfg: &RunConfig) -> CliResult<CaseSeparation> {
    let mut steering = cfg.steering.clone();
    steering.tau = f64::MAX / 4.0;
    let (_, entry) = fit_case(engine, case, &steering)?;
    let max_edit_distance = std::iter::once(&entry.edit_prompt)
        .chain(&entry.paraphrases)
        .map(|s| s.distance)
        .fold(0.0, f64::max);
    let min_probe_distance = entry
        .locality_probes
        .iter()
        .map(|s| s.distance)
        .fold(f64::INFINITY, f64::min);
    Ok(CaseSeparation {
        case_id: case.case_id.clone(),
        max_edit_distance,
        min_probe_distance,
    })
}

/// Generate the toy model and dataset described by the config at `path`,
/// creating the config with defaults when absent. The calibrated window and
/// threshold are written back to the config file.
pub fn run_gen_toy(path: &Path) -> CliResult<ToySummary> {
    let mut raw = if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::from_json(&text)?
    } else {
        RunConfig::toy_default()
    };
    if raw.model.tokenizer.mode != TokenizerMode::Byte {
        return Err(CliError::Config("gen-toy needs the byte tokenizer".into()));
    }
    raw.steering.window = middle_half(raw.model.config.n_layers);
    let mut cfg = raw.clone();
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.validate()?;

    let weights = toy_weights(&cfg)?;
    if let Some(parent) = cfg.model.weights_path.parent() {
        crate::output::ensure_dir(parent)?;
    }
    weights.save_safetensors(&cfg.model.config, &cfg.model.weights_path)?;
    let engine = Engine::new(Model::new(cfg.model.config.clone(), weights)?, Tokenizer::Byte)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.toy.seed);
    let mut cases = Vec::new();
    let mut separations = Vec::new();
    let mut attempts = 0;
    while cases.len() < cfg.toy.n_cases {
        if attempts >= cfg.toy.max_attempts {
            return Err(CliError::Usage(format!(
                "gen-toy found only {} of {} cases in {attempts} attempts",
                cases.len(),
                cfg.toy.n_cases
            )));
        }
        attempts += 1;
        let Some(case) = candidate(&engine, &cfg, &mut rng, cases.len())? else {
            continue;
        };
        let sep = separation(&engine, &case, &cfg)?;
        if sep.max_edit_distance < sep.min_probe_distance {
            cases.push(case);
            separations.push(sep);
        }
    }

    let inner = separations.iter().map(|s| s.max_edit_distance).fold(0.0, f64::max);
    let outer = separations
        .iter()
        .map(|s| s.min_probe_distance)
        .fold(f64::INFINITY, f64::min);
    // Midpoint when one threshold separates every case; otherwise keep all
    // edit prompts in scope and let probes that fall inside be reported.
    let tau = if inner < outer { 0.5 * (inner + outer) } else { inner };
    raw.steering.tau = tau;
    write_text(path, &format!("{}\n", raw.to_json()?))?;
    if let Some(parent) = cfg.dataset.path.parent() {
        crate::output::ensure_dir(parent)?;
    }
    write_jsonl(&cfg.dataset.path, &cases)?;

    let summary = ToySummary {
        weights_path: cfg.model.weights_path.clone(),
        dataset_path: cfg.dataset.path.clone(),
        n_cases: cases.len(),
        attempts,
        tau,
        window: raw.steering.window,
        separations,
    };
    write_json(&cfg.output.dir.join("gen_toy_summary.json"), &summary)?;
    Ok(summary)
}
