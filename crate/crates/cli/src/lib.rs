// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line runner: attribution, policy fitting, evaluation, reporting
//! and synthetic toy generation, all driven by one JSON config.

pub mod attribute;
pub mod config;
pub mod error;
pub mod eval;
pub mod output;
pub mod steer;
pub mod toy;

use std::collections::HashSet;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mega_core::evaluation::{convert_counterfact, load_jsonl, select, write_jsonl, EditCase};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// The unmodified model.
    None,
    /// In-context editing prefix.
    Ike,
}

#[derive(Debug, Parser)]
#[command(name = "mega", version, about = "Residual attribution and scoped activation steering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Maximum number of cases.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Overrides the dataset and steering seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to MEGA_THREADS, then the config.
    #[arg(long, env = "MEGA_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contribution deltas between the base and an edited system.
    Attribute {
        #[command(flatten)]
        common: Common,
        /// Edited model weights; without it the in-context baseline is used.
        #[arg(long)]
        edited_weights: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Also render SVG bar charts of the mean profiles.
        #[arg(long)]
        emit_svg: bool,
    },
    /// Fit one steering policy per case.
    SteerFit {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate policies or a baseline and print the metric table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policies: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Render layer-profile SVGs from delta CSVs.
    Report {
        #[arg(long)]
        config: PathBuf,
        /// CSV files; defaults to the mean profiles in the output directory.
        csv: Vec<PathBuf>,
        #[arg(long)]
        emit_svg: bool,
    },
    /// Write a seeded toy model and synthetic edit cases.
    GenToy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert an EasyEdit CounterFact JSON file to the JSONL case format.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

/// What a successful command produced, for printing.
#[derive(Debug, Default)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub stdout: String,
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(limit) = common.limit {
        cfg.dataset.limit = Some(limit);
    }
    if let Some(seed) = common.seed {
        cfg.dataset.seed = seed;
        cfg.steering.seed = seed;
    }
    if let Some(t) = common.threads {
        cfg.threads = Some(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Dataset cases after sampling; case ids must be unique.
pub fn load_cases(cfg: &RunConfig) -> CliResult<Vec<EditCase>> {
    let all = load_jsonl(&cfg.dataset.path)?;
    let mut seen = HashSet::new();
    for c in &all {
        if !seen.insert(output::file_stem(&c.case_id)) {
            return Err(CliError::Config(format!("duplicate case_id {}", c.case_id)));
        }
    }
    Ok(select(&all, cfg.dataset.limit, cfg.dataset.sampling, cfg.dataset.seed))
}

fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> CliResult<T> + Send,
) -> CliResult<T> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(f),
        None => f(),
    }
}

fn partial(failures: Vec<(String, String)>, summary: RunSummary) -> CliResult<RunSummary> {
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(CliError::Partial(failures))
    }
}

/// Execute a parsed command.
pub fn run(cli: Cli) -> CliResult<RunSummary> {
    match cli.command {
        Command::Attribute {
            common,
            edited_weights,
            baseline,
            emit_svg,
        } => {
            let cfg = load_config(&common)?;
            with_threads(cfg.threads, || {
                let cases = load_cases(&cfg)?;
                let out = attribute::run_attribute(
                    &cfg,
                    &cases,
                    edited_weights.as_deref(),
                    baseline,
                    emit_svg || cfg.output.emit_svg,
                )?;
                partial(
                    out.failures,
                    RunSummary {
                        files: out.files,
                        stdout: String::new(),
                    },
                )
            })
        }
        Command::SteerFit { common } => {
            let cfg = load_config(&common)?;
            with_threads(cfg.threads, || {
                let cases = load_cases(&cfg)?;
                let out = steer::run_steer_fit(&cfg, &cases)?;
                let mut files: Vec<PathBuf> = out
                    .manifest
                    .policies
                    .iter()
                    .map(|p| out.dir.join(&p.file))
                    .collect();
                files.push(out.dir.join(steer::MANIFEST));
                partial(
                    out.manifest.failures.clone(),
                    RunSummary {
                        files,
                        stdout: String::new(),
                    },
                )
            })
        }
        Command::Eval {
            common,
            policies,
            baseline,
        } => {
            let cfg = load_config(&common)?;
            with_threads(cfg.threads, || {
                let cases = load_cases(&cfg)?;
                let out = eval::run_eval(&cfg, &cases, policies.as_deref(), baseline)?;
                partial(
                    out.failures,
                    RunSummary {
                        files: vec![
                            cfg.output.dir.join(eval::REPORT_JSON),
                            cfg.output.dir.join(eval::REPORT_TABLE),
                        ],
                        stdout: out.table,
                    },
                )
            })
        }
        Command::Report { config, csv, .. } => {
            let cfg = RunConfig::load(&config)?;
            let inputs = if csv.is_empty() {
                vec![
                    cfg.output.dir.join(attribute::MEAN_SUCCESSFUL_CSV),
                    cfg.output.dir.join(attribute::MEAN_FAILED_CSV),
                ]
            } else {
                csv
            };
            let mut files = Vec::new();
            for path in &inputs {
                files.extend(output::svgs_for_csv(path, &cfg.output.dir)?);
            }
            Ok(RunSummary {
                files,
                stdout: String::new(),
            })
        }
        Command::GenToy { config } => {
            let s = toy::run_gen_toy(&config)?;
            Ok(RunSummary {
                files: vec![s.weights_path.clone(), s.dataset_path.clone(), config],
                stdout: format!(
                    "generated {} cases in {} attempts; window {:?}, tau {}\n",
                    s.n_cases,
                    s.attempts,
                    s.window,
                    output::sig6(s.tau)
                ),
            })
        }
        Command::Convert { input, output } => {
            let text = std::fs::read_to_string(&input).map_err(|e| CliError::io(&input, e))?;
            let cases = convert_counterfact(&text)?;
            write_jsonl(&output, &cases)?;
            Ok(RunSummary {
                files: vec![output],
                stdout: format!("converted {} cases\n", cases.len()),
            })
        }
    }
}
