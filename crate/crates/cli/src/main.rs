// SPDX-License-Identifier: MIT OR Apache-2.0

use std::process::ExitCode;

use clap::Parser;
use mega_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            print!("{}", summary.stdout);
            for f in &summary.files {
                eprintln!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(CliError::Partial(failures)) => {
            for (id, err) in &failures {
                eprintln!("case {id}: {err}");
            }
            eprintln!("error: {} case(s) failed; remaining outputs were written", failures.len());
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
