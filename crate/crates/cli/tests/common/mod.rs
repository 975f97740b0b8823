// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use clap::Parser;
use mega_cli::{run, Cli, CliResult, RunConfig, RunSummary};

/// Parse and run `mega` with the given arguments (program name implied).
pub fn mega(args: &[&str]) -> CliResult<RunSummary> {
    let argv = std::iter::once("mega").chain(args.iter().copied());
    run(Cli::try_parse_from(argv).expect("valid arguments"))
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Generate the default toy setup in `dir`; returns the config path.
pub fn gen_toy(dir: &Path) -> PathBuf {
    let cfg = dir.join("run.json");
    mega(&["gen-toy", "--config", path_str(&cfg)]).expect("gen-toy");
    cfg
}

/// Copy of the config at `src` with absolute paths, edited by `f`, saved
/// to `dst`.
pub fn derive_config(src: &Path, dst: &Path, f: impl FnOnce(&mut RunConfig)) -> PathBuf {
    let mut cfg = RunConfig::load(src).expect("load config");
    f(&mut cfg);
    std::fs::write(dst, cfg.to_json().expect("serialize")).expect("write config");
    dst.to_path_buf()
}

/// Config at `src` redirected to a fresh output directory `out`.
pub fn with_output(src: &Path, dst: &Path, out: &Path) -> PathBuf {
    derive_config(src, dst, |c| c.output.dir = out.to_path_buf())
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Data rows of a CSV file as string records.
pub fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).expect("open csv");
    let header = r.headers().expect("header").iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.expect("record").iter().map(String::from).collect())
        .collect();
    (header, rows)
}

/// Sorted file names in `dir`.
pub fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .expect("read dir")
        .map(|e| e.expect("entry").file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}
