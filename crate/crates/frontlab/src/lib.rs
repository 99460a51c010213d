//! Command-line driver: reads a JSON experiment config, runs it and writes
//! CSV/JSON artifacts into an output directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;

use std::fs;
use std::path::Path;

use config::{Config, Kind};
use run::ErrorRecord;

/// Exit status for a config that fails validation.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for a failed computation or a failed check.
pub const EXIT_FAILURE: i32 = 1;

pub const ERROR_FILE: &str = "error.json";

/// Runs one experiment end to end and returns the process exit status.
/// Messages go to stderr, the summary line to stdout.
pub fn execute(kind: Kind, config: &Path, out: &Path, seed: Option<u64>) -> i32 {
    let prepared = match Config::load(config).and_then(|c| c.prepare(kind, seed)) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = write_files(out, &[resolved(&prepared.config)]) {
        eprintln!("error: {e}");
        return EXIT_FAILURE;
    }
    let outcome = match run::run(kind, &prepared) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            let rec = ErrorRecord::from_error(&e);
            if let Err(io) = write_files(out, &[(ERROR_FILE.into(), rec.bytes())]) {
                eprintln!("error: {io}");
            }
            return EXIT_FAILURE;
        }
    };
    if let Err(e) = write_files(out, &outcome.artifacts) {
        eprintln!("error: {e}");
        return EXIT_FAILURE;
    }
    println!("{kind}: {}", outcome.summary);
    match outcome.failure {
        None => 0,
        Some(msg) => {
            eprintln!("error: {msg}");
            let rec = ErrorRecord {
                error: "check_failed",
                message: msg,
            };
            if let Err(io) = write_files(out, &[(ERROR_FILE.into(), rec.bytes())]) {
                eprintln!("error: {io}");
            }
            EXIT_FAILURE
        }
    }
}

fn resolved(c: &Config) -> run::Artifact {
    let mut bytes = serde_json::to_vec_pretty(c).expect("config serializes");
    bytes.push(b'\n');
    (c.outputs.resolved.clone(), bytes)
}

fn write_files(dir: &Path, files: &[run::Artifact]) -> Result<(), String> {
    let io = |e: std::io::Error, path: &Path| format!("cannot write {}: {e}", path.display());
    fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| io(e, &path))?;
    }
    Ok(())
}
