//! Worker process of the built-in fuzzing engine.
//!
//! Usage: `dgf-engine <config.json>`. The custom mutator, if any, is named by
//! `AFL_CUSTOM_MUTATOR_LIBRARY`.

use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let Some(config) = std::env::args_os().nth(1).map(PathBuf::from) else {
        eprintln!("usage: dgf-engine <config.json>");
        return ExitCode::from(64);
    };
    match dgf_core::engine::worker_main(&config) {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dgf-engine: {e}");
            ExitCode::FAILURE
        }
    }
}
