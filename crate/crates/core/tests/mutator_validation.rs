//! Mutator build and validation against the built-in engine worker, using
//! the reference mutator and the hand-written faulty mutators.

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dgf_core::engine::REQUIRED_SYMBOLS;
use dgf_core::mutatorgen::{
    compile_mutator, exported_symbols, validate_mutator, MutatorBuild, MutatorBuildConfig, MutatorError,
    ValidationReport, ValidationSetup, REFERENCE_MUTATOR,
};

fn required() -> BTreeSet<String> {
    REQUIRED_SYMBOLS.iter().map(|s| s.to_string()).collect()
}

fn build(source: &str, dir: &Path, required: &BTreeSet<String>) -> MutatorBuild {
    compile_mutator(source, &MutatorBuildConfig::default(), dir, required).unwrap()
}

fn built(source: &str, dir: &Path) -> PathBuf {
    match build(source, dir, &required()) {
        MutatorBuild::Built { object, .. } => object,
        MutatorBuild::Failed { log, .. } => panic!("build failed:\n{log}"),
    }
}

fn fixture_mutator(name: &str) -> String {
    std::fs::read_to_string(common::fixture("mutators").join(name)).unwrap()
}

fn validate(object: &Path, harness: &Path, work: &Path, baseline: bool) -> Result<ValidationReport, MutatorError> {
    let worker = common::worker();
    let seed = common::gate_record(4, 4);
    let setup = ValidationSetup {
        worker: &worker,
        harness_binary: harness,
        target: "handle_record",
        seed: &seed,
        sample_duration: 0.5,
        rng_seed: 3,
        work_dir: work,
        baseline,
    };
    validate_mutator(object, &setup)
}

#[test]
fn reference_mutator_is_stable_and_productive() {
    let dir = tempfile::tempdir().unwrap();
    let h = common::magic_gate(&dir.path().join("h"));
    let object = built(REFERENCE_MUTATOR, &dir.path().join("m"));
    assert!(required().is_subset(&exported_symbols(&object).unwrap()));
    let r = validate(&object, &h.binary, dir.path(), true).unwrap();
    assert!(r.engine_stable, "{r:?}");
    assert!(r.mutated_outputs_nonempty);
    assert!(r.executions > 0 && r.execs_per_sec > 0.0);
    assert!(r.baseline_execs_per_sec.is_some_and(|b| b > 0.0));
    let stats = r.mutator.unwrap();
    assert_eq!(stats.probe_calls, 1000);
    assert_eq!(stats.oversized, 0);
    assert!(r.failure.is_none());
}

#[test]
fn aborting_mutator_is_unstable() {
    let dir = tempfile::tempdir().unwrap();
    let h = common::magic_gate(&dir.path().join("h"));
    let object = built(&fixture_mutator("abort.c"), &dir.path().join("m"));
    let r = validate(&object, &h.binary, dir.path(), true).unwrap();
    assert!(!r.engine_stable);
    assert!(r.failure.is_some());
    assert!(r.baseline_execs_per_sec.is_none());
}

#[test]
fn constant_mutator_produces_nothing_new() {
    let dir = tempfile::tempdir().unwrap();
    let h = common::magic_gate(&dir.path().join("h"));
    let object = built(&fixture_mutator("constant.c"), &dir.path().join("m"));
    let r = validate(&object, &h.binary, dir.path(), false).unwrap();
    assert!(r.engine_stable);
    assert!(!r.mutated_outputs_nonempty);
    let stats = r.mutator.unwrap();
    assert_eq!(stats.changed, 0);
    assert_eq!(stats.probe_changed, 0);
}

#[test]
fn missing_symbol_is_caught_at_build_and_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let src = fixture_mutator("missing_symbol.c");
    match build(&src, &dir.path().join("checked"), &required()) {
        MutatorBuild::Failed { diagnostics, .. } => {
            assert!(diagnostics.iter().any(|d| d.message.contains("afl_custom_fuzz")), "{diagnostics:?}")
        }
        MutatorBuild::Built { .. } => panic!("missing entry point accepted"),
    }
    // Built without the export check, the engine refuses to load it.
    let object = match build(&src, &dir.path().join("unchecked"), &BTreeSet::new()) {
        MutatorBuild::Built { object, .. } => object,
        MutatorBuild::Failed { log, .. } => panic!("{log}"),
    };
    assert!(!exported_symbols(&object).unwrap().contains("afl_custom_fuzz"));
    let h = common::magic_gate(&dir.path().join("h"));
    let err = validate(&object, &h.binary, dir.path(), false).unwrap_err();
    assert!(matches!(err, MutatorError::EngineLoadFailure(_)), "{err}");
}

#[test]
fn syntax_error_yields_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    match build(&fixture_mutator("syntax_error.c"), dir.path(), &required()) {
        MutatorBuild::Failed { diagnostics, .. } => {
            assert!(!diagnostics.is_empty());
            assert!(diagnostics.iter().all(|d| d.file == "mutator.c" && d.line > 0), "{diagnostics:?}");
        }
        MutatorBuild::Built { .. } => panic!("syntax error compiled"),
    }
}
