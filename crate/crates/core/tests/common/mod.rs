#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dgf_core::campaign::WorkerCommand;
use dgf_core::harness::{compile_harness, BuildConfig, CompileOutcome, HarnessArtifact, FAST_BINARY, TRACED_BINARY};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn corpus(name: &str) -> PathBuf {
    repo_root().join("fixtures/corpus").join(name)
}

pub fn fixture(rel: &str) -> PathBuf {
    repo_root().join("fixtures").join(rel)
}

pub fn worker() -> WorkerCommand {
    WorkerCommand::new(env!("CARGO_BIN_EXE_dgf-engine"))
}

pub const MAGIC_GATE_HARNESS: &str = "#include <stdio.h>\n#include \"gate.h\"\n\nint main(int argc, char **argv) {\n    if (argc < 2)\n        return 1;\n    return process_file(argv[1]) == 0 ? 0 : 1;\n}\n";

pub const PPM_HARNESS: &str = "#include <stdio.h>\n#include \"ppm.h\"\n\nint main(int argc, char **argv) {\n    image img;\n    if (argc < 2)\n        return 1;\n    if (load_image(argv[1], &img) != 0)\n        return 1;\n    free_image(&img);\n    return 0;\n}\n";

/// Builds traced and plain binaries of `source` against a corpus target.
pub fn build(target: &str, library: &[&str], source: &str, out_dir: &Path) -> HarnessArtifact {
    let root = corpus(target);
    let cfg = BuildConfig { library_sources: library.iter().map(PathBuf::from).collect(), ..BuildConfig::default() };
    let compile = |name: &str, instrumented: bool| match compile_harness(source, &cfg, &root, out_dir, name, instrumented).unwrap() {
        CompileOutcome::Success { binary, .. } => binary,
        CompileOutcome::Failed { log, .. } => panic!("harness failed to build:\n{log}"),
    };
    let binary = compile(TRACED_BINARY, true);
    let fast_binary = compile(FAST_BINARY, false);
    HarnessArtifact {
        source: source.to_string(),
        binary,
        fast_binary,
        instrumentation: true,
        build_log: String::new(),
        repair_rounds_used: 0,
        history: Vec::new(),
    }
}

pub fn magic_gate(out_dir: &Path) -> HarnessArtifact {
    build("magic_gate", &["gate.c"], MAGIC_GATE_HARNESS, out_dir)
}

pub fn ppm_mini(out_dir: &Path) -> HarnessArtifact {
    build("ppm_mini", &["ppm.c"], PPM_HARNESS, out_dir)
}

/// `MGK1`, little-endian length, payload of that length.
pub fn gate_record(declared: u32, payload: usize) -> Vec<u8> {
    let mut v = b"MGK1".to_vec();
    v.extend(declared.to_le_bytes());
    v.extend(std::iter::repeat_n(b'A', payload));
    v
}
