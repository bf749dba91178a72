//! Target-specific custom mutators: a three-step prompt chain (root cause,
//! mutation strategy, code), compilation against the mutator ABI with
//! repair, and a short validation run in the built-in engine.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use object::{Object, ObjectSymbol};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::campaign::{run_worker, CampaignError, WorkerCommand};
use crate::diagnostics::{parse_diagnostics, Diagnostic};
use crate::engine::{EngineConfig, EngineEvent, MutatorStats, REQUIRED_SYMBOLS};
use crate::gateway::{extract_fenced, slots, Gateway, GatewayError, TemplateName};
use crate::inputgen::SeedScript;
use crate::process::run_captured;
use crate::trace::ExitKind;

pub const API_DOCS: &str = include_str!("../assets/custom_mutator_api.md");
pub const MUTATOR_HEADER: &str = include_str!("../assets/dgf_mutator.h");
pub const REFERENCE_MUTATOR: &str = include_str!("../assets/reference_mutator.c");
pub const MUTATOR_SOURCE_FILE: &str = "mutator.c";
pub const MUTATOR_OBJECT: &str = "mutator.so";
pub const DEFAULT_MAX_REPAIR_ROUNDS: u32 = 3;
/// Mutator throughput below this share of the baseline draws a warning.
pub const OVERHEAD_WARNING_RATIO: f64 = 0.25;

#[derive(Debug, Error)]
pub enum MutatorError {
    #[error("mutator spec is invalid: {0}")]
    InvalidSpec(String),
    #[error("generated mutator lacks entry point `{0}` after a corrective re-ask")]
    MissingEntryPoint(String),
    #[error("mutator still fails to build after {rounds} repair round(s)")]
    MutatorRepairExhausted { rounds: u32, diagnostics: Vec<Diagnostic> },
    #[error("engine could not load the mutator: {0}")]
    EngineLoadFailure(String),
    #[error("mutator failed validation: {0}")]
    Rejected(String),
    #[error("compiler not found: {0}")]
    CompilerNotFound(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MutatorError + '_ {
    move |source| MutatorError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutatorSpec {
    pub target_function: String,
    pub target_description: String,
    pub target_source: String,
    pub seed_script: SeedScript,
    pub api_docs: String,
    pub examples: Vec<String>,
}

impl MutatorSpec {
    /// Spec with the bundled API docs and reference mutator.
    pub fn new(
        target_function: impl Into<String>,
        target_description: impl Into<String>,
        target_source: impl Into<String>,
        seed_script: SeedScript,
    ) -> Self {
        Self {
            target_function: target_function.into(),
            target_description: target_description.into(),
            target_source: target_source.into(),
            seed_script,
            api_docs: API_DOCS.to_string(),
            examples: vec![REFERENCE_MUTATOR.to_string()],
        }
    }

    pub fn validate(&self) -> Result<(), MutatorError> {
        if self.api_docs.trim().is_empty() {
            return Err(MutatorError::InvalidSpec("api_docs is empty".into()));
        }
        let syms = required_symbols(&self.api_docs);
        if let Some(m) = REQUIRED_SYMBOLS.iter().find(|s| !syms.contains(**s)) {
            return Err(MutatorError::InvalidSpec(format!("api_docs does not list `{m}`")));
        }
        Ok(())
    }
}

/// Entry points listed under the "Required entry points" heading of the
/// API docs, plus the three the engine always resolves.
pub fn required_symbols(api_docs: &str) -> BTreeSet<String> {
    let item = Regex::new(r"^\s*[-*]\s*`([A-Za-z_][A-Za-z0-9_]*)`").unwrap();
    let mut out = BTreeSet::new();
    let mut inside = false;
    for line in api_docs.lines() {
        if line.starts_with('#') {
            inside = line.to_ascii_lowercase().contains("required entry points");
            continue;
        }
        if inside {
            if let Some(c) = item.captures(line) {
                out.insert(c[1].to_string());
            }
        }
    }
    out
}

/// Required entry points with no definition in `source`.
pub fn missing_entry_points(source: &str, required: &BTreeSet<String>) -> Vec<String> {
    required
        .iter()
        .filter(|name| {
            let def = Regex::new(&format!(r"\b{}\s*\([^;{{]*\)\s*\{{", regex::escape(name))).unwrap();
            !def.is_match(source)
        })
        .cloned()
        .collect()
}

const STEP_ANALYSIS: &str = "Step 1 of 3: analyze the root cause. Explain which inputs and variables control the vulnerable operation in the target function, what checks are missing, and what value ranges trigger the fault. Reply in prose.";
const STEP_STRATEGY: &str = "Step 2 of 3: design the mutation strategy. Using the analysis, name the input fields to keep fixed so the call chain is still taken, the key variables to push to extremes, and how each mutation should be chosen. Reply in prose.";
const STEP_CODE: &str = "Step 3 of 3: write the custom mutator in C following the API above and the strategy. Define every required entry point. Reply with the full source in one fenced ```c block.";

fn mutator_slots(spec: &MutatorSpec, previous: &str, step: &str) -> std::collections::BTreeMap<String, String> {
    let examples = spec
        .examples
        .iter()
        .map(|e| format!("```c\n{}\n```", e.trim_end()))
        .collect::<Vec<_>>()
        .join("\n\n");
    slots([
        ("target_function", spec.target_function.clone()),
        ("target_description", spec.target_description.trim().to_string()),
        ("target_source", spec.target_source.trim_end().to_string()),
        ("seed_script", spec.seed_script.body.trim_end().to_string()),
        ("api_docs", spec.api_docs.trim().to_string()),
        ("examples", examples),
        ("previous_steps", if previous.is_empty() { "(none)".to_string() } else { previous.to_string() }),
        ("step_instructions", step.to_string()),
    ])
}

fn code_of(reply: String) -> String {
    extract_fenced(&reply, &["c"]).unwrap_or(reply)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedMutator {
    pub analysis: String,
    pub strategy: String,
    pub source: String,
    pub gateway_calls: usize,
}

/// Runs the analysis, strategy and code steps. Missing entry points get one
/// corrective re-ask.
pub fn generate_mutator(spec: &MutatorSpec, gateway: &Gateway) -> Result<GeneratedMutator, MutatorError> {
    spec.validate()?;
    let required = required_symbols(&spec.api_docs);
    let ask = |tag: &str, previous: &str, step: &str| gateway.ask(TemplateName::MutatorGeneration, tag, &mutator_slots(spec, previous, step));

    let analysis = ask("analysis", "", STEP_ANALYSIS)?.trim().to_string();
    let prev1 = format!("### Root cause analysis\n{analysis}");
    let strategy = ask("strategy", &prev1, STEP_STRATEGY)?.trim().to_string();
    let prev2 = format!("{prev1}\n\n### Mutation strategy\n{strategy}");
    let mut source = code_of(ask("code", &prev2, STEP_CODE)?);
    let mut calls = 3;
    let missing = missing_entry_points(&source, &required);
    if !missing.is_empty() {
        log::warn!("generated mutator lacks {}", missing.join(", "));
        let fix = format!(
            "{STEP_CODE}\nYour previous code did not define: {}. Every required entry point must be defined.",
            missing.iter().map(|m| format!("`{m}`")).collect::<Vec<_>>().join(", ")
        );
        let prev3 = format!("{prev2}\n\n### Previous code\n```c\n{}\n```", source.trim_end());
        source = code_of(ask("code-fix", &prev3, &fix)?);
        calls += 1;
        if let Some(m) = missing_entry_points(&source, &required).into_iter().next() {
            return Err(MutatorError::MissingEntryPoint(m));
        }
    }
    Ok(GeneratedMutator { analysis, strategy, source, gateway_calls: calls })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MutatorBuildConfig {
    pub compiler: String,
    pub cflags: Vec<String>,
    pub timeout_secs: u64,
}

impl Default for MutatorBuildConfig {
    fn default() -> Self {
        Self {
            compiler: "cc".into(),
            cflags: ["-O2", "-shared", "-fPIC"].map(String::from).to_vec(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MutatorBuild {
    Built { object: PathBuf, log: String },
    Failed { diagnostics: Vec<Diagnostic>, log: String },
}

/// Exported function names of a shared object.
pub fn exported_symbols(path: &Path) -> Result<BTreeSet<String>, MutatorError> {
    let data = std::fs::read(path).map_err(io_err(path))?;
    let file = object::File::parse(&*data).map_err(|e| MutatorError::EngineLoadFailure(e.to_string()))?;
    Ok(file
        .dynamic_symbols()
        .filter(|s| s.is_definition() && s.is_global())
        .filter_map(|s| s.name().ok().map(str::to_string))
        .collect())
}

/// Compiles `source` into `out_dir/mutator.so` next to the ABI header and
/// checks that every required symbol is exported.
pub fn compile_mutator(
    source: &str,
    cfg: &MutatorBuildConfig,
    out_dir: &Path,
    required: &BTreeSet<String>,
) -> Result<MutatorBuild, MutatorError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let src = out_dir.join(MUTATOR_SOURCE_FILE);
    std::fs::write(&src, source).map_err(io_err(&src))?;
    let hdr = out_dir.join("dgf_mutator.h");
    std::fs::write(&hdr, MUTATOR_HEADER).map_err(io_err(&hdr))?;
    let object = out_dir.join(MUTATOR_OBJECT);
    let _ = std::fs::remove_file(&object);
    let mut cmd = Command::new(&cfg.compiler);
    cmd.current_dir(out_dir)
        .args(&cfg.cflags)
        .arg("-I.")
        .arg("-o")
        .arg(MUTATOR_OBJECT)
        .arg(MUTATOR_SOURCE_FILE)
        .env("LC_ALL", "C");
    let out = run_captured(cmd, Duration::from_secs(cfg.timeout_secs)).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => MutatorError::CompilerNotFound(cfg.compiler.clone()),
        _ => MutatorError::Io { path: src.clone(), source: e },
    })?;
    let log = out.combined();
    if out.exit == ExitKind::Timeout {
        let d = Diagnostic { file: "<build>".into(), line: 0, message: format!("compiler timed out after {} s", cfg.timeout_secs) };
        return Ok(MutatorBuild::Failed { diagnostics: vec![d], log });
    }
    if !out.success() || !object.exists() {
        return Ok(MutatorBuild::Failed { diagnostics: parse_diagnostics(&log), log });
    }
    let exported = exported_symbols(&object)?;
    let missing: Vec<Diagnostic> = required
        .iter()
        .filter(|s| !exported.contains(*s))
        .map(|s| Diagnostic {
            file: MUTATOR_SOURCE_FILE.into(),
            line: 0,
            message: format!("required entry point `{s}` is not exported"),
        })
        .collect();
    if !missing.is_empty() {
        return Ok(MutatorBuild::Failed { diagnostics: missing, log });
    }
    Ok(MutatorBuild::Built { object, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MutatorLimits {
    pub max_repair_rounds: u32,
}

impl Default for MutatorLimits {
    fn default() -> Self {
        Self { max_repair_rounds: DEFAULT_MAX_REPAIR_ROUNDS }
    }
}

/// Compiles, asking the model to fix compile errors up to the round limit.
/// Returns the final source, the object and the number of repairs spent.
pub fn build_with_repair(
    spec: &MutatorSpec,
    generated: &GeneratedMutator,
    gateway: &Gateway,
    cfg: &MutatorBuildConfig,
    out_dir: &Path,
    limits: MutatorLimits,
) -> Result<(String, PathBuf, u32), MutatorError> {
    let required = required_symbols(&spec.api_docs);
    let mut source = generated.source.clone();
    let mut rounds = 0;
    loop {
        match compile_mutator(&source, cfg, out_dir, &required)? {
            MutatorBuild::Built { object, .. } => return Ok((source, object, rounds)),
            MutatorBuild::Failed { diagnostics, .. } => {
                if rounds >= limits.max_repair_rounds {
                    return Err(MutatorError::MutatorRepairExhausted { rounds, diagnostics });
                }
                rounds += 1;
                let errors = diagnostics.iter().map(|d| format!("- {d}")).collect::<Vec<_>>().join("\n");
                let previous = format!(
                    "### Root cause analysis\n{}\n\n### Mutation strategy\n{}\n\n### Current code\n```c\n{}\n```",
                    generated.analysis,
                    generated.strategy,
                    source.trim_end()
                );
                let step = format!(
                    "The current code fails to build against the custom mutator API:\n{errors}\nConsult the API documentation, fix every error and reply with the full corrected source in one fenced ```c block."
                );
                let reply = gateway.ask(TemplateName::MutatorGeneration, &format!("repair-{rounds}"), &mutator_slots(spec, &previous, &step))?;
                source = code_of(reply);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub sample_duration: f64,
    pub executions: u64,
    pub execs_per_sec: f64,
    pub engine_stable: bool,
    pub mutated_outputs_nonempty: bool,
    pub baseline_execs_per_sec: Option<f64>,
    pub overhead_warning: bool,
    pub mutator: Option<MutatorStats>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ValidationSetup<'a> {
    pub worker: &'a WorkerCommand,
    pub harness_binary: &'a Path,
    pub target: &'a str,
    pub seed: &'a [u8],
    pub sample_duration: f64,
    pub rng_seed: u64,
    pub work_dir: &'a Path,
    /// Also run without the mutator to compare throughput.
    pub baseline: bool,
}

fn sample(setup: &ValidationSetup<'_>, dir: &Path, mutator: Option<&Path>) -> Result<crate::campaign::WorkerOutcome, MutatorError> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let seed = dir.join("seed.bin");
    std::fs::write(&seed, setup.seed).map_err(io_err(&seed))?;
    let mut cfg = EngineConfig::new(setup.harness_binary, setup.target, dir);
    cfg.seeds.push(seed);
    cfg.budget_secs = setup.sample_duration;
    cfg.rng_seed = setup.rng_seed;
    cfg.stop_on_exploit = false;
    cfg.probe_invocations = if mutator.is_some() { 1000 } else { 0 };
    Ok(run_worker(setup.worker, &cfg, mutator)?)
}

fn done_of(events: &[EngineEvent]) -> Option<(u64, f64, Option<MutatorStats>)> {
    events.iter().find_map(|e| match e {
        EngineEvent::Done { execs, elapsed, mutator, .. } => Some((*execs, *elapsed, mutator.clone())),
        _ => None,
    })
}

/// Runs the engine with the mutator for `sample_duration` seconds.
pub fn validate_mutator(object: &Path, setup: &ValidationSetup<'_>) -> Result<ValidationReport, MutatorError> {
    if setup.sample_duration.is_nan() || setup.sample_duration <= 0.0 {
        return Err(MutatorError::InvalidSpec("sample_duration must be positive".into()));
    }
    let run = sample(setup, &setup.work_dir.join("validation"), Some(object))?;
    if let Some(f) = &run.failure {
        if f.contains("cannot load mutator") || f.contains("mutator init returned NULL") {
            return Err(MutatorError::EngineLoadFailure(f.clone()));
        }
    }
    let (executions, elapsed, stats) = done_of(&run.events).unwrap_or((0, run.wall.as_secs_f64(), None));
    let sample_duration = if elapsed > 0.0 { elapsed } else { setup.sample_duration };
    let execs_per_sec = executions as f64 / sample_duration;
    let engine_stable = run.failure.is_none() && stats.as_ref().is_some_and(|s| s.oversized == 0);
    let mutated_outputs_nonempty =
        stats.as_ref().is_some_and(|s| s.nonempty > 0 && (s.changed > 0 || s.probe_changed > 0));
    let baseline = if setup.baseline && engine_stable {
        let b = sample(setup, &setup.work_dir.join("baseline"), None)?;
        done_of(&b.events).filter(|(_, el, _)| *el > 0.0).map(|(n, el, _)| n as f64 / el)
    } else {
        None
    };
    let overhead_warning = baseline.is_some_and(|b| b > 0.0 && execs_per_sec < OVERHEAD_WARNING_RATIO * b);
    if overhead_warning {
        log::warn!("mutator runs at {execs_per_sec:.1} exec/s against a {:.1} exec/s baseline", baseline.unwrap_or(0.0));
    }
    Ok(ValidationReport {
        sample_duration,
        executions,
        execs_per_sec,
        engine_stable,
        mutated_outputs_nonempty,
        baseline_execs_per_sec: baseline,
        overhead_warning,
        mutator: stats,
        failure: run.failure,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutatorArtifact {
    pub analysis: String,
    pub strategy: String,
    pub source: String,
    pub binary: PathBuf,
    pub repair_rounds_used: u32,
    pub validation: ValidationReport,
}

/// Generation, build with repair and validation. Only stable, productive
/// mutators are returned.
pub fn build_mutator(
    spec: &MutatorSpec,
    gateway: &Gateway,
    cfg: &MutatorBuildConfig,
    limits: MutatorLimits,
    setup: &ValidationSetup<'_>,
) -> Result<MutatorArtifact, MutatorError> {
    let generated = generate_mutator(spec, gateway)?;
    let (source, binary, rounds) = build_with_repair(spec, &generated, gateway, cfg, setup.work_dir, limits)?;
    let validation = validate_mutator(&binary, setup)?;
    if !validation.engine_stable {
        return Err(MutatorError::Rejected(format!(
            "engine unstable: {}",
            validation.failure.clone().unwrap_or_else(|| "oversized output".into())
        )));
    }
    if !validation.mutated_outputs_nonempty {
        return Err(MutatorError::Rejected("mutator never produced a changed, non-empty output".into()));
    }
    Ok(MutatorArtifact {
        analysis: generated.analysis,
        strategy: generated.strategy,
        source,
        binary,
        repair_rounds_used: rounds,
        validation,
    })
}
