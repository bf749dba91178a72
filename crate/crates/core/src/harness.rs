//! Target harness generation, compilation and repair.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::{resolve_entry, CallChain, FunctionRef};
use crate::conditions::{ConditionSet, SourceMap};
use crate::diagnostics::{parse_diagnostics, Diagnostic};
use crate::gateway::{extract_fenced, slots, Gateway, GatewayError, TemplateName};
use crate::process::run_captured;
use crate::rag::{repair_harness, Embedder, IndexBase, RagError, RagParams};
use crate::trace::{ExitKind, TRACER_SOURCE};

pub const DEFAULT_MAX_REPAIR_ROUNDS: u32 = 5;
pub const HARNESS_FILE: &str = "harness.c";
pub const TRACED_BINARY: &str = "harness.traced";
pub const FAST_BINARY: &str = "harness";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("compiler not found: {0}")]
    CompilerNotFound(String),
    #[error("build timed out after {0} s")]
    Timeout(u64),
    #[error("bad build template: {0}")]
    BadTemplate(String),
    #[error("harness violates the file-argument contract after a corrective re-ask: {0}")]
    ContractViolation(String),
    #[error("compile errors remain after {} repair round(s)", .history.len())]
    RepairExhausted { history: Vec<RepairRound>, remaining: Vec<Diagnostic> },
    #[error("spec is inconsistent: {0}")]
    InvalidSpec(String),
    #[error("no source for {0}")]
    MissingSource(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Rag(#[from] RagError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// How harnesses are compiled and linked against the library.
///
/// `command` is split on whitespace. Tokens equal to `{sources}`, `{cflags}`,
/// `{include_flags}` or `{link_flags}` expand to zero or more arguments;
/// `{output}` and `{source}` are substituted inside any token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub command: String,
    pub cflags: Vec<String>,
    /// Relative to the source root unless absolute. The root itself is
    /// always searched first.
    pub include_dirs: Vec<PathBuf>,
    /// Library translation units compiled together with the harness.
    pub library_sources: Vec<PathBuf>,
    /// Prebuilt archives or objects linked after the sources.
    pub library_artifacts: Vec<PathBuf>,
    pub link_flags: Vec<String>,
    pub timeout_secs: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            command: "cc {cflags} {include_flags} -o {output} {sources} {link_flags}".into(),
            cflags: vec!["-O0".into(), "-g".into()],
            include_dirs: Vec::new(),
            library_sources: Vec::new(),
            library_artifacts: Vec::new(),
            link_flags: Vec::new(),
            timeout_secs: 120,
        }
    }
}

const INSTRUMENT_FLAGS: &[&str] = &["-finstrument-functions"];
const TRACER_FILE: &str = "dgf_trace.c";

impl BuildConfig {
    /// The argv for compiling `source` (in `out_dir`) into `output`.
    pub fn argv(
        &self,
        source_root: &Path,
        out_dir: &Path,
        source: &Path,
        output: &Path,
        instrumented: bool,
    ) -> Result<Vec<String>, HarnessError> {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { source_root.join(p) };
        let mut sources = vec![source.display().to_string()];
        sources.extend(self.library_sources.iter().map(|p| abs(p).display().to_string()));
        if instrumented {
            sources.push(out_dir.join(TRACER_FILE).display().to_string());
        }
        sources.extend(self.library_artifacts.iter().map(|p| abs(p).display().to_string()));
        let mut cflags = self.cflags.clone();
        if instrumented {
            cflags.extend(INSTRUMENT_FLAGS.iter().map(|s| s.to_string()));
        }
        let mut includes = vec![format!("-I{}", source_root.display())];
        includes.extend(self.include_dirs.iter().map(|d| format!("-I{}", abs(d).display())));
        let mut link = self.link_flags.clone();
        if instrumented {
            link.push("-ldl".into());
        }

        let mut argv = Vec::new();
        for tok in self.command.split_whitespace() {
            match tok {
                "{sources}" => argv.extend(sources.iter().cloned()),
                "{cflags}" => argv.extend(cflags.iter().cloned()),
                "{include_flags}" => argv.extend(includes.iter().cloned()),
                "{link_flags}" => argv.extend(link.iter().cloned()),
                _ => {
                    let t = tok
                        .replace("{output}", &output.display().to_string())
                        .replace("{source}", &source.display().to_string());
                    if let Some(open) = t.find('{') {
                        if t[open..].contains('}') {
                            return Err(HarnessError::BadTemplate(format!("unknown placeholder in {tok:?}")));
                        }
                    }
                    argv.push(t);
                }
            }
        }
        if argv.is_empty() {
            return Err(HarnessError::BadTemplate("empty command".into()));
        }
        Ok(argv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompileOutcome {
    Success { binary: PathBuf, log: String },
    Failed { diagnostics: Vec<Diagnostic>, log: String },
}

/// Writes `source` to `out_dir/harness.c` and compiles it to `binary_name`.
/// Diagnostic paths are made relative to `out_dir` or `source_root`.
pub fn compile_harness(
    source: &str,
    cfg: &BuildConfig,
    source_root: &Path,
    out_dir: &Path,
    binary_name: &str,
    instrumented: bool,
) -> Result<CompileOutcome, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let src_path = out_dir.join(HARNESS_FILE);
    std::fs::write(&src_path, source).map_err(io_err(&src_path))?;
    if instrumented {
        let tracer = out_dir.join(TRACER_FILE);
        std::fs::write(&tracer, TRACER_SOURCE).map_err(io_err(&tracer))?;
    }
    let output = out_dir.join(binary_name);
    let _ = std::fs::remove_file(&output);
    let argv = cfg.argv(source_root, out_dir, Path::new(HARNESS_FILE), &output, instrumented)?;
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..]).current_dir(out_dir).env("LC_ALL", "C");
    let captured = run_captured(cmd, Duration::from_secs(cfg.timeout_secs)).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            HarnessError::CompilerNotFound(argv[0].clone())
        } else {
            HarnessError::Io { path: PathBuf::from(&argv[0]), source: e }
        }
    })?;
    if captured.exit == ExitKind::Timeout {
        return Err(HarnessError::Timeout(cfg.timeout_secs));
    }
    let mut log = format!("$ {}\n{}", argv.join(" "), captured.combined());
    if captured.success() && output.exists() {
        log.push_str("build succeeded\n");
        return Ok(CompileOutcome::Success { binary: output, log });
    }
    let strip = |f: &str| -> String {
        for prefix in [out_dir, source_root] {
            if let Ok(rel) = Path::new(f).strip_prefix(prefix) {
                return rel.display().to_string();
            }
        }
        f.to_string()
    };
    let diagnostics = parse_diagnostics(&captured.combined())
        .into_iter()
        .map(|d| Diagnostic { file: strip(&d.file), ..d })
        .collect();
    log.push_str("build failed\n");
    Ok(CompileOutcome::Failed { diagnostics, log })
}

/// Everything the harness prompt needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessSpec {
    pub target_description: String,
    pub chain: CallChain,
    pub conditions: ConditionSet,
    pub entry: FunctionRef,
    pub template_file: PathBuf,
    pub function_sources: SourceMap,
}

impl HarnessSpec {
    /// Derives entry and template file from the chain and reads the sources
    /// of every chain file plus the template file.
    pub fn new(
        target_description: impl Into<String>,
        conditions: ConditionSet,
        source_root: &Path,
    ) -> Result<Self, HarnessError> {
        let chain = conditions.chain.clone();
        let ep = resolve_entry(&chain);
        let mut function_sources = SourceMap::new();
        for file in chain.functions().iter().map(|f| &f.file).chain([&ep.template_file]) {
            if !function_sources.contains_key(file) {
                let path = source_root.join(file);
                let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                function_sources.insert(file.clone(), text);
            }
        }
        Ok(Self {
            target_description: target_description.into(),
            chain,
            conditions,
            entry: ep.entry,
            template_file: ep.template_file,
            function_sources,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let ep = resolve_entry(&self.chain);
        if ep.entry != self.entry || ep.template_file != self.template_file {
            return Err(HarnessError::InvalidSpec(format!(
                "entry {} / template {} do not match the chain (expected {} / {})",
                self.entry.name,
                self.template_file.display(),
                ep.entry.name,
                ep.template_file.display()
            )));
        }
        if self.conditions.chain != self.chain {
            return Err(HarnessError::InvalidSpec("conditions belong to a different chain".into()));
        }
        Ok(())
    }

    fn source_of(&self, f: &FunctionRef) -> Result<String, HarnessError> {
        let text = self.function_sources.get(&f.file).ok_or_else(|| HarnessError::MissingSource(f.file.clone()))?;
        let lines: Vec<&str> = text.lines().collect();
        let lo = (f.line as usize).saturating_sub(1).min(lines.len());
        let hi = (f.end_line.max(f.line) as usize).min(lines.len());
        Ok(lines[lo..hi].join("\n"))
    }

    fn function_sources_text(&self) -> Result<String, HarnessError> {
        let mut out = String::new();
        for f in self.chain.functions() {
            out.push_str(&format!("### {} ({}:{})\n```c\n{}\n```\n", f.name, f.file.display(), f.line, self.source_of(f)?));
        }
        Ok(out.trim_end().to_string())
    }

    fn template_source(&self) -> Result<&str, HarnessError> {
        self.function_sources
            .get(&self.template_file)
            .map(|s| s.trim_end())
            .ok_or_else(|| HarnessError::MissingSource(self.template_file.clone()))
    }
}

fn main_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bmain\s*\(").unwrap())
}

fn argv1_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bargv\s*\[\s*1\s*\]").unwrap())
}

/// Checks the input-by-file contract: a `main`, use of `argv[1]`, and a
/// call to the entry function. Returns every violation.
pub fn lint_harness(source: &str, entry: &str) -> Vec<String> {
    let mut problems = Vec::new();
    if !main_re().is_match(source) {
        problems.push("the harness has no `main` function".to_string());
    }
    if !argv1_re().is_match(source) {
        problems.push("the harness does not read its input file name from `argv[1]`".to_string());
    }
    let call = Regex::new(&format!(r"\b{}\s*\(", regex::escape(entry))).unwrap();
    if !call.is_match(source) {
        problems.push(format!("the harness never calls the entry function `{entry}`"));
    }
    problems
}

fn harness_slots(spec: &HarnessSpec, feedback: String) -> Result<std::collections::BTreeMap<String, String>, HarnessError> {
    Ok(slots([
        ("target_description", spec.target_description.trim().to_string()),
        ("call_chain", spec.chain.to_string()),
        ("entry_function", format!("{} ({}:{})", spec.entry.name, spec.entry.file.display(), spec.entry.line)),
        ("function_sources", spec.function_sources_text()?),
        ("execution_conditions", spec.conditions.summary()),
        ("template_file", spec.template_file.display().to_string()),
        ("template_source", spec.template_source()?.to_string()),
        ("feedback", feedback),
    ]))
}

/// Asks the model for a harness; a contract violation gets one corrective
/// re-ask quoting the problems.
pub fn generate_harness(spec: &HarnessSpec, gateway: &Gateway) -> Result<String, HarnessError> {
    spec.validate()?;
    let mut feedback = String::new();
    for attempt in 0..2 {
        let reply = gateway.ask(TemplateName::HarnessGeneration, "generate", &harness_slots(spec, feedback)?)?;
        let source = extract_fenced(&reply, &["c"]).unwrap_or(reply);
        let problems = lint_harness(&source, &spec.entry.name);
        if problems.is_empty() {
            return Ok(source);
        }
        log::warn!("generated harness rejected by lint: {}", problems.join("; "));
        if attempt == 1 {
            return Err(HarnessError::ContractViolation(problems.join("; ")));
        }
        feedback = format!(
            "\n## Previous attempt rejected\n{}\nFix these problems and reply with the full harness.",
            problems.iter().map(|p| format!("- {p}")).collect::<Vec<_>>().join("\n")
        );
    }
    unreachable!("the loop returns on its second pass")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRound {
    pub round: u32,
    pub diagnostics: Vec<Diagnostic>,
    pub chunks: Vec<usize>,
    pub no_chunks_warning: bool,
    pub gateway_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessArtifact {
    pub source: String,
    /// Coverage-instrumented binary used for verification and hit rates.
    pub binary: PathBuf,
    /// Uninstrumented build of the same source for external engines.
    pub fast_binary: PathBuf,
    pub instrumentation: bool,
    pub build_log: String,
    pub repair_rounds_used: u32,
    pub history: Vec<RepairRound>,
}

/// Retrieval state for repairs.
pub struct RepairKit<'a> {
    pub index: &'a IndexBase,
    pub embedder: &'a dyn Embedder,
    pub params: RagParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HarnessLimits {
    pub max_rounds: u32,
}

impl Default for HarnessLimits {
    fn default() -> Self {
        Self { max_rounds: DEFAULT_MAX_REPAIR_ROUNDS }
    }
}

/// Compiles `source`, repairing it until it builds or `limits.max_rounds`
/// repairs have been spent.
pub fn build_from_source(
    mut source: String,
    gateway: &Gateway,
    kit: &RepairKit<'_>,
    cfg: &BuildConfig,
    source_root: &Path,
    out_dir: &Path,
    limits: HarnessLimits,
) -> Result<HarnessArtifact, HarnessError> {
    let mut history = Vec::new();
    let mut log = String::new();
    loop {
        match compile_harness(&source, cfg, source_root, out_dir, TRACED_BINARY, true)? {
            CompileOutcome::Success { binary, log: l } => {
                log.push_str(&l);
                let fast_binary = match compile_harness(&source, cfg, source_root, out_dir, FAST_BINARY, false)? {
                    CompileOutcome::Success { binary, log: l } => {
                        log.push_str(&l);
                        binary
                    }
                    CompileOutcome::Failed { log: l, .. } => {
                        return Err(HarnessError::InvalidSpec(format!("uninstrumented build failed:\n{l}")))
                    }
                };
                return Ok(HarnessArtifact {
                    source,
                    binary,
                    fast_binary,
                    instrumentation: true,
                    build_log: log,
                    repair_rounds_used: history.len() as u32,
                    history,
                });
            }
            CompileOutcome::Failed { diagnostics, log: l } => {
                log.push_str(&l);
                if history.len() as u32 >= limits.max_rounds {
                    return Err(HarnessError::RepairExhausted { history, remaining: diagnostics });
                }
                let out = repair_harness(&diagnostics, &source, kit.index, kit.embedder, gateway, kit.params)?;
                history.push(RepairRound {
                    round: history.len() as u32 + 1,
                    diagnostics,
                    chunks: out.chunks,
                    no_chunks_warning: out.no_chunks_warning,
                    gateway_calls: out.gateway_calls,
                });
                source = out.revised;
            }
        }
    }
}

/// Generates, compiles and repairs the harness for `spec`.
pub fn build_harness(
    spec: &HarnessSpec,
    gateway: &Gateway,
    kit: &RepairKit<'_>,
    cfg: &BuildConfig,
    source_root: &Path,
    out_dir: &Path,
    limits: HarnessLimits,
) -> Result<HarnessArtifact, HarnessError> {
    let source = generate_harness(spec, gateway)?;
    build_from_source(source, gateway, kit, cfg, source_root, out_dir, limits)
}
