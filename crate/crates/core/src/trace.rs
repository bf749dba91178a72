//! Function-level coverage traces of instrumented binaries.
//!
//! Instrumented programs are built with `-finstrument-functions` and the
//! bundled tracer, which writes the load-relative offset of every function
//! entered to the file named by `DGF_TRACE_OUT`. Offsets are mapped back to
//! names with the binary's symbol table.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use object::{Object, ObjectSegment, ObjectSymbol, SymbolKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

/// Source of the tracer linked into instrumented builds.
pub const TRACER_SOURCE: &str = include_str!("../assets/dgf_trace.c");
pub const TRACE_ENV: &str = "DGF_TRACE_OUT";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read binary {path}: {reason}")]
    BadBinary { path: PathBuf, reason: String },
    #[error("cannot run {path}: {source}")]
    Spawn { path: PathBuf, source: std::io::Error },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Function symbols of an executable keyed by load-relative offset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolMap {
    by_offset: BTreeMap<u64, (u64, String)>,
}

impl SymbolMap {
    pub fn from_binary(path: &Path) -> Result<Self, TraceError> {
        let bad = |reason: String| TraceError::BadBinary { path: path.to_path_buf(), reason };
        let data = std::fs::read(path).map_err(|e| bad(e.to_string()))?;
        let file = object::File::parse(&*data).map_err(|e| bad(e.to_string()))?;
        let base = file.segments().map(|s| s.address()).min().unwrap_or(0);
        let mut by_offset = BTreeMap::new();
        for sym in file.symbols() {
            if sym.kind() != SymbolKind::Text || sym.is_undefined() || sym.address() == 0 {
                continue;
            }
            let Ok(name) = sym.name() else { continue };
            if name.is_empty() {
                continue;
            }
            by_offset.entry(sym.address() - base).or_insert((sym.size(), name.to_string()));
        }
        Ok(Self { by_offset })
    }

    pub fn len(&self) -> usize {
        self.by_offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_offset.is_empty()
    }

    /// Name of the function starting at `offset`, or containing it.
    pub fn resolve(&self, offset: u64) -> Option<&str> {
        let (&start, (size, name)) = self.by_offset.range(..=offset).next_back()?;
        (start == offset || offset < start + size).then_some(name.as_str())
    }

    pub fn offset_of(&self, name: &str) -> Option<u64> {
        self.by_offset.iter().find(|(_, (_, n))| n == name).map(|(&o, _)| o)
    }
}

/// Offsets listed in a tracer output file. Malformed lines are skipped.
pub fn parse_trace(text: &str) -> Vec<u64> {
    text.lines()
        .filter_map(|l| u64::from_str_radix(l.trim().trim_start_matches("0x"), 16).ok())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ExitKind {
    Exited(i32),
    Signaled(i32),
    Timeout,
}

impl ExitKind {
    /// Signals that mean the program faulted.
    pub fn is_crash(self) -> bool {
        matches!(self, ExitKind::Signaled(s) if [libc::SIGSEGV, libc::SIGABRT, libc::SIGBUS, libc::SIGFPE, libc::SIGILL, libc::SIGTRAP].contains(&s))
    }
}

#[derive(Debug, Clone)]
pub struct ExecOutcome {
    pub exit: ExitKind,
    pub duration: Duration,
    pub stderr_tail: String,
}

/// Limits applied to a target execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecLimits {
    pub timeout: Duration,
    pub memory_mb: Option<u64>,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(1), memory_mb: Some(512) }
    }
}

const STDERR_TAIL: usize = 4096;

/// Runs `program args...` with stdin closed, no core dumps, and the given
/// limits. Stdout is discarded; the last bytes of stderr are kept.
pub fn run_program(
    program: &Path,
    args: &[OsString],
    env: &[(OsString, OsString)],
    limits: ExecLimits,
) -> Result<ExecOutcome, TraceError> {
    let mut cmd = Command::new(program);
    cmd.args(args).stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::piped());
    for (k, v) in env {
        cmd.env(k, v);
    }
    let mem = limits.memory_mb;
    // SAFETY: only async-signal-safe calls (setrlimit, setpgid) between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            let zero = libc::rlimit { rlim_cur: 0, rlim_max: 0 };
            libc::setrlimit(libc::RLIMIT_CORE, &zero);
            if let Some(mb) = mem {
                let bytes = mb.saturating_mul(1 << 20) as libc::rlim_t;
                let lim = libc::rlimit { rlim_cur: bytes, rlim_max: bytes };
                libc::setrlimit(libc::RLIMIT_AS, &lim);
            }
            libc::setpgid(0, 0);
            Ok(())
        });
    }
    let start = Instant::now();
    let mut child = cmd.spawn().map_err(|source| TraceError::Spawn { path: program.to_path_buf(), source })?;
    let mut stderr = child.stderr.take().expect("stderr is piped");
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });
    let exit = match child.wait_timeout(limits.timeout)? {
        Some(status) => match (status.code(), status.signal()) {
            (Some(c), _) => ExitKind::Exited(c),
            (None, Some(s)) => ExitKind::Signaled(s),
            (None, None) => ExitKind::Exited(-1),
        },
        None => {
            // SAFETY: the child leads its own process group.
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            let _ = child.kill();
            let _ = child.wait();
            ExitKind::Timeout
        }
    };
    let duration = start.elapsed();
    let buf = reader.join().unwrap_or_default();
    let tail = &buf[buf.len().saturating_sub(STDERR_TAIL)..];
    Ok(ExecOutcome { exit, duration, stderr_tail: String::from_utf8_lossy(tail).into_owned() })
}

#[derive(Debug, Clone)]
pub struct TraceRun {
    pub outcome: ExecOutcome,
    /// Names of every function entered, resolved through the symbol map.
    pub functions: BTreeSet<String>,
    pub raw_offsets: Vec<u64>,
}

impl TraceRun {
    pub fn reached(&self, function: &str) -> bool {
        self.functions.contains(function)
    }
}

/// Runs an instrumented `binary` on `input` (passed as the only argument)
/// and collects the functions it entered.
pub fn trace_input(binary: &Path, symbols: &SymbolMap, input: &Path, limits: ExecLimits) -> Result<TraceRun, TraceError> {
    let out = tempfile::NamedTempFile::new()?;
    let env = [(OsString::from(TRACE_ENV), out.path().as_os_str().to_owned())];
    let outcome = run_program(binary, &[input.as_os_str().to_owned()], &env, limits)?;
    let text = std::fs::read_to_string(out.path()).unwrap_or_default();
    let raw_offsets = parse_trace(&text);
    let functions = raw_offsets.iter().filter_map(|&o| symbols.resolve(o)).map(str::to_string).collect();
    Ok(TraceRun { outcome, functions, raw_offsets })
}

/// Same as [`trace_input`] for bytes, written to a temporary file first.
pub fn trace_bytes(binary: &Path, symbols: &SymbolMap, data: &[u8], limits: ExecLimits) -> Result<TraceRun, TraceError> {
    let input = tempfile::NamedTempFile::new()?;
    std::fs::write(input.path(), data)?;
    trace_input(binary, symbols, input.path(), limits)
}
