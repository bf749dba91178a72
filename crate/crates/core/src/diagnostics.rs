//! Compiler and linker diagnostics.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Diagnostic {
    pub file: String,
    /// 0 when the tool gave no line (linker errors without debug info).
    pub line: u32,
    pub message: String,
}

impl Diagnostic {
    pub fn new(file: impl Into<String>, line: u32, message: impl Into<String>) -> Self {
        Self { file: file.into(), line, message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "{}:{}: {}", self.file, self.line, self.message)
        } else {
            write!(f, "{}: {}", self.file, self.message)
        }
    }
}

fn compiler_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?P<file>[^:\s][^:]*):(?P<line>\d+):(?:\d+:)?\s*(?:fatal )?error:\s*(?P<msg>.+)$").unwrap())
}

fn linker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(?:\S*ld(?:\.\w+)?: )?(?P<file>[^:\s][^:]*):(?:(?P<line>\d+)|\([^)]*\)):\s*(?P<msg>(?:undefined reference|multiple definition).+)$")
            .unwrap()
    })
}

/// Extracts error diagnostics from gcc/clang and GNU ld output, in order of
/// appearance and without exact duplicates. Warnings and notes are skipped.
/// When the output holds no recognizable error but is non-empty, the last
/// non-empty line is reported against `<build>`.
pub fn parse_diagnostics(output: &str) -> Vec<Diagnostic> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for raw in output.lines() {
        let line = raw.trim_end();
        let d = if let Some(c) = linker_re().captures(line) {
            Diagnostic::new(&c["file"], c.name("line").map_or(0, |m| m.as_str().parse().unwrap_or(0)), &c["msg"])
        } else if let Some(c) = compiler_re().captures(line) {
            Diagnostic::new(&c["file"], c["line"].parse().unwrap_or(0), c["msg"].trim())
        } else {
            continue;
        };
        if seen.insert(d.clone()) {
            out.push(d);
        }
    }
    if out.is_empty() {
        if let Some(last) = output.lines().map(str::trim).rfind(|l| !l.is_empty()) {
            out.push(Diagnostic::new("<build>", 0, last));
        }
    }
    out
}
