//! Retrieval-augmented compile repair.
//!
//! Library sources are cut into line windows, embedded, and searched by
//! cosine similarity against a query built from compiler errors. The repair
//! step then walks the retrieved chunks with the model: a first analysis on
//! the best chunk, one refinement per further chunk, and a final rewrite of
//! the harness.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::callgraph::function_start_lines;
use crate::diagnostics::Diagnostic;
use crate::gateway::{extract_fenced, slots, Gateway, GatewayError, TemplateName};

pub const DEFAULT_DIMENSION: usize = 256;
pub const DEFAULT_CHUNK_LINES: u32 = 40;
pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile { path: PathBuf, source: std::io::Error },
    #[error("no files to index")]
    NoFiles,
    #[error("query needs at least one error")]
    EmptyErrorSet,
    #[error("query vector has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index was built with embedder {found}, configuration uses {expected}")]
    EmbedderMismatch { expected: String, found: String },
    #[error("index file {path}: {reason}")]
    BadIndexFile { path: PathBuf, reason: String },
    #[error("top_k must be at least 1")]
    ZeroTopK,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Text to fixed-dimension vector.
pub trait Embedder {
    fn id(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f32>;
}

/// Hashed bag of tokens: identifiers and numbers, FNV-1a bucketed, weighted
/// by `1 + ln(tf)` and L2-normalized. Text without tokens maps to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dimension: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dimension: DEFAULT_DIMENSION }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z_][A-Za-z0-9_]*|[0-9]+").unwrap())
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("fnv-bag-of-tokens/{}", self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let mut counts = vec![0u32; self.dimension];
        for m in token_re().find_iter(text) {
            counts[(fnv1a(m.as_str().as_bytes()) % self.dimension as u64) as usize] += 1;
        }
        let weights: Vec<f64> = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 + (c as f64).ln() }).collect();
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; self.dimension];
        }
        weights.iter().map(|w| (w / norm) as f32).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeChunk {
    pub id: usize,
    pub origin_file: PathBuf,
    /// Inclusive 1-based line span.
    pub span: (u32, u32),
    pub text: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexBase {
    pub embedder_id: String,
    pub dimension: usize,
    pub chunk_lines: u32,
    pub chunks: Vec<KnowledgeChunk>,
}

/// Line windows of at most `window` lines. A window that would run past the
/// start of a function is cut just before the last such start, so functions
/// begin chunks whenever possible.
pub fn chunk_spans(line_count: u32, function_starts: &[u32], window: u32) -> Vec<(u32, u32)> {
    assert!(window >= 1);
    let mut spans = Vec::new();
    let mut start = 1;
    while start <= line_count {
        let mut end = (start + window - 1).min(line_count);
        if let Some(&b) = function_starts.iter().filter(|&&b| b > start && b <= end).max() {
            end = b - 1;
        }
        spans.push((start, end));
        start = end + 1;
    }
    spans
}

const INDEXED_EXTENSIONS: &[&str] = &["c", "h", "cc", "cpp", "cxx", "hh", "hpp", "inc"];

/// C-family files under `root`, sorted, relative to `root`.
pub fn collect_files(root: &Path) -> Result<Vec<PathBuf>, RagError> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| RagError::UnreadableFile {
            path: e.path().unwrap_or(root).to_path_buf(),
            source: e.into(),
        })?;
        let ext = entry.path().extension().and_then(|e| e.to_str()).unwrap_or("");
        if entry.file_type().is_file() && INDEXED_EXTENSIONS.contains(&ext) {
            files.push(entry.path().strip_prefix(root).unwrap_or(entry.path()).to_path_buf());
        }
    }
    Ok(files)
}

impl IndexBase {
    /// Chunks and embeds `files` (relative to `root`).
    pub fn build(root: &Path, files: &[PathBuf], embedder: &dyn Embedder, chunk_lines: u32) -> Result<Self, RagError> {
        if files.is_empty() {
            return Err(RagError::NoFiles);
        }
        let mut chunks = Vec::new();
        for rel in files {
            let path = root.join(rel);
            let bytes = std::fs::read(&path).map_err(|source| RagError::UnreadableFile { path, source })?;
            let text = String::from_utf8_lossy(&bytes);
            let lines: Vec<&str> = text.lines().collect();
            let starts = function_start_lines(&text);
            for (lo, hi) in chunk_spans(lines.len() as u32, &starts, chunk_lines) {
                let body = lines[(lo - 1) as usize..hi as usize].join("\n");
                chunks.push(KnowledgeChunk {
                    id: chunks.len(),
                    origin_file: rel.clone(),
                    span: (lo, hi),
                    vector: embedder.embed(&body),
                    text: body,
                });
            }
        }
        Ok(Self { embedder_id: embedder.id(), dimension: embedder.dimension(), chunk_lines, chunks })
    }

    pub fn save(&self, path: &Path) -> Result<(), RagError> {
        let bad = |reason: String| RagError::BadIndexFile { path: path.to_path_buf(), reason };
        let json = serde_json::to_vec(self).map_err(|e| bad(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| bad(e.to_string()))
    }

    /// Loads an index and checks it was built by `embedder`.
    pub fn load(path: &Path, embedder: &dyn Embedder) -> Result<Self, RagError> {
        let bad = |reason: String| RagError::BadIndexFile { path: path.to_path_buf(), reason };
        let bytes = std::fs::read(path).map_err(|e| bad(e.to_string()))?;
        let index: Self = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
        if index.embedder_id != embedder.id() {
            return Err(RagError::EmbedderMismatch { expected: embedder.id(), found: index.embedder_id });
        }
        if let Some(c) = index.chunks.iter().find(|c| c.vector.len() != index.dimension) {
            return Err(bad(format!("chunk {} has dimension {}", c.id, c.vector.len())));
        }
        Ok(index)
    }

    /// Up to `k` chunks with cosine similarity at least `s`, best first,
    /// ties by chunk id.
    pub fn retrieve(&self, query_vec: &[f32], s: f64, k: usize) -> Result<Vec<(&KnowledgeChunk, f64)>, RagError> {
        if query_vec.len() != self.dimension {
            return Err(RagError::DimensionMismatch { expected: self.dimension, got: query_vec.len() });
        }
        if k == 0 {
            return Err(RagError::ZeroTopK);
        }
        let mut scored: Vec<(&KnowledgeChunk, f64)> = self
            .chunks
            .iter()
            .map(|c| (c, cosine(query_vec, &c.vector)))
            .filter(|&(_, sim)| sim >= s)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
        scored.truncate(k);
        Ok(scored)
    }
}

/// Cosine similarity in f64; 0 when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

const C_KEYWORDS: &[&str] = &[
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else", "enum", "extern",
    "float", "for", "goto", "if", "inline", "int", "long", "register", "restrict", "return", "short", "signed",
    "sizeof", "static", "struct", "switch", "typedef", "union", "unsigned", "void", "volatile", "while", "_Bool",
];

fn quoted_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[‘'`]([^’'`]+)[’']").unwrap())
}

/// Identifiers named inside quotes in diagnostic messages, first appearance
/// order, C keywords dropped.
pub fn mentioned_identifiers(errors: &[Diagnostic]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for d in errors {
        for q in quoted_re().captures_iter(&d.message) {
            for m in token_re().find_iter(&q[1]) {
                let t = m.as_str();
                let is_ident = !t.as_bytes()[0].is_ascii_digit();
                if is_ident && !C_KEYWORDS.contains(&t) && seen.insert(t.to_string()) {
                    out.push(t.to_string());
                }
            }
        }
    }
    out
}

/// Deduplicated messages (first location kept) followed by the identifiers
/// they mention.
pub fn build_query(errors: &[Diagnostic]) -> Result<String, RagError> {
    if errors.is_empty() {
        return Err(RagError::EmptyErrorSet);
    }
    let mut seen = BTreeSet::new();
    let mut q = String::new();
    for d in errors {
        if seen.insert(d.message.as_str()) {
            q.push_str(&d.to_string());
            q.push('\n');
        }
    }
    let idents = mentioned_identifiers(errors);
    if !idents.is_empty() {
        q.push_str("Identifiers: ");
        q.push_str(&idents.join(" "));
        q.push('\n');
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RagParams {
    pub threshold: f64,
    pub top_k: usize,
}

impl Default for RagParams {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, top_k: DEFAULT_TOP_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub revised: String,
    pub query: String,
    /// Retrieved chunk ids, best first.
    pub chunks: Vec<usize>,
    /// Set when retrieval was empty and the revision used the query alone.
    pub no_chunks_warning: bool,
    pub gateway_calls: usize,
}

fn chunk_context(c: &KnowledgeChunk) -> String {
    format!("// {}:{}-{}\n{}", c.origin_file.display(), c.span.0, c.span.1, c.text)
}

const NOT_YET: &str = "(not needed for this step)";

const ANALYZE: &str = "Explain what causes these compiler errors, using the retrieved library code. State precisely what the harness must change: missing includes, declarations, exact function signatures, type names or struct members. Do not write the harness yet.";
const REFINE: &str = "Refine the analysis so far with the additional retrieved library code. Keep what is still correct, correct what this code contradicts, and add any new facts relevant to the errors. Do not write the harness yet.";
const REVISE: &str = "Rewrite the harness so that it compiles cleanly, applying the analysis. Keep its behavior: it reads the input file named by argv[1] and drives the entry function. Reply with the complete harness in one fenced ```c block.";

/// Repairs `harness` for `errors` with retrieval over `index`.
///
/// Issues `1 + max(0, chunks - 1) + 1` completions: an analysis of the
/// query with the first chunk (or with no context when nothing is
/// retrieved), one refinement per further chunk, and the final rewrite.
pub fn repair_harness(
    errors: &[Diagnostic],
    harness: &str,
    index: &IndexBase,
    embedder: &dyn Embedder,
    gateway: &Gateway,
    params: RagParams,
) -> Result<RepairOutcome, RagError> {
    let query = build_query(errors)?;
    let qvec = embedder.embed(&query);
    let retrieved = index.retrieve(&qvec, params.threshold, params.top_k)?;
    let before = gateway.call_count();
    let ask = |tag: &str, context: String, analysis: String, harness: String, instructions: &str| {
        let s = slots([
            ("query", query.trim_end().to_string()),
            ("context", context),
            ("analysis", analysis),
            ("harness", harness),
            ("instructions", instructions.to_string()),
        ]);
        gateway.ask(TemplateName::RepairRefinement, tag, &s)
    };

    let first_context = match retrieved.first() {
        Some((c, _)) => chunk_context(c),
        None => {
            log::warn!("no library chunk reached similarity {}; repairing from the errors alone", params.threshold);
            "(no library code was retrieved for these errors)".to_string()
        }
    };
    let mut r = ask("analyze", first_context, "(none yet)".into(), NOT_YET.into(), ANALYZE)?;
    for (c, _) in retrieved.iter().skip(1) {
        r = ask("refine", chunk_context(c), r, NOT_YET.into(), REFINE)?;
    }
    let reply = ask("revise", "(summarized in the analysis above)".into(), r, format!("```c\n{}\n```", harness.trim_end()), REVISE)?;
    let revised = extract_fenced(&reply, &["c"]).unwrap_or(reply);

    Ok(RepairOutcome {
        revised,
        query,
        chunks: retrieved.iter().map(|(c, _)| c.id).collect(),
        no_chunks_warning: retrieved.is_empty(),
        gateway_calls: gateway.call_count() - before,
    })
}
