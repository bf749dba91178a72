//! Static call graph over a C source tree and call-chain selection.
//!
//! The graph only records direct, syntactic calls between functions defined
//! in the tree. Calls through function pointers, function-like macros and
//! callees defined outside the tree end up in [`CallGraph::diagnostics`].

mod scan;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use globset::{Glob, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use scan::RawCall;

pub const DEFAULT_MAX_DEPTH: usize = 12;

const SOURCE_EXTENSIONS: &[&str] = &["c", "h", "cc", "cpp", "cxx", "hh", "hpp"];

#[derive(Debug, Error)]
pub enum CallGraphError {
    #[error("cannot read source {path}: {source}")]
    UnreadableSource { path: PathBuf, source: std::io::Error },
    #[error("no function definitions found under {0}")]
    NoFunctionsFound(PathBuf),
    #[error("invalid header glob {0:?}: {1}")]
    BadGlob(String, String),
    #[error("target function {0} is not in the call graph")]
    TargetNotInGraph(String),
    #[error("no call chain starts at main or at an extern-declared header function")]
    NoAvailableChain,
    #[error("edge {0} references a function outside the graph")]
    DanglingEdge(usize),
}

/// A function definition found in the tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FunctionRef {
    pub name: String,
    /// Path relative to the source root.
    pub file: PathBuf,
    /// First line of the definition (1-based).
    pub line: u32,
    /// Line of the closing brace.
    pub end_line: u32,
    pub is_extern_declared: bool,
    pub is_main: bool,
}

impl FunctionRef {
    pub fn new(name: impl Into<String>, file: impl Into<PathBuf>, line: u32) -> Self {
        let name = name.into();
        assert!(!name.is_empty(), "function name must be non-empty");
        assert!(line >= 1, "line numbers are 1-based");
        let is_main = name == "main";
        Self { name, file: file.into(), line, end_line: line, is_extern_declared: false, is_main }
    }

    pub fn with_extern(mut self, is_extern_declared: bool) -> Self {
        self.is_extern_declared = is_extern_declared;
        self
    }

    pub fn with_end_line(mut self, end_line: u32) -> Self {
        self.end_line = end_line.max(self.line);
        self
    }
}

impl fmt::Display for FunctionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}:{})", self.name, self.file.display(), self.line)
    }
}

/// Index into [`CallGraph::functions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallSite {
    pub caller: FunctionId,
    pub callee: FunctionId,
    pub file: PathBuf,
    pub line: u32,
}

impl CallSite {
    pub fn is_self_call(&self) -> bool {
        self.caller == self.callee
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnresolvedKind {
    /// Call through a function pointer or struct member.
    Indirect,
    /// Call to a function-like macro.
    Macro,
    /// Callee is not defined anywhere in the tree.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnresolvedCall {
    pub caller: FunctionId,
    pub file: PathBuf,
    pub line: u32,
    pub kind: UnresolvedKind,
    /// Callee text when it is a plain identifier.
    pub callee: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallGraph {
    pub functions: Vec<FunctionRef>,
    pub edges: Vec<CallSite>,
    pub headers: BTreeSet<PathBuf>,
    pub diagnostics: Vec<UnresolvedCall>,
    #[serde(skip)]
    callers: Vec<Vec<FunctionId>>,
}

impl CallGraph {
    /// Assembles a graph from already-resolved parts. Edges are deduplicated
    /// and sorted; every endpoint must index into `functions`.
    pub fn new(
        functions: Vec<FunctionRef>,
        mut edges: Vec<CallSite>,
        headers: BTreeSet<PathBuf>,
    ) -> Result<Self, CallGraphError> {
        if let Some(bad) = edges
            .iter()
            .position(|e| e.caller.0 >= functions.len() || e.callee.0 >= functions.len())
        {
            return Err(CallGraphError::DanglingEdge(bad));
        }
        edges.sort();
        edges.dedup();
        let mut graph = Self { functions, edges, headers, diagnostics: Vec::new(), callers: Vec::new() };
        graph.index();
        Ok(graph)
    }

    fn index(&mut self) {
        let mut callers: Vec<BTreeSet<FunctionId>> = vec![BTreeSet::new(); self.functions.len()];
        for e in self.edges.iter().filter(|e| !e.is_self_call()) {
            callers[e.callee.0].insert(e.caller);
        }
        self.callers = callers.into_iter().map(|s| s.into_iter().collect()).collect();
    }

    /// Rebuilds derived indices after deserialization.
    pub fn reindex(&mut self) {
        self.index();
    }

    pub fn function(&self, id: FunctionId) -> &FunctionRef {
        &self.functions[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = FunctionId> {
        (0..self.functions.len()).map(FunctionId)
    }

    pub fn id_of(&self, f: &FunctionRef) -> Option<FunctionId> {
        self.functions
            .iter()
            .position(|g| g.name == f.name && g.file == f.file)
            .map(FunctionId)
    }

    /// All definitions with the given name, in file order.
    pub fn find(&self, name: &str) -> Vec<&FunctionRef> {
        self.functions.iter().filter(|f| f.name == name).collect()
    }

    /// Edges that may appear in a chain (self-recursion excluded).
    pub fn traversable_edges(&self) -> impl Iterator<Item = &CallSite> {
        self.edges.iter().filter(|e| !e.is_self_call())
    }

    pub fn callers_of(&self, id: FunctionId) -> &[FunctionId] {
        &self.callers[id.0]
    }

    pub fn has_edge(&self, caller: FunctionId, callee: FunctionId) -> bool {
        caller != callee && self.callers[callee.0].contains(&caller)
    }
}

/// Parses every C-family file under `source_root` into a call graph.
/// `header_globs` are matched against paths relative to the root; a function
/// counts as extern-declared when an `extern` prototype of it appears in a
/// matching header.
pub fn build_call_graph(source_root: &Path, header_globs: &[String]) -> Result<CallGraph, CallGraphError> {
    let unreadable = |path: &Path, source| CallGraphError::UnreadableSource { path: path.to_path_buf(), source };
    let root_meta = fs::metadata(source_root).map_err(|e| unreadable(source_root, e))?;
    if !root_meta.is_dir() {
        return Err(unreadable(
            source_root,
            std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory"),
        ));
    }

    let mut builder = GlobSetBuilder::new();
    for g in header_globs {
        builder.add(Glob::new(g).map_err(|e| CallGraphError::BadGlob(g.clone(), e.to_string()))?);
    }
    let header_set = builder.build().map_err(|e| CallGraphError::BadGlob(header_globs.join(","), e.to_string()))?;

    let mut files = Vec::new();
    for entry in WalkDir::new(source_root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(source_root).to_path_buf();
            CallGraphError::UnreadableSource { path, source: e.into() }
        })?;
        let ext = entry.path().extension().and_then(|e| e.to_str()).unwrap_or("");
        if entry.file_type().is_file() && SOURCE_EXTENSIONS.contains(&ext) {
            files.push(entry.into_path());
        }
    }

    let mut parsed = Vec::new();
    let mut headers = BTreeSet::new();
    let mut header_protos = BTreeSet::new();
    let mut macros = BTreeSet::new();
    for path in &files {
        let bytes = fs::read(path).map_err(|e| unreadable(path, e))?;
        let text = String::from_utf8_lossy(&bytes);
        let rel = path.strip_prefix(source_root).unwrap_or(path).to_path_buf();
        let syntax = scan::analyze(scan::lex(&text));
        if header_set.is_match(&rel) {
            header_protos.extend(syntax.extern_prototypes.iter().cloned());
            headers.insert(rel.clone());
        }
        macros.extend(syntax.function_macros.iter().cloned());
        parsed.push((rel, syntax));
    }

    let mut functions = Vec::new();
    let mut is_static = Vec::new();
    for (rel, syntax) in &parsed {
        for def in &syntax.functions {
            let f = FunctionRef::new(def.name.clone(), rel.clone(), def.line.max(1))
                .with_end_line(def.end_line)
                .with_extern(!def.is_static && header_protos.contains(&def.name));
            functions.push(f);
            is_static.push(def.is_static);
        }
    }
    if functions.is_empty() {
        return Err(CallGraphError::NoFunctionsFound(source_root.to_path_buf()));
    }

    // name -> ids, for resolution: same file first, then any non-static.
    let mut by_name: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, f) in functions.iter().enumerate() {
        by_name.entry(f.name.as_str()).or_default().push(i);
    }
    let resolve = |name: &str, file: &Path| -> Option<usize> {
        let candidates = by_name.get(name)?;
        candidates
            .iter()
            .copied()
            .find(|&i| functions[i].file == file)
            .or_else(|| candidates.iter().copied().find(|&i| !is_static[i]))
    };

    let mut edges = Vec::new();
    let mut diagnostics = Vec::new();
    let mut next_id = 0;
    for (rel, syntax) in &parsed {
        for def in &syntax.functions {
            let caller = FunctionId(next_id);
            next_id += 1;
            for call in &def.calls {
                match call {
                    RawCall::Indirect { line } => diagnostics.push(UnresolvedCall {
                        caller,
                        file: rel.clone(),
                        line: *line,
                        kind: UnresolvedKind::Indirect,
                        callee: None,
                    }),
                    RawCall::Direct { name, line, after_member } => {
                        let kind = if *after_member {
                            Some(UnresolvedKind::Indirect)
                        } else if macros.contains(name) {
                            Some(UnresolvedKind::Macro)
                        } else {
                            None
                        };
                        match (kind, resolve(name, rel)) {
                            (None, Some(callee)) => edges.push(CallSite {
                                caller,
                                callee: FunctionId(callee),
                                file: rel.clone(),
                                line: *line,
                            }),
                            (kind, _) => diagnostics.push(UnresolvedCall {
                                caller,
                                file: rel.clone(),
                                line: *line,
                                kind: kind.unwrap_or(UnresolvedKind::External),
                                callee: Some(name.clone()),
                            }),
                        }
                    }
                }
            }
        }
    }

    let mut graph = CallGraph::new(functions, edges, headers)?;
    diagnostics.sort();
    graph.diagnostics = diagnostics;
    Ok(graph)
}

/// Ordered function sequence `(F_n, ..., F_1, F_0)` ending at the target.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CallChain {
    functions: Vec<FunctionRef>,
}

impl CallChain {
    /// Panics on an empty sequence or a repeated function.
    pub fn new(functions: Vec<FunctionRef>) -> Self {
        assert!(!functions.is_empty(), "a call chain has at least one function");
        let distinct: BTreeSet<_> = functions.iter().map(|f| (&f.name, &f.file)).collect();
        assert_eq!(distinct.len(), functions.len(), "call chains are simple paths");
        Self { functions }
    }

    pub fn functions(&self) -> &[FunctionRef] {
        &self.functions
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `F_n`, where the chain starts.
    pub fn start(&self) -> &FunctionRef {
        &self.functions[0]
    }

    /// `F_0`, the target.
    pub fn target(&self) -> &FunctionRef {
        self.functions.last().expect("non-empty chain")
    }

    pub fn names(&self) -> Vec<&str> {
        self.functions.iter().map(|f| f.name.as_str()).collect()
    }

    /// Adjacent `(caller, callee)` pairs in chain order.
    pub fn pairs(&self) -> impl Iterator<Item = (&FunctionRef, &FunctionRef)> {
        self.functions.windows(2).map(|w| (&w[0], &w[1]))
    }

    fn sort_key(&self) -> (usize, Vec<&str>, Vec<&Path>) {
        (self.len(), self.names(), self.functions.iter().map(|f| f.file.as_path()).collect())
    }
}

impl fmt::Display for CallChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.names().join(", "))
    }
}

/// Every simple path ending at `target` with at most `max_depth` functions
/// whose start is `main`, extern-declared, or has no callers. Returned in
/// canonical order: by length, then function names, then files.
pub fn enumerate_call_chains(
    graph: &CallGraph,
    target: &FunctionRef,
    max_depth: usize,
) -> Result<Vec<CallChain>, CallGraphError> {
    let target_id = graph.id_of(target).ok_or_else(|| CallGraphError::TargetNotInGraph(target.name.clone()))?;
    let mut chains = Vec::new();
    if max_depth == 0 {
        return Ok(chains);
    }

    let mut on_path = vec![false; graph.functions.len()];
    // Path is built backwards: path[0] = target, last = current start.
    let mut path = vec![target_id];
    on_path[target_id.0] = true;
    // Explicit DFS stack of (node, next caller index to try).
    let mut stack: Vec<(FunctionId, usize)> = vec![(target_id, 0)];
    emit_if_rooted(graph, &path, &mut chains);

    while let Some(&mut (node, ref mut next)) = stack.last_mut() {
        let callers = graph.callers_of(node);
        if path.len() < max_depth && *next < callers.len() {
            let caller = callers[*next];
            *next += 1;
            if on_path[caller.0] {
                continue;
            }
            on_path[caller.0] = true;
            path.push(caller);
            stack.push((caller, 0));
            emit_if_rooted(graph, &path, &mut chains);
        } else {
            stack.pop();
            if let Some(done) = path.pop() {
                on_path[done.0] = false;
            }
        }
    }

    chains.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(chains)
}

fn emit_if_rooted(graph: &CallGraph, reversed_path: &[FunctionId], out: &mut Vec<CallChain>) {
    let start = *reversed_path.last().expect("path holds the target");
    let f = graph.function(start);
    if f.is_main || f.is_extern_declared || graph.callers_of(start).is_empty() {
        let functions = reversed_path.iter().rev().map(|&id| graph.function(id).clone()).collect();
        out.push(CallChain::new(functions));
    }
}

/// Picks the available chain: the shortest chain starting at `main`, or if
/// there is none, the shortest chain starting at an extern-declared header
/// function. Equal-length candidates are ordered by their function names.
pub fn select_available_chain(chains: &[CallChain], graph: &CallGraph) -> Result<CallChain, CallGraphError> {
    let extern_declared = |f: &FunctionRef| {
        graph
            .id_of(f)
            .map_or(f.is_extern_declared, |id| graph.function(id).is_extern_declared)
    };
    let shortest = |pred: &dyn Fn(&CallChain) -> bool| {
        chains.iter().filter(|c| pred(c)).min_by(|a, b| a.sort_key().cmp(&b.sort_key())).cloned()
    };
    shortest(&|c| c.start().is_main)
        .or_else(|| shortest(&|c| extern_declared(c.start())))
        .ok_or(CallGraphError::NoAvailableChain)
}

/// Entry function and template source file for harness generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryPoint {
    pub entry: FunctionRef,
    pub template_file: PathBuf,
}

/// When the chain starts at `main`, `main` only serves as a template and the
/// entry is the function it calls; otherwise the start itself is the entry.
pub fn resolve_entry(chain: &CallChain) -> EntryPoint {
    let start = chain.start();
    let entry = if start.is_main && chain.len() >= 2 {
        chain.functions()[1].clone()
    } else {
        start.clone()
    };
    EntryPoint { entry, template_file: start.file.clone() }
}

/// First line of every function definition in a C-family source text.
pub fn function_start_lines(text: &str) -> Vec<u32> {
    scan::analyze(scan::lex(text)).functions.iter().map(|d| d.line.max(1)).collect()
}

/// Source text of a function definition, read from `source_root`.
pub fn function_source(source_root: &Path, f: &FunctionRef) -> Result<String, CallGraphError> {
    let path = source_root.join(&f.file);
    let text = fs::read_to_string(&path).map_err(|e| CallGraphError::UnreadableSource { path, source: e })?;
    let first = f.line.saturating_sub(1) as usize;
    let count = (f.end_line.max(f.line) - f.line + 1) as usize;
    let mut out: String = text.lines().skip(first).take(count).collect::<Vec<_>>().join("\n");
    out.push('\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tree(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in files {
            let path = dir.path().join(name);
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::File::create(path).unwrap().write_all(body.as_bytes()).unwrap();
        }
        dir
    }

    fn headers() -> Vec<String> {
        vec!["**/*.h".to_string()]
    }

    #[test]
    fn single_direct_call() {
        let dir = tree(&[("a.c", "void a(){b();} void b(){}")]);
        let g = build_call_graph(dir.path(), &headers()).unwrap();
        assert_eq!(g.functions.len(), 2);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.function(g.edges[0].caller).name, "a");
        assert_eq!(g.function(g.edges[0].callee).name, "b");
    }

    #[test]
    fn self_recursion_is_recorded_but_not_traversable() {
        let dir = tree(&[("f.c", "void f(){f();}")]);
        let g = build_call_graph(dir.path(), &headers()).unwrap();
        assert_eq!(g.functions.len(), 1);
        assert_eq!(g.edges.len(), 1);
        assert!(g.edges[0].is_self_call());
        assert_eq!(g.traversable_edges().count(), 0);
    }

    #[test]
    fn missing_root_and_empty_tree() {
        let missing = build_call_graph(Path::new("/nonexistent/dgf"), &headers());
        assert!(matches!(missing, Err(CallGraphError::UnreadableSource { .. })));
        let dir = tree(&[("x.c", "int x = 3;\n")]);
        assert!(matches!(build_call_graph(dir.path(), &headers()), Err(CallGraphError::NoFunctionsFound(_))));
    }

    #[test]
    fn unresolved_calls_become_diagnostics() {
        let dir = tree(&[(
            "u.c",
            "#define CALL(x) helper(x)\nvoid helper(int x){}\nvoid u(void (*fp)(void), struct s *p){\n\
             fp(); (*fp)(); p->go(); CALL(1); printf(\"x\"); helper(2);\n}\n",
        )]);
        let g = build_call_graph(dir.path(), &headers()).unwrap();
        assert_eq!(g.edges.len(), 1);
        let kinds: Vec<_> = g.diagnostics.iter().map(|d| (d.kind, d.callee.clone())).collect();
        assert!(kinds.contains(&(UnresolvedKind::Indirect, None)));
        assert!(kinds.contains(&(UnresolvedKind::Indirect, Some("go".into()))));
        assert!(kinds.contains(&(UnresolvedKind::Macro, Some("CALL".into()))));
        assert!(kinds.contains(&(UnresolvedKind::External, Some("printf".into()))));
        assert!(kinds.contains(&(UnresolvedKind::External, Some("fp".into()))));
    }

    #[test]
    fn extern_flag_comes_from_header_prototypes() {
        let dir = tree(&[
            ("api.h", "extern int api(int);\nint plain(int);\nstatic int hidden(int);\n"),
            ("lib.c", "int api(int x){return plain(x);}\nint plain(int x){return x;}\nint internal(void){return api(1);}\n"),
        ]);
        let g = build_call_graph(dir.path(), &headers()).unwrap();
        let flag = |n: &str| g.find(n)[0].is_extern_declared;
        assert!(flag("api"));
        assert!(!flag("plain"));
        assert!(!flag("internal"));
        // Glob that matches nothing: no function is extern.
        let g = build_call_graph(dir.path(), &["include/**/*.h".to_string()]).unwrap();
        assert!(g.functions.iter().all(|f| !f.is_extern_declared));
    }

    #[test]
    fn static_functions_resolve_within_their_file() {
        let dir = tree(&[
            ("a.c", "static int h(void){return 1;}\nint a(void){return h();}\n"),
            ("b.c", "static int h(void){return 2;}\nint b(void){return h();}\n"),
        ]);
        let g = build_call_graph(dir.path(), &headers()).unwrap();
        for e in &g.edges {
            assert_eq!(g.function(e.caller).file, g.function(e.callee).file);
        }
    }

    fn graph(names: &[(&str, bool)], edges: &[(usize, usize)]) -> CallGraph {
        let functions = names
            .iter()
            .enumerate()
            .map(|(i, (n, ext))| FunctionRef::new(*n, "g.c", i as u32 + 1).with_extern(*ext))
            .collect();
        let edges = edges
            .iter()
            .map(|&(a, b)| CallSite { caller: FunctionId(a), callee: FunctionId(b), file: "g.c".into(), line: 1 })
            .collect();
        CallGraph::new(functions, edges, BTreeSet::new()).unwrap()
    }

    fn chain_names(chains: &[CallChain]) -> Vec<Vec<&str>> {
        chains.iter().map(|c| c.names()).collect()
    }

    #[test]
    fn enumerate_small_exhaustive_case() {
        let g = graph(&[("a", false), ("b", true), ("c", false)], &[(0, 1), (1, 2)]);
        let chains = enumerate_call_chains(&g, g.function(FunctionId(2)), 8).unwrap();
        assert_eq!(chain_names(&chains), vec![vec!["b", "c"], vec!["a", "b", "c"]]);
    }

    #[test]
    fn enumerate_never_repeats_functions_on_cycles() {
        // a <-> b, b -> t, main -> a
        let g = graph(&[("a", false), ("b", false), ("t", false), ("main", false)], &[(0, 1), (1, 0), (1, 2), (3, 0)]);
        let chains = enumerate_call_chains(&g, g.function(FunctionId(2)), 12).unwrap();
        assert_eq!(chain_names(&chains), vec![vec!["main", "a", "b", "t"]]);
        for c in &chains {
            let set: BTreeSet<_> = c.names().into_iter().collect();
            assert_eq!(set.len(), c.len());
        }
    }

    #[test]
    fn enumerate_respects_depth_and_unknown_target() {
        let g = graph(&[("main", false), ("x", false), ("t", false)], &[(0, 1), (1, 2)]);
        let t = g.function(FunctionId(2)).clone();
        assert!(enumerate_call_chains(&g, &t, 2).unwrap().is_empty());
        assert_eq!(enumerate_call_chains(&g, &t, 3).unwrap().len(), 1);
        let stranger = FunctionRef::new("zz", "g.c", 1);
        assert!(matches!(enumerate_call_chains(&g, &stranger, 3), Err(CallGraphError::TargetNotInGraph(_))));
    }

    #[test]
    fn isolated_target_is_its_own_chain() {
        let g = graph(&[("t", false)], &[]);
        let chains = enumerate_call_chains(&g, g.function(FunctionId(0)), 4).unwrap();
        assert_eq!(chain_names(&chains), vec![vec!["t"]]);
    }

    #[test]
    fn select_prefers_shortest_main_rooted() {
        let g = graph(
            &[("main", false), ("f", false), ("g", false), ("h", false), ("t", false)],
            &[(0, 1), (1, 4), (0, 2), (2, 3), (3, 4)],
        );
        let chains = enumerate_call_chains(&g, g.function(FunctionId(4)), 12).unwrap();
        assert_eq!(select_available_chain(&chains, &g).unwrap().names(), vec!["main", "f", "t"]);
    }

    #[test]
    fn select_falls_back_to_extern_header_function() {
        let g = graph(&[("extern_api", true), ("internal_fn", false), ("t", false)], &[(0, 2), (1, 2)]);
        let chains = enumerate_call_chains(&g, g.function(FunctionId(2)), 12).unwrap();
        assert_eq!(chains.len(), 2);
        assert_eq!(select_available_chain(&chains, &g).unwrap().names(), vec!["extern_api", "t"]);
    }

    #[test]
    fn select_errors_without_candidates() {
        let g = graph(&[("internal_fn", false), ("t", false)], &[(0, 1)]);
        let chains = enumerate_call_chains(&g, g.function(FunctionId(1)), 12).unwrap();
        assert!(matches!(select_available_chain(&chains, &g), Err(CallGraphError::NoAvailableChain)));
        assert!(matches!(select_available_chain(&[], &g), Err(CallGraphError::NoAvailableChain)));
    }

    #[test]
    fn select_breaks_ties_by_names() {
        let g = graph(&[("main", false), ("zeta", false), ("alpha", false), ("t", false)], &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        let chains = enumerate_call_chains(&g, g.function(FunctionId(3)), 12).unwrap();
        let reversed: Vec<_> = chains.iter().rev().cloned().collect();
        assert_eq!(select_available_chain(&chains, &g).unwrap().names(), vec!["main", "alpha", "t"]);
        assert_eq!(select_available_chain(&reversed, &g).unwrap().names(), vec!["main", "alpha", "t"]);
    }

    #[test]
    fn resolve_entry_cases() {
        let main = FunctionRef::new("main", "main.c", 1);
        let parse = FunctionRef::new("parse", "parse.c", 3);
        let target = FunctionRef::new("target", "parse.c", 9);
        let ep = resolve_entry(&CallChain::new(vec![main, parse.clone(), target.clone()]));
        assert_eq!(ep.entry, parse);
        assert_eq!(ep.template_file, PathBuf::from("main.c"));

        let api = FunctionRef::new("extern_api", "api.c", 5).with_extern(true);
        let ep = resolve_entry(&CallChain::new(vec![api.clone(), target.clone()]));
        assert_eq!(ep.entry, api);
        assert_eq!(ep.template_file, PathBuf::from("api.c"));

        let ep = resolve_entry(&CallChain::new(vec![target.clone()]));
        assert_eq!(ep.entry, target);
    }

    #[test]
    fn function_source_extracts_definition_lines() {
        let dir = tree(&[("s.c", "int a(void)\n{\n  return 1;\n}\nint b(void) { return a(); }\n")]);
        let g = build_call_graph(dir.path(), &headers()).unwrap();
        let a = g.find("a")[0];
        assert_eq!(function_source(dir.path(), a).unwrap(), "int a(void)\n{\n  return 1;\n}\n");
    }
}
