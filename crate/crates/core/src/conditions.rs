//! Execution conditions along a call chain.
//!
//! Each adjacent pair of the chain is sent to the model with the caller's
//! source. The reply is a fenced JSON document naming the call line, the
//! decision variables and the constraints they must satisfy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::{CallChain, FunctionRef};
use crate::gateway::{extract_fenced, Gateway, GatewayError, TemplateName};

pub const DEFAULT_MAX_REASKS: u32 = 3;

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("malformed condition response after {attempts} attempt(s): {reason}")]
    MalformedResponse { attempts: u32, reason: String },
    #[error("{caller} does not call {callee}")]
    CallNotFound { caller: String, callee: String },
    #[error("no source for {0}")]
    MissingSource(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("edge {caller} -> {callee}: {source}")]
    Edge { caller: String, callee: String, source: Box<ConditionError> },
    #[error("invalid condition set: {0}")]
    InvalidSet(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Equality,
    Inequality,
    Range,
    Membership,
    Predicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableOrigin {
    Parameter,
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub variable: String,
    pub kind: ConstraintKind,
    pub expression: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionVariable {
    pub name: String,
    pub origin: VariableOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallLocation {
    pub line: u32,
    pub snippet: String,
}

/// The document the model replies with for one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionResponse {
    pub call_location: CallLocation,
    pub decision_variables: Vec<DecisionVariable>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallEdgeCondition {
    pub caller: FunctionRef,
    pub callee: FunctionRef,
    pub call_line: u32,
    pub snippet: String,
    pub decision_variables: Vec<DecisionVariable>,
    pub constraints: Vec<Constraint>,
}

impl CallEdgeCondition {
    pub fn from_response(caller: FunctionRef, callee: FunctionRef, r: ConditionResponse) -> Self {
        Self {
            caller,
            callee,
            call_line: r.call_location.line,
            snippet: r.call_location.snippet,
            decision_variables: r.decision_variables,
            constraints: r.constraints,
        }
    }

    pub fn to_response(&self) -> ConditionResponse {
        ConditionResponse {
            call_location: CallLocation { line: self.call_line, snippet: self.snippet.clone() },
            decision_variables: self.decision_variables.clone(),
            constraints: self.constraints.clone(),
        }
    }

    /// Checks every type invariant.
    pub fn validate(&self) -> Result<(), String> {
        validate_response(&self.to_response())
    }
}

impl fmt::Display for CallEdgeCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {} (line {})", self.caller.name, self.callee.name, self.call_line)?;
        if self.constraints.is_empty() {
            return write!(f, ": unconditional");
        }
        let exprs: Vec<&str> = self.constraints.iter().map(|c| c.expression.as_str()).collect();
        write!(f, ": {}", exprs.join(" && "))
    }
}

/// One edge condition per adjacent chain pair, in chain order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSet {
    pub chain: CallChain,
    pub edges: Vec<CallEdgeCondition>,
}

impl ConditionSet {
    pub fn validate(&self) -> Result<(), ConditionError> {
        let bad = |m: String| Err(ConditionError::InvalidSet(m));
        if self.edges.len() + 1 != self.chain.len() {
            return bad(format!("{} edges for a chain of {} functions", self.edges.len(), self.chain.len()));
        }
        for (i, ((caller, callee), edge)) in self.chain.pairs().zip(&self.edges).enumerate() {
            if &edge.caller != caller || &edge.callee != callee {
                return bad(format!(
                    "edge {i} is {} -> {}, chain has {} -> {}",
                    edge.caller.name, edge.callee.name, caller.name, callee.name
                ));
            }
            edge.validate().or_else(|e| bad(format!("edge {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("condition sets serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, ConditionError> {
        let set: Self = serde_json::from_str(text).map_err(|e| ConditionError::InvalidSet(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    /// All constraints as text, one edge per line. Used in later prompts.
    pub fn summary(&self) -> String {
        if self.edges.is_empty() {
            return "(the entry function is the target; no call conditions)".into();
        }
        self.edges.iter().map(|e| format!("- {e}")).collect::<Vec<_>>().join("\n")
    }
}

fn identifier_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*(?:(?:->|\.)[A-Za-z_][A-Za-z0-9_]*|\[[^\[\]]+\])*$").unwrap()
    })
}

/// Returns the first invariant violation of a response document.
pub fn validate_response(r: &ConditionResponse) -> Result<(), String> {
    if r.call_location.line < 1 {
        return Err("call_location.line must be >= 1".into());
    }
    let mut names = BTreeSet::new();
    for v in &r.decision_variables {
        if !identifier_re().is_match(&v.name) {
            return Err(format!("decision variable {:?} is not an identifier", v.name));
        }
        if !names.insert(v.name.as_str()) {
            return Err(format!("decision variable {:?} listed twice", v.name));
        }
    }
    for (i, c) in r.constraints.iter().enumerate() {
        if c.expression.trim().is_empty() {
            return Err(format!("constraint {i} has an empty expression"));
        }
        if !names.contains(c.variable.as_str()) {
            return Err(format!("constraint {i} uses undeclared variable {:?}", c.variable));
        }
        match (c.kind, c.bounds) {
            (ConstraintKind::Range, None) => return Err(format!("range constraint {i} has no bounds")),
            (_, Some((lo, hi))) if !(lo.is_finite() && hi.is_finite()) => {
                return Err(format!("constraint {i} has non-finite bounds"))
            }
            (_, Some((lo, hi))) if lo > hi => return Err(format!("constraint {i} has low {lo} > high {hi}")),
            _ => {}
        }
    }
    Ok(())
}

/// Parses a raw model reply for the edge `caller -> callee`.
pub fn parse_condition_response(
    text: &str,
    caller: &FunctionRef,
    callee: &FunctionRef,
) -> Result<CallEdgeCondition, String> {
    let body = extract_fenced(text, &["json"]).ok_or("reply has no fenced JSON block")?;
    let doc: ConditionResponse = serde_json::from_str(&body).map_err(|e| format!("schema violation: {e}"))?;
    validate_response(&doc)?;
    Ok(CallEdgeCondition::from_response(caller.clone(), callee.clone(), doc))
}

/// Canonical fenced rendering of one edge, as the model is asked to reply.
pub fn serialize_condition_response(edge: &CallEdgeCondition) -> String {
    let json = serde_json::to_string_pretty(&edge.to_response()).expect("responses serialize");
    format!("```json\n{json}\n```\n")
}

/// Source files keyed by path relative to the source root.
pub type SourceMap = BTreeMap<PathBuf, String>;

/// Reads every file defining a function of `chain`.
pub fn load_sources(root: &Path, chain: &CallChain) -> Result<SourceMap, ConditionError> {
    let mut map = SourceMap::new();
    for f in chain.functions() {
        if map.contains_key(&f.file) {
            continue;
        }
        let path = root.join(&f.file);
        let text = std::fs::read_to_string(&path).map_err(|source| ConditionError::Io { path, source })?;
        map.insert(f.file.clone(), text);
    }
    Ok(map)
}

/// Lines `f.line..=f.end_line` of its file, prefixed with line numbers.
pub fn numbered_source(sources: &SourceMap, f: &FunctionRef) -> Result<String, ConditionError> {
    let text = sources.get(&f.file).ok_or_else(|| ConditionError::MissingSource(f.file.clone()))?;
    let first = f.line as usize;
    let last = f.end_line.max(f.line) as usize;
    let width = last.to_string().len();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate().skip(first - 1).take(last - first + 1) {
        out.push_str(&format!("{:>width$}| {line}\n", i + 1));
    }
    Ok(out)
}

fn calls(source: &str, callee: &str) -> bool {
    Regex::new(&format!(r"\b{}\s*\(", regex::escape(callee))).unwrap().is_match(source)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalyzeOptions {
    pub max_reasks: u32,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self { max_reasks: DEFAULT_MAX_REASKS }
    }
}

/// Context shared by every edge of one chain.
pub struct EdgeContext<'a> {
    pub chain: &'a CallChain,
    pub prior: &'a [CallEdgeCondition],
}

/// Asks the model for the conditions of one call edge. Malformed replies are
/// re-asked with the violation quoted back, up to `opts.max_reasks` times.
pub fn analyze_edge(
    caller_source: &str,
    caller: &FunctionRef,
    callee: &FunctionRef,
    ctx: &EdgeContext<'_>,
    gateway: &Gateway,
    opts: AnalyzeOptions,
) -> Result<CallEdgeCondition, ConditionError> {
    if !calls(caller_source, &callee.name) {
        return Err(ConditionError::CallNotFound { caller: caller.name.clone(), callee: callee.name.clone() });
    }
    let prior = if ctx.prior.is_empty() {
        "(none)".to_string()
    } else {
        ctx.prior.iter().map(|e| format!("- {e}")).collect::<Vec<_>>().join("\n")
    };
    let mut feedback = String::new();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let slots = crate::gateway::slots([
            ("caller_name", caller.name.clone()),
            ("callee_name", callee.name.clone()),
            ("caller_file", caller.file.display().to_string()),
            ("caller_source", caller_source.trim_end().to_string()),
            ("call_chain", ctx.chain.to_string()),
            ("prior_conditions", prior.clone()),
            ("feedback", feedback.clone()),
        ]);
        let reply = gateway.ask(TemplateName::ConditionAnalysis, &format!("{}->{}", caller.name, callee.name), &slots)?;
        let reason = match parse_condition_response(&reply, caller, callee) {
            Ok(edge) if caller.end_line > caller.line && !(caller.line..=caller.end_line).contains(&edge.call_line) => {
                format!(
                    "call_location.line {} is outside {} (lines {}-{})",
                    edge.call_line, caller.name, caller.line, caller.end_line
                )
            }
            Ok(edge) => return Ok(edge),
            Err(reason) => reason,
        };
        log::warn!("condition reply for {} -> {} rejected: {reason}", caller.name, callee.name);
        if attempts > opts.max_reasks {
            return Err(ConditionError::MalformedResponse { attempts, reason });
        }
        feedback = format!(
            "\n## Previous reply rejected\nYour previous reply was rejected: {reason}\nReply again with one fenced JSON object that follows the format exactly."
        );
    }
}

/// Analyzes every adjacent pair of `chain` in order.
pub fn analyze_chain(
    chain: &CallChain,
    sources: &SourceMap,
    gateway: &Gateway,
    opts: AnalyzeOptions,
) -> Result<ConditionSet, ConditionError> {
    let mut edges: Vec<CallEdgeCondition> = Vec::with_capacity(chain.len().saturating_sub(1));
    for (caller, callee) in chain.pairs() {
        let annotate = |e: ConditionError| ConditionError::Edge {
            caller: caller.name.clone(),
            callee: callee.name.clone(),
            source: Box::new(e),
        };
        let src = numbered_source(sources, caller).map_err(annotate)?;
        let ctx = EdgeContext { chain, prior: &edges };
        let edge = analyze_edge(&src, caller, callee, &ctx, gateway, opts).map_err(annotate)?;
        edges.push(edge);
    }
    let set = ConditionSet { chain: chain.clone(), edges };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptRule, ScriptedBackend};
    use proptest::prelude::*;
    use serde_json::{json, Value};

    fn f(name: &str, line: u32, end: u32) -> FunctionRef {
        FunctionRef::new(name, "x.c", line).with_end_line(end)
    }

    fn fenced(v: &Value) -> String {
        format!("Here you go:\n```json\n{}\n```\n", serde_json::to_string_pretty(v).unwrap())
    }

    fn minimal() -> Value {
        json!({
            "call_location": {"line": 3, "snippet": "if (c == 'P') g();"},
            "decision_variables": [{"name": "c", "origin": "local"}],
            "constraints": [{"variable": "c", "kind": "equality", "expression": "c == 'P'"}]
        })
    }

    #[test]
    fn minimal_equality_parses() {
        let e = parse_condition_response(&fenced(&minimal()), &f("a", 1, 5), &f("g", 7, 9)).unwrap();
        assert_eq!(e.constraints.len(), 1);
        assert_eq!(e.constraints[0].kind, ConstraintKind::Equality);
        assert_eq!(e.call_line, 3);
        assert_eq!(e.callee.name, "g");
    }

    #[test]
    fn undeclared_variable_is_rejected() {
        let mut v = minimal();
        v["constraints"][0]["variable"] = json!("d");
        let err = parse_condition_response(&fenced(&v), &f("a", 1, 5), &f("g", 7, 9)).unwrap_err();
        assert!(err.contains("undeclared"), "{err}");
    }

    #[test]
    fn schema_violations_are_rejected() {
        let cases: Vec<Box<dyn Fn(&mut Value)>> = vec![
            Box::new(|v| v["extra"] = json!(1)),
            Box::new(|v| v["constraints"][0]["kind"] = json!("approx")),
            Box::new(|v| v["constraints"][0]["kind"] = json!("range")),
            Box::new(|v| {
                v["constraints"][0]["kind"] = json!("range");
                v["constraints"][0]["bounds"] = json!([5, 1]);
            }),
            Box::new(|v| v["constraints"][0]["expression"] = json!("  ")),
            Box::new(|v| v["call_location"]["line"] = json!(0)),
            Box::new(|v| v["decision_variables"][0]["origin"] = json!("heap")),
            Box::new(|v| v["decision_variables"][0]["name"] = json!("not an ident")),
            Box::new(|v| {
                v["decision_variables"].as_array_mut().unwrap().push(json!({"name": "c", "origin": "global"}))
            }),
            Box::new(|v| {
                v.as_object_mut().unwrap().remove("constraints");
            }),
        ];
        for (i, mutate) in cases.iter().enumerate() {
            let mut v = minimal();
            mutate(&mut v);
            assert!(parse_condition_response(&fenced(&v), &f("a", 1, 5), &f("g", 7, 9)).is_err(), "case {i}");
        }
        assert!(parse_condition_response(&serde_json::to_string(&minimal()).unwrap(), &f("a", 1, 5), &f("g", 7, 9))
            .is_err());
    }

    #[test]
    fn range_with_bounds_and_member_paths() {
        let v = json!({
            "call_location": {"line": 2, "snippet": "x"},
            "decision_variables": [{"name": "source->maxval", "origin": "local"}, {"name": "buf[4]", "origin": "parameter"}],
            "constraints": [
                {"variable": "source->maxval", "kind": "range", "expression": "1 <= maxval && maxval <= 254", "bounds": [1, 254]},
                {"variable": "buf[4]", "kind": "membership", "expression": "buf[4] in {0xEE}"}
            ]
        });
        let e = parse_condition_response(&fenced(&v), &f("a", 1, 5), &f("g", 7, 9)).unwrap();
        assert_eq!(e.constraints[0].bounds, Some((1.0, 254.0)));
    }

    fn chain3() -> CallChain {
        CallChain::new(vec![
            FunctionRef::new("main", "m.c", 1).with_end_line(4),
            FunctionRef::new("f", "m.c", 6).with_end_line(9),
            FunctionRef::new("t", "m.c", 11).with_end_line(12),
        ])
    }

    fn chain3_sources() -> SourceMap {
        let text = "int main(int argc, char **argv) {\n    if (argc > 1) f(argv[1]);\n    return 0;\n}\n\nvoid f(const char *p) {\n    if (p[0] == 'P')\n        t();\n}\n\nvoid t(void) {\n}\n";
        SourceMap::from([(PathBuf::from("m.c"), text.to_string())])
    }

    fn edge_reply(line: u32, var: &str, expr: &str) -> String {
        fenced(&json!({
            "call_location": {"line": line, "snippet": "call"},
            "decision_variables": [{"name": var, "origin": "parameter"}],
            "constraints": [{"variable": var, "kind": "predicate", "expression": expr}]
        }))
    }

    #[test]
    fn chain_yields_one_edge_per_pair_in_order() {
        let backend = ScriptedBackend::new(vec![
            ScriptRule::new(TemplateName::ConditionAnalysis, vec![edge_reply(2, "argc", "argc > 1")]).tag("main->f"),
            ScriptRule::new(TemplateName::ConditionAnalysis, vec![edge_reply(8, "p[0]", "p[0] == 'P'")]).tag("f->t"),
        ]);
        let gw = Gateway::live(backend.clone());
        let set = analyze_chain(&chain3(), &chain3_sources(), &gw, AnalyzeOptions::default()).unwrap();
        assert_eq!(set.edges.len(), 2);
        assert_eq!((set.edges[0].caller.name.as_str(), set.edges[0].callee.name.as_str()), ("main", "f"));
        assert_eq!((set.edges[1].caller.name.as_str(), set.edges[1].callee.name.as_str()), ("f", "t"));
        let calls = backend.calls();
        assert!(calls[0].prompt.contains("2|     if (argc > 1) f(argv[1]);"));
        assert!(calls[0].prompt.contains("(none)"));
        assert!(calls[1].prompt.contains("argc > 1"), "later edges see earlier conditions");
        assert_eq!(ConditionSet::from_json(&set.to_json()).unwrap(), set);
    }

    #[test]
    fn single_function_chain_has_no_edges() {
        let chain = CallChain::new(vec![FunctionRef::new("t", "m.c", 11)]);
        let gw = Gateway::live(ScriptedBackend::new(vec![]));
        let set = analyze_chain(&chain, &chain3_sources(), &gw, AnalyzeOptions::default()).unwrap();
        assert!(set.edges.is_empty());
        assert_eq!(gw.call_count(), 0);
    }

    #[test]
    fn unconditional_call_gives_empty_lists() {
        let reply = fenced(&json!({
            "call_location": {"line": 1, "snippet": "g();"},
            "decision_variables": [],
            "constraints": []
        }));
        let gw = Gateway::live(ScriptedBackend::new(vec![ScriptRule::new(TemplateName::ConditionAnalysis, vec![reply])]));
        let caller = FunctionRef::new("f", "u.c", 1);
        let callee = FunctionRef::new("g", "u.c", 2);
        let chain = CallChain::new(vec![caller.clone(), callee.clone()]);
        let ctx = EdgeContext { chain: &chain, prior: &[] };
        let e = analyze_edge("void f(){ g(); }", &caller, &callee, &ctx, &gw, AnalyzeOptions::default()).unwrap();
        assert!(e.constraints.is_empty() && e.decision_variables.is_empty());
    }

    #[test]
    fn missing_call_is_reported() {
        let gw = Gateway::live(ScriptedBackend::new(vec![]));
        let caller = FunctionRef::new("f", "u.c", 1);
        let callee = FunctionRef::new("g", "u.c", 2);
        let chain = CallChain::new(vec![caller.clone(), callee.clone()]);
        let ctx = EdgeContext { chain: &chain, prior: &[] };
        let err = analyze_edge("void f(){ gg(); }", &caller, &callee, &ctx, &gw, AnalyzeOptions::default()).unwrap_err();
        assert!(matches!(err, ConditionError::CallNotFound { .. }));
    }

    #[test]
    fn reasks_are_bounded_and_carry_the_error() {
        let backend = ScriptedBackend::new(vec![ScriptRule::new(TemplateName::ConditionAnalysis, vec!["nope".into()])]);
        let gw = Gateway::live(backend.clone());
        let caller = FunctionRef::new("f", "u.c", 1);
        let callee = FunctionRef::new("g", "u.c", 2);
        let chain = CallChain::new(vec![caller.clone(), callee.clone()]);
        let ctx = EdgeContext { chain: &chain, prior: &[] };
        let err = analyze_edge("g();", &caller, &callee, &ctx, &gw, AnalyzeOptions::default()).unwrap_err();
        assert!(matches!(err, ConditionError::MalformedResponse { attempts: 4, .. }));
        assert_eq!(backend.call_count(), 1 + DEFAULT_MAX_REASKS as usize);
        let calls = backend.calls();
        assert!(!calls[0].prompt.contains("Previous reply rejected"));
        assert!(calls[1].prompt.contains("no fenced JSON block"));
    }

    #[test]
    fn reask_recovers_and_out_of_range_line_is_rejected() {
        let backend = ScriptedBackend::new(vec![ScriptRule::new(
            TemplateName::ConditionAnalysis,
            vec![edge_reply(40, "p", "p != 0"), edge_reply(7, "p", "p != 0")],
        )]);
        let gw = Gateway::live(backend.clone());
        let chain = chain3();
        let (caller, callee) = (&chain.functions()[1], &chain.functions()[2]);
        let ctx = EdgeContext { chain: &chain, prior: &[] };
        let src = numbered_source(&chain3_sources(), caller).unwrap();
        let e = analyze_edge(&src, caller, callee, &ctx, &gw, AnalyzeOptions::default()).unwrap();
        assert_eq!(e.call_line, 7);
        assert_eq!(backend.call_count(), 2);
        assert!(backend.calls()[1].prompt.contains("outside f"));
    }

    #[test]
    fn set_validation_catches_count_and_order() {
        let chain = chain3();
        let mk = |a: &FunctionRef, b: &FunctionRef| CallEdgeCondition {
            caller: a.clone(),
            callee: b.clone(),
            call_line: 2,
            snippet: String::new(),
            decision_variables: vec![],
            constraints: vec![],
        };
        let fs = chain.functions();
        let ok = ConditionSet { chain: chain.clone(), edges: vec![mk(&fs[0], &fs[1]), mk(&fs[1], &fs[2])] };
        assert!(ok.validate().is_ok());
        let swapped = ConditionSet { chain: chain.clone(), edges: vec![mk(&fs[1], &fs[2]), mk(&fs[0], &fs[1])] };
        assert!(swapped.validate().is_err());
        let short = ConditionSet { chain: chain.clone(), edges: vec![mk(&fs[0], &fs[1])] };
        assert!(short.validate().is_err());
    }

    fn arb_ident() -> impl Strategy<Value = String> {
        prop_oneof![
            "[a-z_][a-z0-9_]{0,7}",
            "[a-z][a-z0-9]{0,4}->[a-z][a-z0-9_]{0,5}",
            "[a-z][a-z0-9]{0,4}\\[[0-9]{1,2}\\]",
        ]
    }

    fn arb_doc() -> impl Strategy<Value = Value> {
        let origin = prop_oneof![Just("parameter"), Just("global"), Just("local")];
        (1u32..5000, ".{0,40}", proptest::collection::btree_map(arb_ident(), origin, 0..5))
            .prop_flat_map(|(line, snippet, vars)| {
                let names: Vec<String> = vars.keys().cloned().collect();
                let constraint = if names.is_empty() {
                    Just(Vec::<Value>::new()).boxed()
                } else {
                    let kind = prop_oneof![
                        Just("equality"),
                        Just("inequality"),
                        Just("range"),
                        Just("membership"),
                        Just("predicate")
                    ];
                    let one = (proptest::sample::select(names), kind, "[ -~]{1,30}", -1.0e6f64..1.0e6, 0.0f64..1.0e6)
                        .prop_map(|(var, kind, expr, lo, span)| {
                            let expr = if expr.trim().is_empty() { format!("{var} != 0") } else { expr };
                            let mut c = json!({"variable": var, "kind": kind, "expression": expr});
                            if kind == "range" {
                                c["bounds"] = json!([lo, lo + span]);
                            }
                            c
                        });
                    proptest::collection::vec(one, 0..6).boxed()
                };
                let vars: Vec<Value> = vars.into_iter().map(|(n, o)| json!({"name": n, "origin": o})).collect();
                constraint.prop_map(move |cs| {
                    json!({
                        "call_location": {"line": line, "snippet": snippet.clone()},
                        "decision_variables": vars.clone(),
                        "constraints": cs
                    })
                })
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn serialize_parse_round_trip(doc in arb_doc(), compact in any::<bool>()) {
            let text = if compact { serde_json::to_string(&doc).unwrap() } else { serde_json::to_string_pretty(&doc).unwrap() };
            let reply = format!("```json\n{text}\n```");
            let e = parse_condition_response(&reply, &f("a", 1, 1), &f("b", 2, 2)).unwrap();
            let out = serialize_condition_response(&e);
            let reparsed: Value = serde_json::from_str(&extract_fenced(&out, &["json"]).unwrap()).unwrap();
            prop_assert_eq!(&reparsed, &doc);
            let e2 = parse_condition_response(&out, &f("a", 1, 1), &f("b", 2, 2)).unwrap();
            prop_assert_eq!(serialize_condition_response(&e2), out);
        }
    }

    fn mutate(v: &mut Value, choice: u8, pick: usize) {
        match choice % 8 {
            0 => {
                if let Some(o) = v.as_object_mut() {
                    let keys: Vec<String> = o.keys().cloned().collect();
                    if !keys.is_empty() {
                        o.remove(&keys[pick % keys.len()]);
                    }
                }
            }
            1 => v["call_location"]["line"] = json!(pick as i64 - 3),
            2 => {
                if let Some(cs) = v["constraints"].as_array_mut() {
                    if !cs.is_empty() {
                        let n = cs.len();
                        cs[pick % n]["variable"] = json!("ghost");
                    }
                }
            }
            3 => {
                if let Some(cs) = v["constraints"].as_array_mut() {
                    if !cs.is_empty() {
                        let n = cs.len();
                        cs[pick % n]["kind"] = json!("range");
                        if pick.is_multiple_of(2) {
                            cs[pick % n].as_object_mut().unwrap().remove("bounds");
                        } else {
                            cs[pick % n]["bounds"] = json!([10, -10]);
                        }
                    }
                }
            }
            4 => {
                if let Some(ds) = v["decision_variables"].as_array_mut() {
                    if !ds.is_empty() {
                        ds.remove(pick % ds.len());
                    }
                }
            }
            5 => v["decision_variables"] = json!("oops"),
            6 => {
                if let Some(cs) = v["constraints"].as_array_mut() {
                    if !cs.is_empty() {
                        let n = cs.len();
                        cs[pick % n]["expression"] = json!("");
                    }
                }
            }
            _ => v["surplus"] = json!(pick),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn mutated_documents_never_yield_invalid_values(
            doc in arb_doc(),
            ops in proptest::collection::vec((any::<u8>(), any::<usize>()), 1..4),
            byte_edit in proptest::option::of((any::<usize>(), any::<u8>())),
        ) {
            let mut v = doc;
            for (c, p) in ops {
                mutate(&mut v, c, p);
            }
            let mut text = serde_json::to_string(&v).unwrap().into_bytes();
            if let Some((at, b)) = byte_edit {
                if !text.is_empty() {
                    let n = text.len();
                    text[at % n] = b;
                }
            }
            let text = String::from_utf8_lossy(&text);
            if let Ok(e) = parse_condition_response(&format!("```json\n{text}\n```"), &f("a", 1, 1), &f("b", 2, 2)) {
                prop_assert!(e.validate().is_ok());
                prop_assert!(e.call_line >= 1);
                for c in &e.constraints {
                    prop_assert!(!c.expression.trim().is_empty());
                    prop_assert!(e.decision_variables.iter().any(|d| d.name == c.variable));
                    if c.kind == ConstraintKind::Range {
                        let (lo, hi) = c.bounds.unwrap();
                        prop_assert!(lo <= hi);
                    }
                }
            }
        }
    }
}
