//! Reachable seed synthesis: the model writes a Python script that builds
//! the input, the script runs sandboxed, and a coverage trace of the
//! instrumented harness decides whether the target was reached.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::CallChain;
use crate::conditions::ConditionSet;
use crate::gateway::{extract_fenced, slots, Gateway, GatewayError, TemplateName};
use crate::harness::HarnessArtifact;
use crate::sandbox::{run_script, SandboxConfig, SandboxError};
use crate::trace::{trace_bytes, ExecLimits, ExitKind, SymbolMap, TraceError};

pub const SCRIPT_LANGUAGE: &str = "python-script";
pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, Error)]
pub enum InputGenError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("cannot execute the harness: {0}")]
    ExecFailure(#[from] TraceError),
    #[error("no reachable input after {} attempt(s)", .history.len())]
    ReachabilityExhausted { history: Vec<AttemptRecord> },
    #[error("max_attempts must be at least 1")]
    ZeroAttempts,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedScript {
    pub language_tag: String,
    pub body: String,
    pub attempt: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageTrace {
    pub functions_hit: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lines_hit: Option<BTreeSet<(String, u32)>>,
}

impl CoverageTrace {
    pub fn contains(&self, function: &str) -> bool {
        self.functions_hit.contains(function)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedInput {
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
    pub producer: SeedScript,
    pub verified_reachable: bool,
    pub trace: CoverageTrace,
    /// The seed already crashes inside the target.
    pub exploit: bool,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// What went wrong with one attempt, fed into the next prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    /// Deepest chain function the trace contains.
    pub deepest: Option<String>,
    /// Index of the first chain edge whose call did not happen.
    pub unmet_edge: Option<usize>,
    /// Script failure, when the script itself did not produce an input.
    pub script_error: Option<String>,
}

impl AttemptRecord {
    fn from_trace(attempt: u32, chain: &CallChain, trace: &CoverageTrace) -> Self {
        let (deepest, unmet_edge) = deepest_reached(chain, trace);
        Self { attempt, deepest, unmet_edge, script_error: None }
    }

    /// Feedback paragraph for the retry prompt.
    pub fn feedback(&self, chain: &CallChain) -> String {
        let mut out = format!("\n## Previous attempt {} failed\n", self.attempt);
        if let Some(err) = &self.script_error {
            out.push_str(&format!("The script did not produce an input: {err}\n"));
        } else {
            match &self.deepest {
                Some(f) => out.push_str(&format!("The input reached `{f}` but went no deeper.\n")),
                None => out.push_str("The input reached none of the chain functions.\n"),
            }
            if let Some(i) = self.unmet_edge {
                let names = chain.names();
                if i + 1 < names.len() {
                    out.push_str(&format!(
                        "Unmet condition: edge {} (`{}` -> `{}`) was not taken; revisit its constraints.\n",
                        i,
                        names[i],
                        names[i + 1]
                    ));
                }
            }
        }
        out.push_str("Write a corrected script.");
        out
    }
}

/// Deepest chain function present in `trace` and the index of the edge
/// leaving it. With no chain function hit, edge 0 is unmet.
pub fn deepest_reached(chain: &CallChain, trace: &CoverageTrace) -> (Option<String>, Option<usize>) {
    let names = chain.names();
    match names.iter().rposition(|n| trace.contains(n)) {
        Some(i) if i + 1 == names.len() => (Some(names[i].to_string()), None),
        Some(i) => (Some(names[i].to_string()), Some(i)),
        None => (None, (!names.is_empty()).then_some(0)),
    }
}

/// Asks for a seed-building script. `feedback` summarizes the previous
/// failed attempt.
pub fn generate_seed_script(
    conditions: &ConditionSet,
    harness_source: &str,
    gateway: &Gateway,
    feedback: Option<&AttemptRecord>,
    attempt: u32,
) -> Result<SeedScript, InputGenError> {
    let chain = &conditions.chain;
    let s = slots([
        ("target_function", chain.target().name.clone()),
        ("call_chain", chain.to_string()),
        ("execution_conditions", conditions.summary()),
        ("harness_source", harness_source.trim_end().to_string()),
        ("feedback", feedback.map(|f| f.feedback(chain)).unwrap_or_default()),
    ]);
    let reply = gateway.ask(TemplateName::InputGeneration, &format!("attempt-{attempt}"), &s)?;
    let body = extract_fenced(&reply, &["python", "py", "python3"]).unwrap_or(reply);
    Ok(SeedScript { language_tag: SCRIPT_LANGUAGE.into(), body, attempt: attempt.max(1) })
}

/// Runs the script in the sandbox and returns the bytes it produced.
pub fn execute_seed_script(script: &SeedScript, cfg: &SandboxConfig) -> Result<Vec<u8>, SandboxError> {
    Ok(run_script(&script.body, cfg)?.bytes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub reachable: bool,
    pub trace: CoverageTrace,
    pub exit: ExitKind,
    /// The run crashed after reaching the target.
    pub exploit: bool,
}

/// Runs the instrumented harness on `input` and checks that `target` was
/// entered. Crashes are not errors.
pub fn verify_reachability(
    harness: &HarnessArtifact,
    symbols: &SymbolMap,
    input: &[u8],
    target: &str,
    limits: ExecLimits,
) -> Result<Verification, InputGenError> {
    let run = trace_bytes(&harness.binary, symbols, input, limits)?;
    let trace = CoverageTrace { functions_hit: run.functions, lines_hit: None };
    let reachable = trace.contains(target);
    let exit = run.outcome.exit;
    Ok(Verification { reachable, exploit: reachable && exit.is_crash(), trace, exit })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputLimits {
    pub max_attempts: u32,
    pub exec: ExecLimits,
}

impl Default for InputLimits {
    fn default() -> Self {
        Self { max_attempts: DEFAULT_MAX_ATTEMPTS, exec: ExecLimits::default() }
    }
}

/// Generate, execute and verify until an input reaches the target.
pub fn reachable_input_loop(
    conditions: &ConditionSet,
    harness: &HarnessArtifact,
    gateway: &Gateway,
    sandbox: &SandboxConfig,
    limits: InputLimits,
) -> Result<SeedInput, InputGenError> {
    if limits.max_attempts == 0 {
        return Err(InputGenError::ZeroAttempts);
    }
    let symbols = SymbolMap::from_binary(&harness.binary)?;
    let chain = &conditions.chain;
    let target = &chain.target().name;
    let mut history: Vec<AttemptRecord> = Vec::new();
    for attempt in 1..=limits.max_attempts {
        let script = generate_seed_script(conditions, &harness.source, gateway, history.last(), attempt)?;
        let bytes = match execute_seed_script(&script, sandbox) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("seed script attempt {attempt} failed: {e}");
                history.push(AttemptRecord {
                    attempt,
                    deepest: None,
                    unmet_edge: None,
                    script_error: Some(e.to_string()),
                });
                continue;
            }
        };
        let v = verify_reachability(harness, &symbols, &bytes, target, limits.exec)?;
        if v.reachable {
            log::info!("attempt {attempt} reached {target}{}", if v.exploit { " and crashed" } else { "" });
            return Ok(SeedInput { bytes, producer: script, verified_reachable: true, trace: v.trace, exploit: v.exploit });
        }
        let record = AttemptRecord::from_trace(attempt, chain, &v.trace);
        log::info!("attempt {attempt} stopped at {:?}", record.deepest);
        history.push(record);
    }
    Err(InputGenError::ReachabilityExhausted { history })
}

pub const SEED_FILE: &str = "seed.bin";
pub const SCRIPT_FILE: &str = "seed_script.py";
pub const TRACE_FILE: &str = "trace.json";
pub const SEED_META_FILE: &str = "seed.json";

/// Writes the seed bytes, its script, its trace and metadata into `dir`.
pub fn persist_seed(seed: &SeedInput, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(SEED_FILE), &seed.bytes)?;
    std::fs::write(dir.join(SCRIPT_FILE), &seed.producer.body)?;
    std::fs::write(dir.join(TRACE_FILE), serde_json::to_string_pretty(&seed.trace)? + "\n")?;
    std::fs::write(dir.join(SEED_META_FILE), serde_json::to_string_pretty(seed)? + "\n")?;
    Ok(())
}

pub fn load_seed(dir: &Path) -> std::io::Result<SeedInput> {
    let text = std::fs::read_to_string(dir.join(SEED_META_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::callgraph::FunctionRef;
    use crate::gateway::{ScriptRule, ScriptedBackend};

    fn chain(names: &[&str]) -> CallChain {
        CallChain::new(names.iter().enumerate().map(|(i, n)| FunctionRef::new(*n, "a.c", i as u32 + 1)).collect())
    }

    fn trace(names: &[&str]) -> CoverageTrace {
        CoverageTrace { functions_hit: names.iter().map(|s| s.to_string()).collect(), lines_hit: None }
    }

    #[test]
    fn deepest_function_and_unmet_edge() {
        let c = chain(&["main", "load", "header", "row"]);
        assert_eq!(deepest_reached(&c, &trace(&["main", "load", "helper"])), (Some("load".into()), Some(1)));
        assert_eq!(deepest_reached(&c, &trace(&["main", "load", "header", "row"])), (Some("row".into()), None));
        assert_eq!(deepest_reached(&c, &trace(&["other"])), (None, Some(0)));
    }

    #[test]
    fn feedback_names_deepest_function() {
        let c = chain(&["main", "load", "header", "row"]);
        let r = AttemptRecord::from_trace(1, &c, &trace(&["main", "load", "header"]));
        let text = r.feedback(&c);
        assert!(text.contains("`header`"), "{text}");
        assert!(text.contains("edge 2 (`header` -> `row`)"), "{text}");
    }

    #[test]
    fn retry_prompt_carries_feedback() {
        let c = chain(&["main", "load", "row"]);
        let set = ConditionSet { chain: c.clone(), edges: vec![] };
        let b = ScriptedBackend::new(vec![ScriptRule::new(
            TemplateName::InputGeneration,
            vec!["```python\nimport sys\nopen(sys.argv[1],'wb').write(b'x')\n```".into()],
        )]);
        let gw = Gateway::live(b.clone());
        let fb = AttemptRecord::from_trace(1, &c, &trace(&["main", "load"]));
        let s = generate_seed_script(&set, "int main(){}", &gw, Some(&fb), 2).unwrap();
        assert_eq!(s.attempt, 2);
        assert_eq!(s.language_tag, SCRIPT_LANGUAGE);
        assert!(s.body.starts_with("import sys"));
        let prompt = &b.calls()[0].prompt;
        assert!(prompt.contains("reached `load`"), "{prompt}");
    }

    #[test]
    fn seed_json_round_trip() {
        let seed = SeedInput {
            bytes: vec![0, 1, 0xff],
            producer: SeedScript { language_tag: SCRIPT_LANGUAGE.into(), body: "x".into(), attempt: 1 },
            verified_reachable: true,
            trace: trace(&["main"]),
            exploit: false,
        };
        let dir = tempfile::tempdir().unwrap();
        persist_seed(&seed, dir.path()).unwrap();
        assert_eq!(load_seed(dir.path()).unwrap(), seed);
        assert_eq!(std::fs::read(dir.path().join(SEED_FILE)).unwrap(), vec![0, 1, 0xff]);
    }
}
