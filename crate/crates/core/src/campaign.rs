//! Campaign supervision and metrics: TS, TTR, TTE and target hit rate.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{read_events, EngineConfig, EngineEvent, MutatorStats, StopReason, CRASH_DIR, EVENTS_FILE, MUTATOR_ENV, QUEUE_DIR};
use crate::trace::{trace_input, ExecLimits, SymbolMap, TraceError};

/// TTE at or below this many seconds is an immediate exploit.
pub const IMMEDIATE_EXPLOIT_SECS: f64 = 60.0;
const SUPERVISOR_GRACE: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("campaign budget must be positive")]
    BudgetZero,
    #[error("engine failed: {0}")]
    EngineCrash(String),
    #[error("queue is empty")]
    EmptyQueue,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid report: {0}")]
    InvalidReport(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub disable_reachable_input: bool,
    pub disable_mutator: bool,
}

impl Ablation {
    pub const FULL: Self = Self { disable_reachable_input: false, disable_mutator: false };
    pub const WITHOUT_INPUT: Self = Self { disable_reachable_input: true, disable_mutator: false };
    pub const WITHOUT_MUTATOR: Self = Self { disable_reachable_input: false, disable_mutator: true };
    pub const HARNESS_ONLY: Self = Self { disable_reachable_input: true, disable_mutator: true };

    pub fn name(self) -> &'static str {
        match (self.disable_reachable_input, self.disable_mutator) {
            (false, false) => "full",
            (true, false) => "without-input",
            (false, true) => "without-mutator",
            (true, true) => "harness-only",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" | "none" => Ok(Self::FULL),
            "without-input" => Ok(Self::WITHOUT_INPUT),
            "without-mutator" => Ok(Self::WITHOUT_MUTATOR),
            "harness-only" => Ok(Self::HARNESS_ONLY),
            other => Err(format!("unknown ablation {other:?} (full, without-input, without-mutator, harness-only)")),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the built-in engine worker is launched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl WorkerCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self { program: program.into(), args: Vec::new() }
    }

    pub fn arg(mut self, a: impl Into<String>) -> Self {
        self.args.push(a.into());
        self
    }
}

/// Command line of an external engine. Tokens `{input_dir}`, `{output_dir}`
/// and `{binary}` are substituted; `@@` is passed through for the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalEngine {
    pub command: Vec<String>,
    /// Extra environment for the engine process.
    pub env: BTreeMap<String, String>,
    pub poll_interval_ms: u64,
}

impl Default for ExternalEngine {
    fn default() -> Self {
        Self {
            command: ["afl-fuzz", "-i", "{input_dir}", "-o", "{output_dir}", "--", "{binary}", "@@"]
                .map(String::from)
                .to_vec(),
            env: BTreeMap::from([("AFL_SKIP_CPUFREQ".into(), "1".into()), ("AFL_NO_UI".into(), "1".into())]),
            poll_interval_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineKind {
    Builtin(WorkerCommand),
    External(ExternalEngine),
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    /// Instrumented harness used for the built-in engine and all replays.
    pub traced_binary: PathBuf,
    /// Uninstrumented harness handed to external engines.
    pub fast_binary: PathBuf,
    pub target: String,
    pub seed: Option<Vec<u8>>,
    pub mutator: Option<PathBuf>,
    pub budget_secs: f64,
    pub engine: EngineKind,
    pub rng_seed: u64,
    pub ablation: Ablation,
    pub stop_on_exploit: bool,
    pub max_execs: Option<u64>,
    pub exec_limits: ExecLimits,
    /// Campaign directory; receives `queue/`, `crashes/` and engine files.
    pub out_dir: PathBuf,
}

impl CampaignConfig {
    /// Seed and mutator after ablation.
    pub fn effective_inputs(&self) -> (Option<&[u8]>, Option<&Path>) {
        let seed = if self.ablation.disable_reachable_input { None } else { self.seed.as_deref() };
        let mutator = if self.ablation.disable_mutator { None } else { self.mutator.as_deref() };
        (seed, mutator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: u64,
    pub file: String,
    pub discovered_at: f64,
    pub hits_target: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub id: u64,
    pub file: String,
    pub discovered_at: f64,
    pub signature: String,
    pub on_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub queue: Vec<QueueEntry>,
    pub crashes: Vec<CrashRecord>,
    pub ts: f64,
    pub ttr: Option<f64>,
    pub tte: Option<f64>,
    pub budget_secs: f64,
    pub stop_reason: StopReason,
    pub execs: u64,
    pub elapsed: f64,
    pub mutator: Option<MutatorStats>,
}

impl CampaignResult {
    pub fn check_invariants(&self) -> Result<(), String> {
        if let Some(tte) = self.tte {
            if !self.crashes.iter().any(|c| c.on_target && c.discovered_at == tte) {
                return Err(format!("tte {tte} has no matching on-target crash"));
            }
            if let Some(ttr) = self.ttr {
                if ttr > tte {
                    return Err(format!("ttr {ttr} exceeds tte {tte}"));
                }
            }
        }
        Ok(())
    }
}

/// TTE: first on-target crash. TTR: first target-reaching queue entry or
/// crash, whichever comes first.
pub fn time_metrics(queue: &[QueueEntry], crashes: &[CrashRecord]) -> (Option<f64>, Option<f64>) {
    let tte = crashes.iter().filter(|c| c.on_target).map(|c| c.discovered_at).min_by(f64::total_cmp);
    let first_hit = queue.iter().filter(|e| e.hits_target == Some(true)).map(|e| e.discovered_at).min_by(f64::total_cmp);
    let ttr = match (first_hit, tte) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    (ttr, tte)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitRate {
    pub hits: usize,
    pub total: usize,
}

impl HitRate {
    pub fn rate(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

fn with_commas(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Percentage truncated to two decimals, then `(hits/total)`:
/// `79.16%(38/48)`.
impl fmt::Display for HitRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let basis = (self.hits as u128 * 10_000) / self.total.max(1) as u128;
        write!(f, "{}.{:02}%({}/{})", basis / 100, basis % 100, with_commas(self.hits), with_commas(self.total))
    }
}

/// Replays every queue entry (read from `queue_dir`) under the instrumented
/// binary and records whether it entered `target`.
pub fn compute_hit_rate(
    queue: &mut [QueueEntry],
    queue_dir: &Path,
    binary: &Path,
    symbols: &SymbolMap,
    target: &str,
    limits: ExecLimits,
) -> Result<HitRate, CampaignError> {
    if queue.is_empty() {
        return Err(CampaignError::EmptyQueue);
    }
    for e in queue.iter_mut() {
        let run = trace_input(binary, symbols, &queue_dir.join(&e.file), limits)?;
        e.hits_target = Some(run.reached(target));
    }
    Ok(hit_rate_of(queue))
}

/// Hit rate from entries already labeled.
pub fn hit_rate_of(queue: &[QueueEntry]) -> HitRate {
    HitRate { hits: queue.iter().filter(|e| e.hits_target == Some(true)).count(), total: queue.len() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub name: String,
    pub seconds: f64,
    /// Counts toward TS (call-graph build, chain enumeration and selection).
    pub static_analysis: bool,
}

impl PhaseTiming {
    pub fn new(name: impl Into<String>, seconds: f64, static_analysis: bool) -> Self {
        Self { name: name.into(), seconds, static_analysis }
    }
}

/// TS: total duration of the static-analysis phases.
pub fn measure_ts(phases: &[PhaseTiming]) -> f64 {
    phases.iter().filter(|p| p.static_analysis).map(|p| p.seconds).sum()
}

fn prepare_dirs(out: &Path) -> Result<(), CampaignError> {
    for d in [QUEUE_DIR, CRASH_DIR] {
        let p = out.join(d);
        if p.exists() {
            std::fs::remove_dir_all(&p).map_err(io_err(&p))?;
        }
    }
    std::fs::create_dir_all(out).map_err(io_err(out))
}

/// Runs a campaign to budget or first on-target crash and computes its
/// metrics. `ts` is carried into the result unchanged.
pub fn run_campaign(cfg: &CampaignConfig, ts: f64) -> Result<CampaignResult, CampaignError> {
    if cfg.budget_secs.is_nan() || cfg.budget_secs <= 0.0 {
        return Err(CampaignError::BudgetZero);
    }
    prepare_dirs(&cfg.out_dir)?;
    let symbols = SymbolMap::from_binary(&cfg.traced_binary)?;
    let mut result = match &cfg.engine {
        EngineKind::Builtin(worker) => run_builtin(cfg, worker, ts)?,
        EngineKind::External(ext) => run_external(cfg, ext, &symbols, ts)?,
    };
    if !result.queue.is_empty() {
        compute_hit_rate(
            &mut result.queue,
            &cfg.out_dir.join(QUEUE_DIR),
            &cfg.traced_binary,
            &symbols,
            &cfg.target,
            cfg.exec_limits,
        )?;
    }
    let (ttr, tte) = time_metrics(&result.queue, &result.crashes);
    result.ttr = ttr;
    result.tte = tte;
    result.check_invariants().map_err(CampaignError::InvalidReport)?;
    Ok(result)
}

fn wait_with_deadline(child: &mut Child, deadline: Duration) -> std::io::Result<Option<std::process::ExitStatus>> {
    use wait_timeout::ChildExt;
    let status = child.wait_timeout(deadline)?;
    if status.is_none() {
        let _ = child.kill();
        let _ = child.wait();
    }
    Ok(status)
}

fn run_builtin(cfg: &CampaignConfig, worker: &WorkerCommand, ts: f64) -> Result<CampaignResult, CampaignError> {
    let (seed, mutator) = cfg.effective_inputs();
    let mut ecfg = EngineConfig::new(&cfg.traced_binary, &cfg.target, &cfg.out_dir);
    if let Some(bytes) = seed {
        let p = cfg.out_dir.join("initial_seed.bin");
        std::fs::write(&p, bytes).map_err(io_err(&p))?;
        ecfg.seeds.push(p);
    }
    ecfg.budget_secs = cfg.budget_secs;
    ecfg.max_execs = cfg.max_execs;
    ecfg.rng_seed = cfg.rng_seed;
    ecfg.stop_on_exploit = cfg.stop_on_exploit;
    ecfg.exec_timeout_ms = cfg.exec_limits.timeout.as_millis() as u64;
    ecfg.memory_mb = cfg.exec_limits.memory_mb;
    let out = run_worker(worker, &ecfg, mutator)?;
    if let Some(err) = out.failure {
        return Err(CampaignError::EngineCrash(err));
    }
    Ok(result_from_events(&out.events, ts, cfg.budget_secs))
}

/// Output of one worker process.
#[derive(Debug, Clone)]
pub struct WorkerOutcome {
    pub events: Vec<EngineEvent>,
    /// Why the worker did not finish cleanly, if it did not.
    pub failure: Option<String>,
    pub wall: Duration,
}

/// Starts the engine worker for `ecfg` and waits for it, killing it when it
/// overruns the budget by more than a grace period.
pub fn run_worker(worker: &WorkerCommand, ecfg: &EngineConfig, mutator: Option<&Path>) -> Result<WorkerOutcome, CampaignError> {
    std::fs::create_dir_all(&ecfg.out_dir).map_err(io_err(&ecfg.out_dir))?;
    let cfg_path = ecfg.out_dir.join("engine.json");
    let text = serde_json::to_string_pretty(ecfg).expect("engine config serializes");
    std::fs::write(&cfg_path, text).map_err(io_err(&cfg_path))?;
    let mut cmd = Command::new(&worker.program);
    cmd.args(&worker.args).arg(&cfg_path).stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::piped());
    match mutator {
        Some(m) => cmd.env(MUTATOR_ENV, m),
        None => cmd.env_remove(MUTATOR_ENV),
    };
    let start = Instant::now();
    let mut child = cmd.spawn().map_err(io_err(&worker.program))?;
    let mut stderr = child.stderr.take().expect("stderr is piped");
    let reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = std::io::Read::read_to_string(&mut stderr, &mut s);
        s
    });
    let deadline = Duration::from_secs_f64(ecfg.budget_secs) + SUPERVISOR_GRACE;
    let status = wait_with_deadline(&mut child, deadline).map_err(io_err(&worker.program))?;
    let wall = start.elapsed();
    let err_text = reader.join().unwrap_or_default();
    let events = read_events(&ecfg.out_dir.join(EVENTS_FILE)).unwrap_or_default();
    let finished = events.iter().any(|e| matches!(e, EngineEvent::Done { .. }));
    let failure = match status {
        None => Some(format!("worker exceeded its budget by more than {} s", SUPERVISOR_GRACE.as_secs())),
        Some(st) if !st.success() || !finished => {
            use std::os::unix::process::ExitStatusExt;
            let how = match (st.code(), st.signal()) {
                (Some(c), _) => format!("exit status {c}"),
                (_, Some(s)) => format!("signal {s}"),
                _ => "unknown status".into(),
            };
            Some(format!("{how}: {}", err_text.trim()))
        }
        Some(_) => None,
    };
    Ok(WorkerOutcome { events, failure, wall })
}

fn result_from_events(events: &[EngineEvent], ts: f64, budget_secs: f64) -> CampaignResult {
    let mut r = CampaignResult {
        queue: Vec::new(),
        crashes: Vec::new(),
        ts,
        ttr: None,
        tte: None,
        budget_secs,
        stop_reason: StopReason::Budget,
        execs: 0,
        elapsed: 0.0,
        mutator: None,
    };
    for e in events {
        match e {
            EngineEvent::Start { .. } => {}
            EngineEvent::Queue { id, file, discovered_at, .. } => r.queue.push(QueueEntry {
                id: *id,
                file: file.clone(),
                discovered_at: *discovered_at,
                hits_target: None,
            }),
            EngineEvent::Crash { id, file, discovered_at, signature, on_target } => r.crashes.push(CrashRecord {
                id: *id,
                file: file.clone(),
                discovered_at: *discovered_at,
                signature: signature.clone(),
                on_target: *on_target,
            }),
            EngineEvent::Done { reason, execs, elapsed, mutator } => {
                r.stop_reason = *reason;
                r.execs = *execs;
                r.elapsed = *elapsed;
                r.mutator = mutator.clone();
            }
        }
    }
    r
}

fn substitute(token: &str, input: &Path, output: &Path, binary: &Path) -> String {
    token
        .replace("{input_dir}", &input.display().to_string())
        .replace("{output_dir}", &output.display().to_string())
        .replace("{binary}", &binary.display().to_string())
}

/// Directories holding the engine's queue and crashes: either directly
/// under the output directory or one level down (AFL++ `default/`).
fn engine_dirs(output: &Path, name: &str) -> Vec<PathBuf> {
    let mut dirs = vec![output.join(name)];
    if let Ok(rd) = std::fs::read_dir(output) {
        let mut subs: Vec<PathBuf> = rd.flatten().map(|e| e.path().join(name)).filter(|p| p.is_dir()).collect();
        subs.sort();
        dirs.extend(subs);
    }
    dirs.into_iter().filter(|p| p.is_dir()).collect()
}

fn secs_since(start: SystemTime, t: SystemTime) -> f64 {
    t.duration_since(start).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn run_external(cfg: &CampaignConfig, ext: &ExternalEngine, symbols: &SymbolMap, ts: f64) -> Result<CampaignResult, CampaignError> {
    let (seed, mutator) = cfg.effective_inputs();
    let input_dir = cfg.out_dir.join("engine_in");
    let output_dir = cfg.out_dir.join("engine_out");
    for d in [&input_dir, &output_dir] {
        if d.exists() {
            std::fs::remove_dir_all(d).map_err(io_err(d))?;
        }
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let seed_path = input_dir.join("seed");
    std::fs::write(&seed_path, seed.unwrap_or(&crate::engine::DEFAULT_SEED)).map_err(io_err(&seed_path))?;
    let Some((program, rest)) = ext.command.split_first() else {
        return Err(CampaignError::EngineCrash("empty external engine command".into()));
    };
    let sub = |t: &String| substitute(t, &input_dir, &output_dir, &cfg.fast_binary);
    let mut cmd = Command::new(sub(program));
    cmd.args(rest.iter().map(sub)).envs(&ext.env).stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::null());
    match mutator {
        Some(m) => cmd.env(MUTATOR_ENV, m),
        None => cmd.env_remove(MUTATOR_ENV),
    };
    let start_wall = SystemTime::now();
    let start = Instant::now();
    let mut child = cmd.spawn().map_err(io_err(Path::new(program)))?;
    let budget = Duration::from_secs_f64(cfg.budget_secs);
    let poll = Duration::from_millis(ext.poll_interval_ms.max(1));

    let queue_out = cfg.out_dir.join(QUEUE_DIR);
    let crash_out = cfg.out_dir.join(CRASH_DIR);
    std::fs::create_dir_all(&queue_out).map_err(io_err(&queue_out))?;
    std::fs::create_dir_all(&crash_out).map_err(io_err(&crash_out))?;
    let mut seen: std::collections::HashSet<PathBuf> = Default::default();
    let mut result = result_from_events(&[], ts, cfg.budget_secs);
    let mut exited = false;
    let mut reason = StopReason::Budget;

    loop {
        let mut fresh: Vec<(SystemTime, PathBuf, bool)> = Vec::new();
        for (name, is_crash) in [("queue", false), ("crashes", true)] {
            for dir in engine_dirs(&output_dir, name) {
                let Ok(rd) = std::fs::read_dir(&dir) else { continue };
                for e in rd.flatten() {
                    let p = e.path();
                    let fname = e.file_name().to_string_lossy().into_owned();
                    if !p.is_file() || fname.starts_with('.') || fname == "README.txt" || seen.contains(&p) {
                        continue;
                    }
                    let mtime = e.metadata().and_then(|m| m.modified()).unwrap_or_else(|_| SystemTime::now());
                    fresh.push((mtime, p, is_crash));
                }
            }
        }
        fresh.sort();
        for (mtime, p, is_crash) in fresh {
            seen.insert(p.clone());
            let at = secs_since(start_wall, mtime).min(cfg.budget_secs);
            if is_crash {
                let id = result.crashes.len() as u64;
                let file = format!("id:{id:06}");
                let dest = crash_out.join(&file);
                std::fs::copy(&p, &dest).map_err(io_err(&dest))?;
                let run = trace_input(&cfg.traced_binary, symbols, &dest, cfg.exec_limits)?;
                let on_target = run.outcome.exit.is_crash() && run.reached(&cfg.target);
                let last = run.raw_offsets.iter().rev().find_map(|&o| symbols.resolve(o));
                let signature = crate::engine::crash_signature(run.outcome.exit, last);
                result.crashes.push(CrashRecord { id, file, discovered_at: at, signature, on_target });
            } else {
                let id = result.queue.len() as u64;
                let file = format!("id:{id:06}");
                let dest = queue_out.join(&file);
                std::fs::copy(&p, &dest).map_err(io_err(&dest))?;
                result.queue.push(QueueEntry { id, file, discovered_at: at, hits_target: None });
            }
        }
        if cfg.stop_on_exploit && result.crashes.iter().any(|c| c.on_target) {
            reason = StopReason::Exploit;
            break;
        }
        if exited || start.elapsed() >= budget {
            break;
        }
        if let Ok(Some(_)) = child.try_wait() {
            exited = true;
            continue;
        }
        std::thread::sleep(poll.min(budget.saturating_sub(start.elapsed())).max(Duration::from_millis(1)));
    }
    let _ = child.kill();
    let _ = child.wait();
    result.stop_reason = reason;
    result.elapsed = start.elapsed().as_secs_f64();
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    /// Exploited within [`IMMEDIATE_EXPLOIT_SECS`].
    #[serde(rename = "I.E.")]
    ImmediateExploit,
    #[serde(rename = "exploited")]
    Exploited,
    /// Budget exhausted without an on-target crash.
    #[serde(rename = "T.O.")]
    TimeOut,
}

impl Status {
    pub fn of(tte: Option<f64>) -> Self {
        match tte {
            Some(t) if t <= IMMEDIATE_EXPLOIT_SECS => Self::ImmediateExploit,
            Some(_) => Self::Exploited,
            None => Self::TimeOut,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::ImmediateExploit => "I.E.",
            Self::Exploited => "exploited",
            Self::TimeOut => "T.O.",
        }
    }
}

/// Report entry for one crash, without timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportCrash {
    pub id: u64,
    pub file: String,
    pub signature: String,
    pub on_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportQueueEntry {
    pub id: u64,
    pub file: String,
    pub hits_target: bool,
}

/// Every time-dependent value, kept apart so reports of replayed runs
/// compare equal outside this block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportTiming {
    pub ts: f64,
    pub ttr: Option<f64>,
    pub tte: Option<f64>,
    pub elapsed: f64,
    pub execs: u64,
    pub phases: Vec<PhaseTiming>,
    pub queue_discovered_at: Vec<f64>,
    pub crash_discovered_at: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub target: String,
    pub ablation: Ablation,
    pub rng_seed: u64,
    pub budget_secs: f64,
    pub status: Status,
    pub exploited: bool,
    pub reached: bool,
    pub hit_rate: Option<HitRate>,
    pub hit_rate_text: Option<String>,
    pub queue: Vec<ReportQueueEntry>,
    pub crashes: Vec<ReportCrash>,
    pub timing: ReportTiming,
}

impl Report {
    pub fn new(target: &str, ablation: Ablation, rng_seed: u64, r: &CampaignResult, phases: Vec<PhaseTiming>) -> Self {
        let hr = (!r.queue.is_empty()).then(|| hit_rate_of(&r.queue));
        Self {
            target: target.to_string(),
            ablation,
            rng_seed,
            budget_secs: r.budget_secs,
            status: Status::of(r.tte),
            exploited: r.tte.is_some(),
            reached: r.ttr.is_some(),
            hit_rate: hr,
            hit_rate_text: hr.map(|h| h.to_string()),
            queue: r
                .queue
                .iter()
                .map(|e| ReportQueueEntry { id: e.id, file: e.file.clone(), hits_target: e.hits_target == Some(true) })
                .collect(),
            crashes: r
                .crashes
                .iter()
                .map(|c| ReportCrash { id: c.id, file: c.file.clone(), signature: c.signature.clone(), on_target: c.on_target })
                .collect(),
            timing: ReportTiming {
                ts: r.ts,
                ttr: r.ttr,
                tte: r.tte,
                elapsed: r.elapsed,
                execs: r.execs,
                phases,
                queue_discovered_at: r.queue.iter().map(|e| e.discovered_at).collect(),
                crash_discovered_at: r.crashes.iter().map(|c| c.discovered_at).collect(),
            },
        }
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: String| Err(CampaignError::InvalidReport(m));
        let t = &self.timing;
        if t.queue_discovered_at.len() != self.queue.len() || t.crash_discovered_at.len() != self.crashes.len() {
            return bad("timing arrays do not match queue/crash lists".into());
        }
        if self.status != Status::of(t.tte) {
            return bad(format!("status {} disagrees with tte {:?}", self.status.label(), t.tte));
        }
        if self.exploited != t.tte.is_some() || self.reached != t.ttr.is_some() {
            return bad("exploited/reached flags disagree with timing".into());
        }
        if let (Some(r), Some(e)) = (t.ttr, t.tte) {
            if r > e {
                return bad(format!("ttr {r} exceeds tte {e}"));
            }
        }
        if let Some(e) = t.tte {
            let hit = self.crashes.iter().zip(&t.crash_discovered_at).any(|(c, &at)| c.on_target && at == e);
            if !hit {
                return bad("tte has no on-target crash".into());
            }
        }
        match (&self.hit_rate, &self.hit_rate_text) {
            (Some(h), Some(text)) => {
                let labeled = HitRate { hits: self.queue.iter().filter(|q| q.hits_target).count(), total: self.queue.len() };
                if *h != labeled || *text != h.to_string() || h.total == 0 {
                    return bad("hit rate disagrees with the queue".into());
                }
            }
            (None, None) if self.queue.is_empty() => {}
            _ => return bad("hit rate missing or inconsistent".into()),
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, CampaignError> {
        let r: Self = serde_json::from_str(text).map_err(|e| CampaignError::InvalidReport(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    /// The report as JSON with the `timing` block removed.
    pub fn without_timing(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("reports serialize");
        v.as_object_mut().expect("object").remove("timing");
        v
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let secs = |v: Option<f64>| v.map(|s| format!("{s:.3} s")).unwrap_or_else(|| "-".into());
        let rows = [
            ("Target", self.target.clone()),
            ("Variant", self.ablation.to_string()),
            ("Status", self.status.label().to_string()),
            ("TS", format!("{:.3} s", self.timing.ts)),
            ("TTR", secs(self.timing.ttr)),
            ("TTE", secs(self.timing.tte)),
            ("Hit rate", self.hit_rate_text.clone().unwrap_or_else(|| "-".into())),
            ("Queue", self.queue.len().to_string()),
            ("Crashes", self.crashes.len().to_string()),
            ("Executions", self.timing.execs.to_string()),
            ("Budget", format!("{:.3} s", self.budget_secs)),
        ];
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<w$}  {v}\n"));
        }
        if !self.crashes.is_empty() {
            out.push_str("\nCrashes:\n");
            for (c, at) in self.crashes.iter().zip(&self.timing.crash_discovered_at) {
                let mark = if c.on_target { "target" } else { "other" };
                out.push_str(&format!("  {}  {:>10.3} s  {}  {}\n", c.file, at, c.signature, mark));
            }
        }
        out
    }
}
