//! Built-in deterministic fuzzing engine, run as a worker process.
//!
//! The worker executes the instrumented harness on every candidate and
//! keeps inputs whose set of entered functions is new. Candidates come from
//! a custom mutator when one is loaded (`AFL_CUSTOM_MUTATOR_LIBRARY`), and
//! from stacked havoc byte mutations otherwise. Everything the supervisor
//! needs is written to `events.jsonl` in the output directory.

use std::collections::HashSet;
use std::ffi::{c_uint, c_void, OsString};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{parse_trace, run_program, ExecLimits, ExitKind, SymbolMap, TraceError, TRACE_ENV};

pub const MUTATOR_ENV: &str = "AFL_CUSTOM_MUTATOR_LIBRARY";
pub const REQUIRED_SYMBOLS: [&str; 3] = ["afl_custom_init", "afl_custom_fuzz", "afl_custom_deinit"];
pub const EVENTS_FILE: &str = "events.jsonl";
pub const QUEUE_DIR: &str = "queue";
pub const CRASH_DIR: &str = "crashes";
/// Seed used when the campaign supplies none.
pub const DEFAULT_SEED: [u8; 8] = [0; 8];

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("cannot load mutator {path}: {reason}")]
    MutatorLoad { path: PathBuf, reason: String },
    #[error("mutator init returned NULL")]
    MutatorInit,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("bad engine config: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Instrumented harness binary, run with the input path as argument.
    pub binary: PathBuf,
    pub target: String,
    /// Initial inputs; [`DEFAULT_SEED`] when empty.
    pub seeds: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub budget_secs: f64,
    pub max_execs: Option<u64>,
    pub rng_seed: u64,
    pub stop_on_exploit: bool,
    pub exec_timeout_ms: u64,
    pub memory_mb: Option<u64>,
    pub max_input_len: usize,
    /// Mutations per queue visit.
    pub energy: u32,
    /// Mutator calls on the first seed before fuzzing, without executions.
    pub probe_invocations: u32,
}

impl EngineConfig {
    pub fn new(binary: impl Into<PathBuf>, target: impl Into<String>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            binary: binary.into(),
            target: target.into(),
            seeds: Vec::new(),
            out_dir: out_dir.into(),
            budget_secs: 60.0,
            max_execs: None,
            rng_seed: 0,
            stop_on_exploit: true,
            exec_timeout_ms: 1000,
            memory_mb: Some(512),
            max_input_len: 4096,
            energy: 32,
            probe_invocations: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Exploit,
    MaxExecs,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutatorStats {
    pub calls: u64,
    pub nonempty: u64,
    /// Outputs that differ from their input.
    pub changed: u64,
    pub oversized: u64,
    pub probe_calls: u64,
    pub probe_changed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EngineEvent {
    Start { rng_seed: u64, seeds: usize, mutator: bool },
    Queue { id: u64, file: String, discovered_at: f64, parent: Option<u64>, hits_target: bool },
    Crash { id: u64, file: String, discovered_at: f64, signature: String, on_target: bool },
    Done { reason: StopReason, execs: u64, elapsed: f64, mutator: Option<MutatorStats> },
}

/// Reads an events file, skipping a torn last line.
pub fn read_events(path: &Path) -> std::io::Result<Vec<EngineEvent>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

type InitFn = unsafe extern "C" fn(*mut c_void, c_uint) -> *mut c_void;
type FuzzFn = unsafe extern "C" fn(*mut c_void, *mut u8, usize, *mut *mut u8, *mut u8, usize, usize) -> usize;
type DeinitFn = unsafe extern "C" fn(*mut c_void);

/// A loaded custom mutator.
pub struct CustomMutator {
    state: *mut c_void,
    fuzz: FuzzFn,
    deinit: DeinitFn,
    _lib: libloading::Library,
}

impl CustomMutator {
    pub fn load(path: &Path, seed: u32) -> Result<Self, EngineError> {
        let err = |reason: String| EngineError::MutatorLoad { path: path.to_path_buf(), reason };
        // SAFETY: loading runs the object's constructors; mutators are trusted build outputs.
        let lib = unsafe { libloading::Library::new(path) }.map_err(|e| err(e.to_string()))?;
        // SAFETY: symbol types follow the documented mutator ABI.
        let (init, fuzz, deinit) = unsafe {
            let init: InitFn = *lib.get::<InitFn>(b"afl_custom_init\0").map_err(|e| err(e.to_string()))?;
            let fuzz: FuzzFn = *lib.get::<FuzzFn>(b"afl_custom_fuzz\0").map_err(|e| err(e.to_string()))?;
            let deinit: DeinitFn = *lib.get::<DeinitFn>(b"afl_custom_deinit\0").map_err(|e| err(e.to_string()))?;
            (init, fuzz, deinit)
        };
        // SAFETY: the engine passes NULL for the AFL++ state pointer.
        let state = unsafe { init(std::ptr::null_mut(), seed) };
        if state.is_null() {
            return Err(EngineError::MutatorInit);
        }
        Ok(Self { state, fuzz, deinit, _lib: lib })
    }

    /// One mutation. Returns the output and whether it exceeded `max_size`
    /// (in which case it is truncated).
    pub fn fuzz(&mut self, input: &[u8], add: Option<&[u8]>, max_size: usize) -> (Vec<u8>, bool) {
        let mut buf = input.to_vec();
        let mut add_buf = add.map(<[u8]>::to_vec);
        let (add_ptr, add_len) = match add_buf.as_mut() {
            Some(a) => (a.as_mut_ptr(), a.len()),
            None => (std::ptr::null_mut(), 0),
        };
        let mut out: *mut u8 = std::ptr::null_mut();
        // SAFETY: buffers outlive the call; the mutator owns `out` until its next call.
        let n = unsafe { (self.fuzz)(self.state, buf.as_mut_ptr(), buf.len(), &mut out, add_ptr, add_len, max_size) };
        if n == 0 || out.is_null() {
            return (Vec::new(), false);
        }
        let oversized = n > max_size;
        let keep = n.min(max_size);
        // SAFETY: the mutator reported `n` valid bytes at `out`.
        let bytes = unsafe { std::slice::from_raw_parts(out, keep) }.to_vec();
        (bytes, oversized)
    }
}

impl Drop for CustomMutator {
    fn drop(&mut self) {
        // SAFETY: state came from this library's init and is released once.
        unsafe { (self.deinit)(self.state) }
    }
}

const INTERESTING_8: [i8; 9] = [-128, -1, 0, 1, 16, 32, 64, 100, 127];
const INTERESTING_16: [i16; 10] = [-32768, -129, 128, 255, 256, 512, 1000, 1024, 4096, 32767];
const INTERESTING_32: [i32; 8] = [i32::MIN, -100_663_046, -32769, 32768, 65535, 65536, 100_663_045, i32::MAX];

/// Applies a stack of 1 to 16 random byte-level mutations to `data`.
pub fn havoc(rng: &mut impl Rng, data: &mut Vec<u8>, splice: Option<&[u8]>, max_len: usize) {
    let ops = 1usize << rng.gen_range(0..=4);
    for _ in 0..ops {
        if data.is_empty() {
            data.push(rng.gen());
            continue;
        }
        let len = data.len();
        match rng.gen_range(0..11) {
            0 => {
                let bit = rng.gen_range(0..len * 8);
                data[bit / 8] ^= 1 << (bit % 8);
            }
            1 => {
                let i = rng.gen_range(0..len);
                data[i] = INTERESTING_8[rng.gen_range(0..INTERESTING_8.len())] as u8;
            }
            2 if len >= 2 => {
                let i = rng.gen_range(0..len - 1);
                let v = INTERESTING_16[rng.gen_range(0..INTERESTING_16.len())];
                let b = if rng.gen() { v.to_le_bytes() } else { v.to_be_bytes() };
                data[i..i + 2].copy_from_slice(&b);
            }
            3 if len >= 4 => {
                let i = rng.gen_range(0..len - 3);
                let v = INTERESTING_32[rng.gen_range(0..INTERESTING_32.len())];
                let b = if rng.gen() { v.to_le_bytes() } else { v.to_be_bytes() };
                data[i..i + 4].copy_from_slice(&b);
            }
            4 => {
                let i = rng.gen_range(0..len);
                let d = rng.gen_range(1..=35u8);
                data[i] = if rng.gen() { data[i].wrapping_add(d) } else { data[i].wrapping_sub(d) };
            }
            5 if len >= 4 => {
                let i = rng.gen_range(0..len - 3);
                let v = u32::from_le_bytes(data[i..i + 4].try_into().expect("4 bytes"));
                let d = rng.gen_range(1..=35u32);
                let v = if rng.gen() { v.wrapping_add(d) } else { v.wrapping_sub(d) };
                data[i..i + 4].copy_from_slice(&v.to_le_bytes());
            }
            6 => {
                let i = rng.gen_range(0..len);
                data[i] ^= rng.gen_range(1..=255u8);
            }
            7 if len >= 2 => {
                let n = rng.gen_range(1..=len / 2);
                let at = rng.gen_range(0..=len - n);
                data.drain(at..at + n);
            }
            8 if len < max_len => {
                let n = rng.gen_range(1..=len.min(max_len - len).clamp(1, 128));
                let at = rng.gen_range(0..=len);
                let block: Vec<u8> = if rng.gen_bool(0.75) {
                    let from = rng.gen_range(0..len);
                    (0..n).map(|k| data[(from + k) % len]).collect()
                } else {
                    let b = rng.gen();
                    vec![b; n]
                };
                data.splice(at..at, block);
            }
            9 if len >= 2 => {
                let n = rng.gen_range(1..=len / 2);
                let from = rng.gen_range(0..=len - n);
                let to = rng.gen_range(0..=len - n);
                data.copy_within(from..from + n, to);
            }
            10 => {
                if let Some(other) = splice.filter(|o| !o.is_empty()) {
                    let cut = rng.gen_range(0..len.min(other.len()).max(1));
                    data.truncate(cut);
                    data.extend_from_slice(&other[cut.min(other.len())..]);
                }
            }
            _ => {
                let i = rng.gen_range(0..len);
                data[i] = rng.gen();
            }
        }
        data.truncate(max_len);
    }
    if data.is_empty() {
        data.push(rng.gen());
    }
}

fn signal_name(sig: i32) -> String {
    match sig {
        libc::SIGSEGV => "SIGSEGV".into(),
        libc::SIGABRT => "SIGABRT".into(),
        libc::SIGBUS => "SIGBUS".into(),
        libc::SIGFPE => "SIGFPE".into(),
        libc::SIGILL => "SIGILL".into(),
        libc::SIGTRAP => "SIGTRAP".into(),
        other => format!("SIG{other}"),
    }
}

/// Crash signature: signal plus the last function first entered.
pub fn crash_signature(exit: ExitKind, last_function: Option<&str>) -> String {
    let sig = match exit {
        ExitKind::Signaled(s) => signal_name(s),
        ExitKind::Exited(c) => format!("exit{c}"),
        ExitKind::Timeout => "timeout".into(),
    };
    format!("{sig}@{}", last_function.unwrap_or("?"))
}

struct Executor<'a> {
    binary: &'a Path,
    symbols: SymbolMap,
    input_path: PathBuf,
    trace_path: PathBuf,
    limits: ExecLimits,
}

struct ExecResult {
    exit: ExitKind,
    offsets: Vec<u64>,
    functions: Vec<String>,
}

impl Executor<'_> {
    fn run(&self, data: &[u8]) -> Result<ExecResult, EngineError> {
        std::fs::write(&self.input_path, data)?;
        let env = [(OsString::from(TRACE_ENV), self.trace_path.as_os_str().to_owned())];
        let out = run_program(self.binary, &[self.input_path.as_os_str().to_owned()], &env, self.limits)?;
        let text = std::fs::read_to_string(&self.trace_path).unwrap_or_default();
        let offsets = parse_trace(&text);
        let functions = offsets.iter().filter_map(|&o| self.symbols.resolve(o)).map(str::to_string).collect();
        Ok(ExecResult { exit: out.exit, offsets, functions })
    }
}

struct Queued {
    id: u64,
    bytes: Vec<u8>,
}

struct EventLog(std::io::BufWriter<std::fs::File>);

impl EventLog {
    fn emit(&mut self, e: &EngineEvent) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.0, e)?;
        self.0.write_all(b"\n")?;
        self.0.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSummary {
    pub reason: StopReason,
    pub execs: u64,
    pub elapsed: f64,
    pub queue: usize,
    pub crashes: usize,
    pub mutator: Option<MutatorStats>,
}

/// Runs a campaign in the current process. `mutator` overrides the
/// environment convention.
pub fn run_engine(cfg: &EngineConfig, mutator: Option<&Path>) -> Result<EngineSummary, EngineError> {
    if cfg.budget_secs.is_nan() || cfg.budget_secs <= 0.0 {
        return Err(EngineError::Config("budget must be positive".into()));
    }
    if cfg.max_input_len == 0 || cfg.energy == 0 {
        return Err(EngineError::Config("max_input_len and energy must be positive".into()));
    }
    let start = Instant::now();
    let budget = Duration::from_secs_f64(cfg.budget_secs);
    let queue_dir = cfg.out_dir.join(QUEUE_DIR);
    let crash_dir = cfg.out_dir.join(CRASH_DIR);
    std::fs::create_dir_all(&queue_dir)?;
    std::fs::create_dir_all(&crash_dir)?;
    let mut log = EventLog(std::io::BufWriter::new(std::fs::File::create(cfg.out_dir.join(EVENTS_FILE))?));

    let mut seeds = Vec::new();
    for p in &cfg.seeds {
        let mut b = std::fs::read(p)?;
        b.truncate(cfg.max_input_len);
        seeds.push(b);
    }
    if seeds.is_empty() {
        seeds.push(DEFAULT_SEED.to_vec());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut custom = match mutator {
        Some(p) => Some(CustomMutator::load(p, cfg.rng_seed as u32)?),
        None => None,
    };
    log.emit(&EngineEvent::Start { rng_seed: cfg.rng_seed, seeds: seeds.len(), mutator: custom.is_some() })?;
    let mut stats = custom.as_ref().map(|_| MutatorStats::default());

    if let (Some(m), Some(st)) = (custom.as_mut(), stats.as_mut()) {
        for _ in 0..cfg.probe_invocations {
            let (out, _) = m.fuzz(&seeds[0], None, cfg.max_input_len);
            st.probe_calls += 1;
            if !out.is_empty() && out != seeds[0] {
                st.probe_changed += 1;
            }
        }
    }

    let exec = Executor {
        binary: &cfg.binary,
        symbols: SymbolMap::from_binary(&cfg.binary)?,
        input_path: cfg.out_dir.join(".cur_input"),
        trace_path: cfg.out_dir.join(".cur_trace"),
        limits: ExecLimits { timeout: Duration::from_millis(cfg.exec_timeout_ms), memory_mb: cfg.memory_mb },
    };
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut crash_sigs: HashSet<String> = HashSet::new();
    let mut queue: Vec<Queued> = Vec::new();
    let mut crashes = 0u64;
    let mut execs = 0u64;
    let mut next_id = 0u64;

    // Returns true when the campaign should stop on an exploit.
    let mut handle = |data: &[u8],
                      parent: Option<u64>,
                      r: ExecResult,
                      queue: &mut Vec<Queued>,
                      log: &mut EventLog|
     -> Result<bool, EngineError> {
        let at = start.elapsed().as_secs_f64();
        let on_target = r.functions.iter().any(|f| f == &cfg.target);
        if r.exit.is_crash() {
            let sig = crash_signature(r.exit, r.functions.last().map(String::as_str));
            if crash_sigs.insert(sig.clone()) || on_target {
                let file = format!("id:{crashes:06}");
                std::fs::write(crash_dir.join(&file), data)?;
                log.emit(&EngineEvent::Crash { id: crashes, file, discovered_at: at, signature: sig, on_target })?;
                crashes += 1;
            }
            return Ok(on_target && cfg.stop_on_exploit);
        }
        let mut key = r.offsets;
        key.sort_unstable();
        key.dedup();
        if seen.insert(key) {
            let id = next_id;
            next_id += 1;
            let file = format!("id:{id:06}");
            std::fs::write(queue_dir.join(&file), data)?;
            log.emit(&EngineEvent::Queue { id, file, discovered_at: at, parent, hits_target: on_target })?;
            queue.push(Queued { id, bytes: data.to_vec() });
        }
        Ok(false)
    };

    let finish = |reason: StopReason, execs: u64, queue: usize, crashes: u64, stats: Option<MutatorStats>, log: &mut EventLog| {
        let elapsed = start.elapsed().as_secs_f64();
        log.emit(&EngineEvent::Done { reason, execs, elapsed, mutator: stats.clone() })?;
        Ok::<_, EngineError>(EngineSummary { reason, execs, elapsed, queue, crashes: crashes as usize, mutator: stats })
    };

    for s in &seeds {
        let r = exec.run(s)?;
        execs += 1;
        if handle(s, None, r, &mut queue, &mut log)? {
            return finish(StopReason::Exploit, execs, queue.len(), crashes, stats, &mut log);
        }
    }
    if queue.is_empty() {
        // Every seed crashed off target or repeated coverage; keep the first to mutate from.
        queue.push(Queued { id: u64::MAX, bytes: seeds[0].clone() });
    }

    let mut cursor = 0usize;
    loop {
        let parent_idx = cursor % queue.len();
        cursor += 1;
        for _ in 0..cfg.energy {
            if start.elapsed() >= budget {
                return finish(StopReason::Budget, execs, queue.len(), crashes, stats, &mut log);
            }
            if cfg.max_execs.is_some_and(|m| execs >= m) {
                return finish(StopReason::MaxExecs, execs, queue.len(), crashes, stats, &mut log);
            }
            let parent = &queue[parent_idx];
            let parent_id = (parent.id != u64::MAX).then_some(parent.id);
            let splice = (queue.len() > 1).then(|| rng.gen_range(0..queue.len()));
            let candidate = match (custom.as_mut(), stats.as_mut()) {
                (Some(m), Some(st)) => {
                    let add = splice.map(|i| queue[i].bytes.as_slice());
                    let (out, oversized) = m.fuzz(&parent.bytes, add, cfg.max_input_len);
                    st.calls += 1;
                    st.oversized += oversized as u64;
                    if out.is_empty() {
                        continue;
                    }
                    st.nonempty += 1;
                    st.changed += (out != parent.bytes) as u64;
                    out
                }
                _ => {
                    let mut data = parent.bytes.clone();
                    havoc(&mut rng, &mut data, splice.map(|i| queue[i].bytes.as_slice()), cfg.max_input_len);
                    data
                }
            };
            let r = exec.run(&candidate)?;
            execs += 1;
            if handle(&candidate, parent_id, r, &mut queue, &mut log)? {
                return finish(StopReason::Exploit, execs, queue.len(), crashes, stats, &mut log);
            }
        }
    }
}

/// Worker-process entry: reads the JSON config at `config_path` and takes
/// the mutator from [`MUTATOR_ENV`].
pub fn worker_main(config_path: &Path) -> Result<EngineSummary, EngineError> {
    let text = std::fs::read_to_string(config_path)?;
    let cfg: EngineConfig = serde_json::from_str(&text).map_err(|e| EngineError::Config(e.to_string()))?;
    let mutator = std::env::var_os(MUTATOR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    run_engine(&cfg, mutator.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn havoc_respects_length_bounds(seed in any::<u64>(), init in proptest::collection::vec(any::<u8>(), 0..64), max in 1usize..128) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut d = init.clone();
            d.truncate(max);
            let other = vec![7u8; 40];
            havoc(&mut rng, &mut d, Some(&other), max);
            prop_assert!(!d.is_empty() && d.len() <= max);
        }
    }

    #[test]
    fn havoc_is_deterministic_and_productive() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| {
                    let mut d = b"MGK1\x10\0\0\0payload".to_vec();
                    havoc(&mut rng, &mut d, None, 64);
                    d
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        assert!(run(3).iter().any(|d| d != b"MGK1\x10\0\0\0payload"));
    }

    #[test]
    fn signatures() {
        assert_eq!(crash_signature(ExitKind::Signaled(libc::SIGSEGV), Some("handle_record")), "SIGSEGV@handle_record");
        assert_eq!(crash_signature(ExitKind::Exited(3), None), "exit3@?");
    }

    #[test]
    fn events_round_trip() {
        let e = EngineEvent::Crash { id: 1, file: "id:000001".into(), discovered_at: 0.5, signature: "x".into(), on_target: true };
        let line = serde_json::to_string(&e).unwrap();
        assert!(line.starts_with("{\"event\":\"crash\""));
        assert_eq!(serde_json::from_str::<EngineEvent>(&line).unwrap(), e);
    }
}
