//! The staged pipeline: analyze, conditions, harness, seed, mutator, fuzz,
//! report. Each stage writes its artifact under the workspace before the
//! next one starts; a stage whose artifact exists is skipped on resume.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use dgf_core::callgraph::{build_call_graph, enumerate_call_chains, function_source, select_available_chain, CallChain};
use dgf_core::campaign::{
    measure_ts, run_campaign, Ablation, CampaignConfig, CampaignResult, EngineKind, PhaseTiming, Report, WorkerCommand,
};
use dgf_core::conditions::{analyze_chain, load_sources, AnalyzeOptions, ConditionSet};
use dgf_core::engine::DEFAULT_SEED;
use dgf_core::gateway::Gateway;
use dgf_core::harness::{build_harness, HarnessArtifact, HarnessLimits, HarnessSpec, RepairKit};
use dgf_core::inputgen::{load_seed, persist_seed, reachable_input_loop, InputLimits, SeedInput, SeedScript, SCRIPT_LANGUAGE};
use dgf_core::mutatorgen::{build_mutator, MutatorArtifact, MutatorLimits, MutatorSpec, ValidationSetup};
use dgf_core::rag::{collect_files, HashEmbedder, IndexBase, RagParams};
use dgf_core::trace::ExecLimits;

use crate::config::{EngineChoice, PipelineConfig};

pub const CHAINS_FILE: &str = "chains.json";
pub const CONDITIONS_FILE: &str = "conditions.json";
pub const HARNESS_DIR: &str = "harness";
pub const HARNESS_META: &str = "harness.json";
pub const SEEDS_DIR: &str = "seeds";
pub const MUTATOR_DIR: &str = "mutator";
pub const MUTATOR_META: &str = "mutator.json";
pub const CAMPAIGN_DIR: &str = "campaign";
pub const CAMPAIGN_FILE: &str = "campaign.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";
const RAG_INDEX_FILE: &str = "rag_index.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Analyze,
    Conditions,
    Harness,
    Seed,
    Mutator,
    Fuzz,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Analyze, Stage::Conditions, Stage::Harness, Stage::Seed, Stage::Mutator, Stage::Fuzz, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Analyze => "analyze",
            Stage::Conditions => "conditions",
            Stage::Harness => "harness",
            Stage::Seed => "seed",
            Stage::Mutator => "mutator",
            Stage::Fuzz => "fuzz",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A stage failed; artifacts written so far stay in the workspace.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: anyhow::Error,
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed", self.stage)
    }
}

impl std::error::Error for StageFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(self.error.as_ref())
    }
}

/// The workspace lacks an artifact that a command needs.
#[derive(Debug)]
pub struct IncompleteWorkspace {
    pub missing: PathBuf,
}

impl fmt::Display for IncompleteWorkspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "incomplete workspace: {} is missing", self.missing.display())
    }
}

impl std::error::Error for IncompleteWorkspace {}

/// `campaign.json`: the campaign result plus the run parameters the report
/// needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzArtifact {
    pub target: String,
    pub ablation: Ablation,
    pub rng_seed: u64,
    pub result: CampaignResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainsArtifact {
    pub target: String,
    pub chains: Vec<CallChain>,
    pub selected: CallChain,
    pub phases: Vec<PhaseTiming>,
}

/// Terminal state of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Exploited,
    TimedOut,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Exploited => 0,
            Outcome::TimedOut => 2,
        }
    }
}

/// Workspace paths.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn harness_dir(&self) -> PathBuf {
        self.path(HARNESS_DIR)
    }

    pub fn seeds_dir(&self) -> PathBuf {
        self.path(SEEDS_DIR)
    }

    pub fn mutator_dir(&self) -> PathBuf {
        self.path(MUTATOR_DIR)
    }

    /// Artifact whose presence marks `stage` complete.
    pub fn marker(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Analyze => self.path(CHAINS_FILE),
            Stage::Conditions => self.path(CONDITIONS_FILE),
            Stage::Harness => self.harness_dir().join(HARNESS_META),
            Stage::Seed => self.seeds_dir().join(dgf_core::inputgen::SEED_META_FILE),
            Stage::Mutator => self.mutator_dir().join(MUTATOR_META),
            Stage::Fuzz => self.path(CAMPAIGN_FILE),
            Stage::Report => self.path(REPORT_FILE),
        }
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.marker(stage).is_file()
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, stage: Stage) -> Result<T> {
        let p = self.marker(stage);
        if !p.is_file() {
            return Err(anyhow!(IncompleteWorkspace { missing: p }));
        }
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }

    fn load_timings(&self) -> Vec<PhaseTiming> {
        std::fs::read_to_string(self.path(TIMINGS_FILE))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }

    fn record_timing(&self, stage: Stage, d: Duration) -> Result<()> {
        let mut t = self.load_timings();
        t.retain(|p| p.name != stage.name());
        t.push(PhaseTiming::new(stage.name(), d.as_secs_f64(), false));
        write_json(&self.path(TIMINGS_FILE), &t)
    }

    pub fn load_chains(&self) -> Result<ChainsArtifact> {
        self.read_json(Stage::Analyze)
    }

    pub fn load_conditions(&self) -> Result<ConditionSet> {
        let p = self.marker(Stage::Conditions);
        if !p.is_file() {
            return Err(anyhow!(IncompleteWorkspace { missing: p }));
        }
        Ok(ConditionSet::from_json(&std::fs::read_to_string(&p)?)?)
    }

    pub fn load_harness(&self) -> Result<HarnessArtifact> {
        self.read_json(Stage::Harness)
    }

    pub fn load_seed(&self) -> Result<SeedInput> {
        let p = self.marker(Stage::Seed);
        if !p.is_file() {
            return Err(anyhow!(IncompleteWorkspace { missing: p }));
        }
        Ok(load_seed(&self.seeds_dir())?)
    }

    pub fn load_mutator(&self) -> Result<MutatorArtifact> {
        self.read_json(Stage::Mutator)
    }

    pub fn load_campaign(&self) -> Result<FuzzArtifact> {
        self.read_json(Stage::Fuzz)
    }

    pub fn load_report(&self) -> Result<Report> {
        let p = self.marker(Stage::Report);
        if !p.is_file() {
            return Err(anyhow!(IncompleteWorkspace { missing: p }));
        }
        Ok(Report::from_json(&std::fs::read_to_string(&p)?)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Everything a stage needs.
pub struct Pipeline<'a> {
    pub cfg: &'a PipelineConfig,
    pub ws: Workspace,
    pub worker: WorkerCommand,
    gateway: Option<Gateway>,
}

impl<'a> Pipeline<'a> {
    /// Creates the workspace directory. The gateway opens on first use.
    pub fn new(cfg: &'a PipelineConfig, worker: WorkerCommand) -> Result<Self> {
        cfg.validate()?;
        cfg.target()?;
        std::fs::create_dir_all(&cfg.workspace)
            .with_context(|| format!("creating workspace {}", cfg.workspace.display()))?;
        let root = cfg.workspace.canonicalize()?;
        Ok(Self { cfg, ws: Workspace::new(root), worker, gateway: None })
    }

    fn gateway(&mut self) -> Result<&Gateway> {
        if self.gateway.is_none() {
            self.gateway = Some(self.cfg.gateway()?);
        }
        Ok(self.gateway.as_ref().expect("just set"))
    }

    fn source_root(&self) -> Result<PathBuf> {
        self.cfg
            .source_root
            .canonicalize()
            .with_context(|| format!("source root {}", self.cfg.source_root.display()))
    }

    /// Runs `stage` unless its artifact exists (or `force` is set).
    pub fn run_stage(&mut self, stage: Stage, force: bool) -> Result<()> {
        if !force && stage != Stage::Report && self.ws.is_done(stage) {
            log::info!("{stage}: artifact present, skipping");
            return Ok(());
        }
        let start = Instant::now();
        let r = match stage {
            Stage::Analyze => self.analyze(),
            Stage::Conditions => self.conditions(),
            Stage::Harness => self.harness(),
            Stage::Seed => self.seed(),
            Stage::Mutator => self.mutator(),
            Stage::Fuzz => self.fuzz(),
            Stage::Report => self.report().map(|_| ()),
        };
        r.map_err(|error| {
            if error.downcast_ref::<IncompleteWorkspace>().is_some() {
                error
            } else {
                anyhow!(StageFailure { stage, error })
            }
        })?;
        if stage != Stage::Report {
            self.ws.record_timing(stage, start.elapsed())?;
        }
        log::info!("{stage}: done in {:.2} s", start.elapsed().as_secs_f64());
        Ok(())
    }

    /// Whether the current ablation skips `stage`.
    pub fn skips(&self, stage: Stage) -> Result<bool> {
        let a = self.cfg.campaign.ablation()?;
        Ok(match stage {
            Stage::Seed => a.disable_reachable_input,
            Stage::Mutator => a.disable_mutator || (self.ws.is_done(Stage::Seed) && self.ws.load_seed()?.exploit),
            _ => false,
        })
    }

    /// Full pipeline with resume.
    pub fn run(&mut self) -> Result<(Report, Outcome)> {
        for stage in Stage::ALL {
            if stage == Stage::Report {
                break;
            }
            if self.skips(stage)? {
                log::info!("{stage}: skipped");
                continue;
            }
            self.run_stage(stage, false)?;
        }
        let report = self.report().map_err(|error| anyhow!(StageFailure { stage: Stage::Report, error }))?;
        let outcome = if report.exploited { Outcome::Exploited } else { Outcome::TimedOut };
        Ok((report, outcome))
    }

    fn analyze(&mut self) -> Result<()> {
        let target = self.cfg.target()?.to_string();
        let root = self.source_root()?;
        let t0 = Instant::now();
        let graph = build_call_graph(&root, &self.cfg.header_globs)?;
        let t1 = Instant::now();
        let candidates = graph.find(&target);
        let Some(tf) = candidates.first().map(|f| (*f).clone()) else {
            bail!("target function {target} is not defined under {}", root.display());
        };
        if candidates.len() > 1 {
            log::warn!("{target} is defined {} times; using {}:{}", candidates.len(), tf.file.display(), tf.line);
        }
        let chains = enumerate_call_chains(&graph, &tf, self.cfg.limits.max_depth)?;
        let t2 = Instant::now();
        let selected = select_available_chain(&chains, &graph)?;
        let t3 = Instant::now();
        let phases = vec![
            PhaseTiming::new("callgraph", (t1 - t0).as_secs_f64(), true),
            PhaseTiming::new("chain_enumeration", (t2 - t1).as_secs_f64(), true),
            PhaseTiming::new("chain_selection", (t3 - t2).as_secs_f64(), true),
        ];
        log::info!("selected chain {selected} out of {} (TS {:.3} s)", chains.len(), measure_ts(&phases));
        write_json(&self.ws.marker(Stage::Analyze), &ChainsArtifact { target, chains, selected, phases })
    }

    fn conditions(&mut self) -> Result<()> {
        let chains = self.ws.load_chains()?;
        let root = self.source_root()?;
        let sources = load_sources(&root, &chains.selected)?;
        let opts = AnalyzeOptions { max_reasks: self.cfg.limits.condition_reasks };
        let set = analyze_chain(&chains.selected, &sources, self.gateway()?, opts)?;
        std::fs::write(self.ws.marker(Stage::Conditions), set.to_json())?;
        Ok(())
    }

    fn harness(&mut self) -> Result<()> {
        let conditions = self.ws.load_conditions()?;
        let root = self.source_root()?;
        let out_dir = self.ws.harness_dir();
        std::fs::create_dir_all(&out_dir)?;
        let embedder = HashEmbedder::default();
        let files = collect_files(&root)?;
        let index = IndexBase::build(&root, &files, &embedder, self.cfg.limits.chunk_lines)?;
        index.save(&out_dir.join(RAG_INDEX_FILE))?;
        let kit = RepairKit {
            index: &index,
            embedder: &embedder,
            params: RagParams { threshold: self.cfg.limits.threshold, top_k: self.cfg.limits.top_k },
        };
        let spec = HarnessSpec::new(&self.cfg.target_description, conditions, &root)?;
        let limits = HarnessLimits { max_rounds: self.cfg.limits.repair_rounds };
        let build = self.cfg.build.clone();
        let artifact = build_harness(&spec, self.gateway()?, &kit, &build, &root, &out_dir, limits)?;
        std::fs::write(out_dir.join("build.log"), &artifact.build_log)?;
        write_json(&self.ws.marker(Stage::Harness), &artifact)
    }

    fn exec_limits(&self) -> ExecLimits {
        ExecLimits {
            timeout: Duration::from_millis(self.cfg.campaign.exec_timeout_ms),
            memory_mb: self.cfg.campaign.memory_mb,
        }
    }

    fn seed(&mut self) -> Result<()> {
        let conditions = self.ws.load_conditions()?;
        let harness = self.ws.load_harness()?;
        let limits = InputLimits { max_attempts: self.cfg.limits.input_attempts, exec: self.exec_limits() };
        let sandbox = self.cfg.sandbox.clone();
        let seed = reachable_input_loop(&conditions, &harness, self.gateway()?, &sandbox, limits)?;
        if seed.exploit {
            log::info!("the reachable seed already crashes inside the target");
        }
        persist_seed(&seed, &self.ws.seeds_dir())?;
        Ok(())
    }

    /// Seed bytes for later stages, honoring the ablation.
    fn seed_for_campaign(&self) -> Result<Option<SeedInput>> {
        if self.cfg.campaign.ablation()?.disable_reachable_input {
            return Ok(None);
        }
        Ok(Some(self.ws.load_seed()?))
    }

    fn mutator(&mut self) -> Result<()> {
        let chains = self.ws.load_chains()?;
        let harness = self.ws.load_harness()?;
        let root = self.source_root()?;
        let seed = self.seed_for_campaign()?;
        let script = seed.as_ref().map(|s| s.producer.clone()).unwrap_or_else(|| SeedScript {
            language_tag: SCRIPT_LANGUAGE.into(),
            body: "# no reachable input script is available".into(),
            attempt: 1,
        });
        let target = chains.selected.target();
        let spec = MutatorSpec::new(&target.name, &self.cfg.target_description, function_source(&root, target)?, script);
        let seed_bytes = seed.as_ref().map(|s| s.bytes.clone()).unwrap_or_else(|| DEFAULT_SEED.to_vec());
        let work_dir = self.ws.mutator_dir();
        std::fs::create_dir_all(&work_dir)?;
        let worker = self.worker.clone();
        let setup = ValidationSetup {
            worker: &worker,
            harness_binary: &harness.binary,
            target: &target.name,
            seed: &seed_bytes,
            sample_duration: self.cfg.campaign.validation_secs,
            rng_seed: self.cfg.campaign.rng_seed,
            work_dir: &work_dir,
            baseline: true,
        };
        let limits = MutatorLimits { max_repair_rounds: self.cfg.limits.mutator_rounds };
        let build_cfg = self.cfg.mutator_build.clone();
        let artifact = build_mutator(&spec, self.gateway()?, &build_cfg, limits, &setup)?;
        std::fs::write(work_dir.join("analysis.md"), format!("{}\n", artifact.analysis))?;
        std::fs::write(work_dir.join("strategy.md"), format!("{}\n", artifact.strategy))?;
        write_json(&self.ws.marker(Stage::Mutator), &artifact)
    }

    fn fuzz(&mut self) -> Result<()> {
        let chains = self.ws.load_chains()?;
        let harness = self.ws.load_harness()?;
        let ablation = self.cfg.campaign.ablation()?;
        let seed = self.seed_for_campaign()?;
        let mutator = if ablation.disable_mutator || seed.as_ref().is_some_and(|s| s.exploit) {
            None
        } else {
            Some(self.ws.load_mutator()?.binary)
        };
        let c = &self.cfg.campaign;
        let engine = match c.engine {
            EngineChoice::Builtin => EngineKind::Builtin(self.worker.clone()),
            EngineChoice::External => EngineKind::External(c.external.clone()),
        };
        let cc = CampaignConfig {
            traced_binary: harness.binary.clone(),
            fast_binary: harness.fast_binary.clone(),
            target: chains.selected.target().name.clone(),
            seed: seed.map(|s| s.bytes),
            mutator,
            budget_secs: c.budget_secs,
            engine,
            rng_seed: c.rng_seed,
            ablation,
            stop_on_exploit: c.stop_on_exploit,
            max_execs: c.max_execs,
            exec_limits: self.exec_limits(),
            out_dir: self.ws.path(CAMPAIGN_DIR),
        };
        let result = run_campaign(&cc, measure_ts(&chains.phases))?;
        let artifact = FuzzArtifact { target: cc.target, ablation, rng_seed: c.rng_seed, result };
        write_json(&self.ws.marker(Stage::Fuzz), &artifact)
    }

    /// Builds, writes and returns the report of a finished campaign.
    pub fn report(&self) -> Result<Report> {
        render_report(&self.ws)
    }
}

/// Builds `report.json` and `report.txt` from the workspace artifacts
/// without re-running anything.
pub fn render_report(ws: &Workspace) -> Result<Report> {
    let chains = ws.load_chains()?;
    let fuzz = ws.load_campaign()?;
    let mut phases = chains.phases.clone();
    phases.extend(ws.load_timings());
    let report = Report::new(&fuzz.target, fuzz.ablation, fuzz.rng_seed, &fuzz.result, phases);
    report.validate()?;
    std::fs::write(ws.marker(Stage::Report), report.to_json())?;
    std::fs::write(ws.path(REPORT_TABLE_FILE), report.table())?;
    Ok(report)
}
