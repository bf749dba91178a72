use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dgf_cli::config::{EngineChoice, PipelineConfig, UsageError};
use dgf_cli::pipeline::{render_report, Outcome, Pipeline, Stage, Workspace};
use dgf_core::campaign::WorkerCommand;
use dgf_core::gateway::GatewayMode;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 64;
const WORKER_SUBCOMMAND: &str = "engine-worker";

/// LLM-guided directed greybox fuzzing pipeline.
#[derive(Debug, Parser)]
#[command(name = "dgf", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    /// Log more (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Pipeline configuration file (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// Target function name.
    #[arg(long, global = true)]
    target: Option<String>,
    /// Fuzzing budget in seconds.
    #[arg(long, global = true)]
    budget: Option<f64>,
    #[arg(long, global = true)]
    rng_seed: Option<u64>,
    /// full, without-input, without-mutator or harness-only.
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// live, record or replay.
    #[arg(long, global = true)]
    gateway_mode: Option<GatewayMode>,
    #[arg(long, global = true)]
    cassette: Option<PathBuf>,
    /// builtin or external.
    #[arg(long, global = true, value_parser = parse_engine)]
    engine: Option<EngineChoice>,
    /// Re-run a stage even if its artifact exists.
    #[arg(long, global = true)]
    force: bool,
}

fn parse_engine(s: &str) -> Result<EngineChoice, String> {
    match s {
        "builtin" => Ok(EngineChoice::Builtin),
        "external" => Ok(EngineChoice::External),
        other => Err(format!("unknown engine {other:?}")),
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the call graph and select a call chain.
    Analyze,
    /// Extract execution conditions along the selected chain.
    Conditions,
    /// Generate and compile the fuzzing harness.
    Harness,
    /// Generate a seed that reaches the target.
    Seed,
    /// Generate, compile and validate the custom mutator.
    Mutator,
    /// Run the fuzzing campaign.
    Fuzz,
    /// Re-render the report of a finished campaign.
    Report,
    /// Run every stage in order, resuming from existing artifacts.
    Run,
    #[command(name = WORKER_SUBCOMMAND, hide = true)]
    EngineWorker { config: PathBuf },
}

impl Overrides {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(w) = &self.workspace {
            cfg.workspace = w.clone();
        }
        if let Some(t) = &self.target {
            cfg.target_function = Some(t.clone());
        }
        if let Some(b) = self.budget {
            cfg.campaign.budget_secs = b;
        }
        if let Some(s) = self.rng_seed {
            cfg.campaign.rng_seed = s;
        }
        if let Some(a) = &self.ablation {
            cfg.campaign.ablation = a.clone();
        }
        if let Some(m) = self.gateway_mode {
            cfg.gateway.mode = m;
        }
        if let Some(c) = &self.cassette {
            cfg.gateway.cassette = Some(c.clone());
        }
        if let Some(e) = self.engine {
            cfg.campaign.engine = e;
        }
        Ok(cfg)
    }
}

fn worker_command() -> Result<WorkerCommand> {
    let exe = std::env::current_exe().context("locating the dgf executable")?;
    Ok(WorkerCommand::new(exe).arg(WORKER_SUBCOMMAND))
}

fn execute(cli: &Cli) -> Result<u8> {
    let stage = match &cli.command {
        Command::EngineWorker { config } => {
            let summary = dgf_core::engine::worker_main(config)?;
            println!("{}", serde_json::to_string(&summary)?);
            return Ok(0);
        }
        Command::Report => {
            let cfg = cli.overrides.load()?;
            let report = render_report(&Workspace::new(&cfg.workspace))?;
            print!("{}", report.table());
            return Ok(0);
        }
        Command::Run => {
            let cfg = cli.overrides.load()?;
            let mut p = Pipeline::new(&cfg, worker_command()?)?;
            let (report, outcome) = p.run()?;
            print!("{}", report.table());
            return Ok(outcome.exit_code() as u8);
        }
        Command::Analyze => Stage::Analyze,
        Command::Conditions => Stage::Conditions,
        Command::Harness => Stage::Harness,
        Command::Seed => Stage::Seed,
        Command::Mutator => Stage::Mutator,
        Command::Fuzz => Stage::Fuzz,
    };
    let cfg = cli.overrides.load()?;
    let mut p = Pipeline::new(&cfg, worker_command()?)?;
    p.run_stage(stage, cli.overrides.force)?;
    println!("{}", p.ws.marker(stage).display());
    if stage == Stage::Fuzz {
        let fuzz = p.ws.load_campaign()?;
        let outcome = if fuzz.result.tte.is_some() { Outcome::Exploited } else { Outcome::TimedOut };
        return Ok(outcome.exit_code() as u8);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("dgf: {e:#}");
            if e.chain().any(|c| c.downcast_ref::<UsageError>().is_some()) {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}
