//! Pipeline configuration file (TOML) and the gateway it describes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dgf_core::callgraph::DEFAULT_MAX_DEPTH;
use dgf_core::campaign::{Ablation, ExternalEngine};
use dgf_core::gateway::{Gateway, GatewayConfig, GatewayMode, ScriptRule, ScriptedBackend};
use dgf_core::harness::{BuildConfig, DEFAULT_MAX_REPAIR_ROUNDS};
use dgf_core::mutatorgen::MutatorBuildConfig;
use dgf_core::sandbox::SandboxConfig;

/// Endpoint prefix selecting the offline scripted backend.
pub const SCRIPT_ENDPOINT_PREFIX: &str = "script:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub max_depth: usize,
    /// Retrieval top-k.
    pub top_k: usize,
    /// Retrieval similarity threshold.
    pub threshold: f64,
    pub chunk_lines: u32,
    pub repair_rounds: u32,
    pub condition_reasks: u32,
    pub input_attempts: u32,
    pub mutator_rounds: u32,
}

impl Default for Limits {
    fn default() -> Self {
        let rag = dgf_core::rag::RagParams::default();
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
            top_k: rag.top_k,
            threshold: rag.threshold,
            chunk_lines: dgf_core::rag::DEFAULT_CHUNK_LINES,
            repair_rounds: DEFAULT_MAX_REPAIR_ROUNDS,
            condition_reasks: dgf_core::conditions::AnalyzeOptions::default().max_reasks,
            input_attempts: dgf_core::inputgen::DEFAULT_MAX_ATTEMPTS,
            mutator_rounds: dgf_core::mutatorgen::DEFAULT_MAX_REPAIR_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineChoice {
    Builtin,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignSection {
    pub budget_secs: f64,
    pub rng_seed: u64,
    pub engine: EngineChoice,
    /// full, without-input, without-mutator or harness-only.
    pub ablation: String,
    pub stop_on_exploit: bool,
    pub max_execs: Option<u64>,
    pub exec_timeout_ms: u64,
    pub memory_mb: Option<u64>,
    /// Length of the mutator validation sample.
    pub validation_secs: f64,
    pub external: ExternalEngine,
}

impl Default for CampaignSection {
    fn default() -> Self {
        Self {
            budget_secs: 600.0,
            rng_seed: 0,
            engine: EngineChoice::Builtin,
            ablation: "full".into(),
            stop_on_exploit: true,
            max_execs: None,
            exec_timeout_ms: 1000,
            memory_mb: Some(512),
            validation_secs: 2.0,
            external: ExternalEngine::default(),
        }
    }
}

impl CampaignSection {
    pub fn ablation(&self) -> Result<Ablation> {
        self.ablation.parse().map_err(anyhow::Error::msg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub target_function: Option<String>,
    pub target_description: String,
    pub source_root: PathBuf,
    pub header_globs: Vec<String>,
    pub workspace: PathBuf,
    pub build: BuildConfig,
    pub mutator_build: MutatorBuildConfig,
    pub gateway: GatewayConfig,
    pub limits: Limits,
    pub campaign: CampaignSection,
    pub sandbox: SandboxConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            target_function: None,
            target_description: String::new(),
            source_root: PathBuf::from("."),
            header_globs: vec!["**/*.h".into()],
            workspace: PathBuf::from("dgf-workspace"),
            build: BuildConfig::default(),
            mutator_build: MutatorBuildConfig::default(),
            gateway: GatewayConfig::default(),
            limits: Limits::default(),
            campaign: CampaignSection::default(),
            sandbox: SandboxConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parses a config file. Relative paths are taken from the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.rebase_paths(base);
        Ok(cfg)
    }

    pub fn rebase_paths(&mut self, base: &Path) {
        rebase(base, &mut self.source_root);
        rebase(base, &mut self.workspace);
        if let Some(c) = self.gateway.cassette.as_mut() {
            rebase(base, c);
        }
        if let Some(script) = self.gateway.endpoint.strip_prefix(SCRIPT_ENDPOINT_PREFIX) {
            let mut p = PathBuf::from(script);
            rebase(base, &mut p);
            self.gateway.endpoint = format!("{SCRIPT_ENDPOINT_PREFIX}{}", p.display());
        }
    }

    pub fn target(&self) -> Result<&str> {
        match self.target_function.as_deref() {
            Some(t) if !t.trim().is_empty() => Ok(t),
            _ => bail!(UsageError("no target function given (set target_function or pass --target)".into())),
        }
    }

    /// Checks that every limit is positive.
    pub fn validate(&self) -> Result<()> {
        let l = &self.limits;
        let positive = [
            ("limits.max_depth", l.max_depth as f64),
            ("limits.top_k", l.top_k as f64),
            ("limits.chunk_lines", l.chunk_lines as f64),
            ("limits.repair_rounds", l.repair_rounds as f64),
            ("limits.input_attempts", l.input_attempts as f64),
            ("limits.mutator_rounds", l.mutator_rounds as f64),
            ("campaign.budget_secs", self.campaign.budget_secs),
            ("campaign.exec_timeout_ms", self.campaign.exec_timeout_ms as f64),
            ("campaign.validation_secs", self.campaign.validation_secs),
            ("sandbox.timeout_secs", self.sandbox.timeout_secs as f64),
            ("sandbox.output_cap", self.sandbox.output_cap as f64),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                bail!(UsageError(format!("{name} must be positive")));
            }
        }
        if !(-1.0..=1.0).contains(&l.threshold) {
            bail!(UsageError("limits.threshold must lie in [-1, 1]".into()));
        }
        self.campaign.ablation().map_err(|e| UsageError(e.to_string()))?;
        Ok(())
    }

    /// Opens the LLM session the config describes.
    pub fn gateway(&self) -> Result<Gateway> {
        let g = &self.gateway;
        if g.mode != GatewayMode::Replay {
            if let Some(script) = g.endpoint.strip_prefix(SCRIPT_ENDPOINT_PREFIX) {
                let backend = load_script(Path::new(script))?;
                return Ok(Gateway::from_config_with_backend(g, backend)?);
            }
        }
        Ok(Gateway::from_config(g)?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    rules: Vec<ScriptRule>,
}

/// Loads a scripted backend from a TOML file of `[[rules]]` tables.
pub fn load_script(path: &Path) -> Result<ScriptedBackend> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading script {}", path.display()))?;
    let file: ScriptFile = toml::from_str(&text).with_context(|| format!("parsing script {}", path.display()))?;
    Ok(ScriptedBackend::new(file.rules))
}

/// A command-line or configuration mistake.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: PipelineConfig = toml::from_str("target_function = \"f\"\n").unwrap();
        assert_eq!(cfg.target().unwrap(), "f");
        assert_eq!(cfg.limits.input_attempts, 5);
        assert_eq!(cfg.limits.mutator_rounds, 3);
        assert_eq!(cfg.limits.top_k, 5);
        assert_eq!(cfg.campaign.ablation().unwrap(), Ablation::FULL);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>("target_funtion = \"f\"\n").is_err());
        assert!(toml::from_str::<PipelineConfig>("[limits]\nk = 3\n").is_err());
    }

    #[test]
    fn missing_target_is_a_usage_error() {
        let cfg = PipelineConfig::default();
        let err = cfg.target().unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn non_positive_limits_are_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.limits.input_attempts = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.campaign.ablation = "most".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dgf.toml");
        std::fs::write(
            &p,
            "target_function = \"f\"\nsource_root = \"src\"\nworkspace = \"/abs/ws\"\n[gateway]\nmode = \"record\"\nendpoint = \"script:s.toml\"\ncassette = \"c.jsonl\"\n",
        )
        .unwrap();
        let cfg = PipelineConfig::load(&p).unwrap();
        assert_eq!(cfg.source_root, dir.path().join("src"));
        assert_eq!(cfg.workspace, PathBuf::from("/abs/ws"));
        assert_eq!(cfg.gateway.cassette.unwrap(), dir.path().join("c.jsonl"));
        assert_eq!(cfg.gateway.endpoint, format!("script:{}", dir.path().join("s.toml").display()));
    }

    #[test]
    fn script_files_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.toml");
        std::fs::write(&p, "[[rules]]\nstage = \"input_generation\"\ntag = \"attempt-1\"\nresponses = ['''a''', \"b\"]\n").unwrap();
        load_script(&p).unwrap();
        std::fs::write(&p, "[[rules]]\nstage = \"input_generation\"\nbogus = 1\nresponses = []\n").unwrap();
        assert!(load_script(&p).is_err());
    }
}
