//! Chat-completion access with prompt templates and a record/replay cassette.
//!
//! Every pipeline stage talks to the model through [`Gateway::complete`]. In
//! `record` mode each exchange is appended to a JSONL cassette; in `replay`
//! mode the cassette answers instead of the model, keyed by a fingerprint of
//! the normalized request.

mod backend;
mod cassette;
mod template;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{ChatBackend, HttpBackend, RetryPolicy, ScriptRule, ScriptedBackend, DEFAULT_CREDENTIAL_ENV};
pub use cassette::{fingerprint, normalize_prompt, Cassette, ChatExchange, ChatParams, ChatRequest};
pub use template::{slots, PromptTemplate, TemplateError, TemplateName};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("no cassette entry for fingerprint {0}")]
    ReplayMiss(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error("cassette: {0}")]
    Cassette(String),
    #[error("{0} mode needs a cassette path")]
    NoCassette(GatewayMode),
    #[error("no scripted response for stage {stage} tag {tag:?}")]
    NoScriptedResponse { stage: TemplateName, tag: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    #[default]
    Replay,
}

impl std::fmt::Display for GatewayMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Live => "live",
            Self::Record => "record",
            Self::Replay => "replay",
        })
    }
}

impl std::str::FromStr for GatewayMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Self::Live),
            "record" => Ok(Self::Record),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown gateway mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    pub cassette: Option<PathBuf>,
    pub endpoint: String,
    pub model: String,
    pub credential_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_retries: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        let p = ChatParams::default();
        Self {
            mode: GatewayMode::Replay,
            cassette: None,
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            credential_env: DEFAULT_CREDENTIAL_ENV.into(),
            temperature: p.temperature,
            max_tokens: p.max_tokens,
            max_retries: RetryPolicy::default().max_retries,
        }
    }
}

impl From<&GatewayConfig> for ChatParams {
    fn from(cfg: &GatewayConfig) -> Self {
        Self { temperature: cfg.temperature, max_tokens: cfg.max_tokens }
    }
}

/// One LLM session. Cheap to share by reference across stages.
pub struct Gateway {
    mode: GatewayMode,
    backend: Option<Arc<dyn ChatBackend>>,
    cassette: Mutex<Cassette>,
    cursors: Mutex<HashMap<String, usize>>,
    params: ChatParams,
    calls: AtomicUsize,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("params", &self.params)
            .field("calls", &self.calls.load(Ordering::Relaxed))
            .finish()
    }
}

impl Gateway {
    fn build(mode: GatewayMode, backend: Option<Arc<dyn ChatBackend>>, cassette: Cassette) -> Self {
        Self {
            mode,
            backend,
            cassette: Mutex::new(cassette),
            cursors: Mutex::default(),
            params: ChatParams::default(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn live(backend: impl ChatBackend + 'static) -> Self {
        Self::build(GatewayMode::Live, Some(Arc::new(backend)), Cassette::in_memory())
    }

    pub fn record(backend: impl ChatBackend + 'static, cassette: Cassette) -> Self {
        Self::build(GatewayMode::Record, Some(Arc::new(backend)), cassette)
    }

    pub fn replay(cassette: Cassette) -> Self {
        Self::build(GatewayMode::Replay, None, cassette)
    }

    /// Builds a session from configuration. Live and record modes talk HTTP.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        if cfg.mode == GatewayMode::Replay {
            let cassette = Cassette::open(cfg.cassette.as_ref().ok_or(GatewayError::NoCassette(cfg.mode))?)?;
            return Ok(Self::replay(cassette).with_params(ChatParams::from(cfg)));
        }
        let retry = RetryPolicy { max_retries: cfg.max_retries, ..RetryPolicy::default() };
        let http = HttpBackend::from_env(&cfg.endpoint, &cfg.model, &cfg.credential_env)?.with_retry(retry);
        Self::from_config_with_backend(cfg, http)
    }

    /// Same as [`Gateway::from_config`] but with an explicit backend for the
    /// live and record modes.
    pub fn from_config_with_backend(
        cfg: &GatewayConfig,
        backend: impl ChatBackend + 'static,
    ) -> Result<Self, GatewayError> {
        let cassette = match (&cfg.cassette, cfg.mode) {
            (Some(p), _) => Cassette::open(p)?,
            (None, GatewayMode::Live) => Cassette::in_memory(),
            (None, mode) => return Err(GatewayError::NoCassette(mode)),
        };
        let gw = match cfg.mode {
            GatewayMode::Replay => Self::replay(cassette),
            mode => Self::build(mode, Some(Arc::new(backend)), cassette),
        };
        Ok(gw.with_params(ChatParams::from(cfg)))
    }

    pub fn with_params(mut self, params: ChatParams) -> Self {
        self.params = params;
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn params(&self) -> ChatParams {
        self.params
    }

    /// Completions served so far in this session.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn cassette_snapshot(&self) -> Cassette {
        self.cassette.lock().unwrap().clone()
    }

    /// Sends `prompt` for `stage`. `tag` labels the step for scripted
    /// backends and cassette readers.
    pub fn complete(&self, stage: TemplateName, tag: &str, prompt: &str) -> Result<String, GatewayError> {
        let request = ChatRequest { stage, tag: tag.to_string(), prompt: prompt.to_string(), params: self.params };
        let out = match self.mode {
            GatewayMode::Replay => {
                let fp = request.fingerprint();
                let nth = {
                    let mut cursors = self.cursors.lock().unwrap();
                    let c = cursors.entry(fp.clone()).or_insert(0);
                    *c += 1;
                    *c - 1
                };
                let cassette = self.cassette.lock().unwrap();
                cassette.lookup(&fp, nth).map(|e| e.response.clone()).ok_or(GatewayError::ReplayMiss(fp))?
            }
            GatewayMode::Live => self.backend().chat(&request)?,
            GatewayMode::Record => {
                let response = self.backend().chat(&request)?;
                self.cassette.lock().unwrap().append(ChatExchange::new(request, response.clone()))?;
                response
            }
        };
        self.calls.fetch_add(1, Ordering::SeqCst);
        log::debug!("gateway {stage}/{tag}: {} prompt bytes -> {} response bytes", prompt.len(), out.len());
        Ok(out)
    }

    /// Renders the builtin template for `stage` and completes it.
    pub fn ask(&self, stage: TemplateName, tag: &str, slots: &BTreeMap<String, String>) -> Result<String, GatewayError> {
        let prompt = PromptTemplate::builtin(stage).render(slots)?;
        self.complete(stage, tag, &prompt)
    }

    fn backend(&self) -> &dyn ChatBackend {
        self.backend.as_deref().expect("live and record sessions always carry a backend")
    }
}

/// Returns the body of the first fenced code block whose info string is one
/// of `langs` (any block when `langs` is empty). Falls back to the first
/// fenced block of any language.
pub fn extract_fenced(text: &str, langs: &[&str]) -> Option<String> {
    let mut blocks: Vec<(String, String)> = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let t = line.trim_start();
        let Some(info) = t.strip_prefix("```") else { continue };
        let info = info.trim().to_ascii_lowercase();
        let mut body = String::new();
        for inner in lines.by_ref() {
            if inner.trim_start().starts_with("```") {
                break;
            }
            body.push_str(inner);
            body.push('\n');
        }
        blocks.push((info, body));
    }
    blocks
        .iter()
        .find(|(info, _)| langs.is_empty() || langs.iter().any(|l| info == l))
        .or_else(|| blocks.first())
        .map(|(_, b)| b.clone())
}
