use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::json;

use super::{ChatRequest, GatewayError, TemplateName};

/// Anything that can answer a chat request.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError>;
}

/// Retry policy for rate-limited responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 5, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(16)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

pub const DEFAULT_CREDENTIAL_ENV: &str = "DGF_API_KEY";

/// OpenAI-compatible `chat/completions` client.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: String,
    retry: RetryPolicy,
    timeout: Duration,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: api_key.into(),
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(300),
        }
    }

    /// Reads the credential from the environment variable `var`.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>, var: &str) -> Result<Self, GatewayError> {
        let key = std::env::var(var).map_err(|_| GatewayError::MissingCredential(var.to_string()))?;
        if key.trim().is_empty() {
            return Err(GatewayError::MissingCredential(var.to_string()));
        }
        Ok(Self::new(endpoint, model, key))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

impl ChatBackend for HttpBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        });
        let url = self.url();
        let mut attempt = 0;
        loop {
            let result = agent
                .post(&url)
                .set("Authorization", &format!("Bearer {}", self.api_key))
                .send_json(body.clone());
            match result {
                Ok(resp) => {
                    let value: serde_json::Value =
                        resp.into_json().map_err(|e| GatewayError::Transport(format!("bad response body: {e}")))?;
                    return value["choices"][0]["message"]["content"]
                        .as_str()
                        .map(str::to_string)
                        .ok_or_else(|| GatewayError::Transport("response has no choices[0].message.content".into()));
                }
                Err(ureq::Error::Status(429, _)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(GatewayError::RateLimited { attempts: attempt + 1 });
                    }
                    let delay = self.retry.delay(attempt);
                    log::warn!("rate limited, retrying in {delay:?}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    return Err(GatewayError::Transport(format!("HTTP {code}: {}", text.trim())));
                }
                Err(e) => return Err(GatewayError::Transport(e.to_string())),
            }
        }
    }
}

/// One canned answer rule for [`ScriptedBackend`].
#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    pub stage: TemplateName,
    #[serde(default)]
    pub tag: Option<String>,
    #[serde(default)]
    pub prompt_contains: Option<String>,
    pub responses: Vec<String>,
}

impl ScriptRule {
    pub fn new(stage: TemplateName, responses: Vec<String>) -> Self {
        Self { stage, tag: None, prompt_contains: None, responses }
    }

    pub fn tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn when_prompt_contains(mut self, needle: impl Into<String>) -> Self {
        self.prompt_contains = Some(needle.into());
        self
    }

    fn matches(&self, r: &ChatRequest) -> bool {
        self.stage == r.stage
            && self.tag.as_deref().is_none_or(|t| t == r.tag)
            && self.prompt_contains.as_deref().is_none_or(|n| r.prompt.contains(n))
    }
}

#[derive(Debug)]
struct ScriptState {
    rules: Vec<ScriptRule>,
    cursors: Vec<usize>,
}

/// Offline backend answering from rules. The first matching rule wins and
/// steps through its responses, repeating the last one. Every request is
/// appended to a shared call log.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    state: Arc<Mutex<ScriptState>>,
    log: Arc<Mutex<Vec<ChatRequest>>>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let cursors = vec![0; rules.len()];
        Self { state: Arc::new(Mutex::new(ScriptState { rules, cursors })), log: Arc::default() }
    }

    pub fn push_rule(&self, rule: ScriptRule) {
        let mut st = self.state.lock().unwrap();
        st.rules.push(rule);
        st.cursors.push(0);
    }

    pub fn calls(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn calls_for(&self, stage: TemplateName) -> usize {
        self.log.lock().unwrap().iter().filter(|r| r.stage == stage).count()
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.log.lock().unwrap().push(request.clone());
        let mut st = self.state.lock().unwrap();
        let Some(i) = st.rules.iter().position(|r| r.matches(request)) else {
            return Err(GatewayError::NoScriptedResponse { stage: request.stage, tag: request.tag.clone() });
        };
        let n = st.rules[i].responses.len();
        if n == 0 {
            return Err(GatewayError::NoScriptedResponse { stage: request.stage, tag: request.tag.clone() });
        }
        let at = st.cursors[i].min(n - 1);
        st.cursors[i] += 1;
        Ok(st.rules[i].responses[at].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatParams;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn req(stage: TemplateName, tag: &str, prompt: &str) -> ChatRequest {
        ChatRequest { stage, tag: tag.into(), prompt: prompt.into(), params: ChatParams::default() }
    }

    #[test]
    fn scripted_rules_step_and_log() {
        let b = ScriptedBackend::new(vec![
            ScriptRule::new(TemplateName::MutatorGeneration, vec!["A".into()]).tag("analysis"),
            ScriptRule::new(TemplateName::MutatorGeneration, vec!["S1".into(), "S2".into()]),
        ]);
        let m = TemplateName::MutatorGeneration;
        assert_eq!(b.chat(&req(m, "analysis", "x")).unwrap(), "A");
        assert_eq!(b.chat(&req(m, "strategy", "x")).unwrap(), "S1");
        assert_eq!(b.chat(&req(m, "code", "x")).unwrap(), "S2");
        assert_eq!(b.chat(&req(m, "code", "x")).unwrap(), "S2");
        assert!(matches!(
            b.chat(&req(TemplateName::InputGeneration, "", "x")),
            Err(GatewayError::NoScriptedResponse { .. })
        ));
        assert_eq!(b.call_count(), 5);
        assert_eq!(b.calls_for(m), 4);
    }

    #[test]
    fn retry_delay_doubles_and_caps() {
        let p = RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(10), max_delay: Duration::from_millis(50) };
        assert_eq!(p.delay(0), Duration::from_millis(10));
        assert_eq!(p.delay(1), Duration::from_millis(20));
        assert_eq!(p.delay(3), Duration::from_millis(50));
        assert_eq!(p.delay(40), Duration::from_millis(50));
    }

    /// Serves the given status codes in order, one connection each.
    fn serve(statuses: Vec<u16>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let mut auths = Vec::new();
            for status in statuses {
                let (mut sock, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(sock.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auths.push(line.trim().to_string());
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let payload = if status == 200 {
                    r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#
                } else {
                    r#"{"error":"slow down"}"#
                };
                write!(
                    sock,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                )
                .unwrap();
            }
            auths
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn fast_retry(max_retries: u32) -> RetryPolicy {
        RetryPolicy { max_retries, base_delay: Duration::from_millis(1), max_delay: Duration::from_millis(5) }
    }

    #[test]
    fn http_backend_retries_429_then_succeeds() {
        let (url, server) = serve(vec![429, 429, 200]);
        let b = HttpBackend::new(url, "m", "secret").with_retry(fast_retry(3));
        let out = b.chat(&req(TemplateName::HarnessGeneration, "", "hi")).unwrap();
        assert_eq!(out, "hello");
        let auths = server.join().unwrap();
        assert_eq!(auths.len(), 3);
        assert!(auths.iter().all(|a| a.ends_with("Bearer secret")));
    }

    #[test]
    fn http_backend_surfaces_rate_limit_after_cap() {
        let (url, server) = serve(vec![429, 429]);
        let b = HttpBackend::new(url, "m", "k").with_retry(fast_retry(1));
        let err = b.chat(&req(TemplateName::HarnessGeneration, "", "hi")).unwrap_err();
        assert!(matches!(err, GatewayError::RateLimited { attempts: 2 }));
        server.join().unwrap();
    }

    #[test]
    fn missing_credential_is_reported() {
        let err = HttpBackend::from_env("http://x", "m", "DGF_TEST_SURELY_UNSET_VAR").unwrap_err();
        assert!(matches!(err, GatewayError::MissingCredential(v) if v == "DGF_TEST_SURELY_UNSET_VAR"));
    }
}
