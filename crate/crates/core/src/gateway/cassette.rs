use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GatewayError, TemplateName};

/// Model parameters that take part in the fingerprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub stage: TemplateName,
    /// Step label inside a stage (`analysis`, `refine`, ...). Not fingerprinted.
    #[serde(default)]
    pub tag: String,
    pub prompt: String,
    #[serde(flatten)]
    pub params: ChatParams,
}

impl ChatRequest {
    pub fn fingerprint(&self) -> String {
        fingerprint(self.stage, &self.prompt, self.params)
    }
}

/// One line of a cassette file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatExchange {
    pub fingerprint: String,
    pub request: ChatRequest,
    pub response: String,
}

impl ChatExchange {
    pub fn new(request: ChatRequest, response: String) -> Self {
        Self { fingerprint: request.fingerprint(), request, response }
    }
}

/// Collapses every whitespace run to one space and trims the ends.
pub fn normalize_prompt(prompt: &str) -> String {
    prompt.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// SHA-256 over the canonical JSON of the normalized request. Keys are
/// emitted in sorted order, so slot order and formatting do not matter.
pub fn fingerprint(stage: TemplateName, prompt: &str, params: ChatParams) -> String {
    let mut canon = serde_json::Map::new();
    canon.insert("max_tokens".into(), params.max_tokens.into());
    canon.insert("prompt".into(), normalize_prompt(prompt).into());
    canon.insert("stage".into(), stage.as_str().into());
    canon.insert("temperature".into(), serde_json::json!(params.temperature));
    let bytes = serde_json::to_vec(&serde_json::Value::Object(canon)).expect("json map serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Append-only list of exchanges, optionally backed by a JSONL file.
#[derive(Debug, Default, Clone)]
pub struct Cassette {
    entries: Vec<ChatExchange>,
    by_fingerprint: HashMap<String, Vec<usize>>,
    path: Option<PathBuf>,
}

impl Cassette {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists; later appends go to the same file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let mut c = Self { path: Some(path.clone()), ..Self::default() };
        if path.exists() {
            let file = File::open(&path).map_err(|e| GatewayError::Cassette(format!("{}: {e}", path.display())))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| GatewayError::Cassette(format!("{}: {e}", path.display())))?;
                if line.trim().is_empty() {
                    continue;
                }
                let ex: ChatExchange = serde_json::from_str(&line)
                    .map_err(|e| GatewayError::Cassette(format!("{}:{}: {e}", path.display(), n + 1)))?;
                c.push_entry(ex);
            }
        }
        Ok(c)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn entries(&self) -> &[ChatExchange] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `nth` stored exchange for `fingerprint`, clamped to the last one.
    pub fn lookup(&self, fingerprint: &str, nth: usize) -> Option<&ChatExchange> {
        let idx = self.by_fingerprint.get(fingerprint)?;
        let i = idx[nth.min(idx.len() - 1)];
        Some(&self.entries[i])
    }

    /// Appends in memory and, when file-backed, as one JSONL line.
    pub fn append(&mut self, exchange: ChatExchange) -> Result<(), GatewayError> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| GatewayError::Cassette(format!("{}: {e}", dir.display())))?;
            }
            let mut line = serde_json::to_string(&exchange).map_err(|e| GatewayError::Cassette(e.to_string()))?;
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(|e| GatewayError::Cassette(format!("{}: {e}", path.display())))?;
        }
        self.push_entry(exchange);
        Ok(())
    }

    fn push_entry(&mut self, ex: ChatExchange) {
        self.by_fingerprint.entry(ex.fingerprint.clone()).or_default().push(self.entries.len());
        self.entries.push(ex);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn req(prompt: &str) -> ChatRequest {
        ChatRequest {
            stage: TemplateName::InputGeneration,
            tag: "seed".into(),
            prompt: prompt.into(),
            params: ChatParams::default(),
        }
    }

    #[test]
    fn fingerprint_ignores_whitespace_layout_and_tag() {
        let a = req("Generate  a\tseed\n\nfor  get_row ");
        let mut b = req("Generate a seed for get_row");
        b.tag = "other".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), req("Generate a seed for get_rows").fingerprint());
        let mut c = req("Generate a seed for get_row");
        c.params.temperature = 0.5;
        assert_ne!(a.fingerprint(), c.fingerprint());
        let mut d = req("Generate a seed for get_row");
        d.stage = TemplateName::HarnessGeneration;
        assert_ne!(a.fingerprint(), d.fingerprint());
    }

    #[test]
    fn fingerprint_is_hex_sha256() {
        let f = req("x").fingerprint();
        assert_eq!(f.len(), 64);
        assert!(f.bytes().all(|b| b.is_ascii_hexdigit()));
    }

    #[test]
    fn jsonl_round_trip_and_cursor_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/c.jsonl");
        let mut c = Cassette::open(&path).unwrap();
        c.append(ChatExchange::new(req("p"), "first".into())).unwrap();
        c.append(ChatExchange::new(req("p"), "second".into())).unwrap();
        c.append(ChatExchange::new(req("q"), "other\n\"quoted\"".into())).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);

        let back = Cassette::open(&path).unwrap();
        assert_eq!(back.entries(), c.entries());
        let fp = req("p").fingerprint();
        assert_eq!(back.lookup(&fp, 0).unwrap().response, "first");
        assert_eq!(back.lookup(&fp, 1).unwrap().response, "second");
        assert_eq!(back.lookup(&fp, 9).unwrap().response, "second");
        assert!(back.lookup("nope", 0).is_none());
    }

    #[test]
    fn malformed_line_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "{not json}\n").unwrap();
        match Cassette::open(&path) {
            Err(GatewayError::Cassette(msg)) => assert!(msg.contains(":1:")),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn fingerprint_invariant_under_whitespace_runs(words in proptest::collection::vec("[a-z{}():]{1,8}", 1..12), seps in proptest::collection::vec("[ \t\n]{1,4}", 12)) {
            let single = words.join(" ");
            let mut spread = String::from("  ");
            for (i, w) in words.iter().enumerate() {
                spread.push_str(w);
                spread.push_str(&seps[i]);
            }
            prop_assert_eq!(req(&single).fingerprint(), req(&spread).fingerprint());
        }
    }
}
