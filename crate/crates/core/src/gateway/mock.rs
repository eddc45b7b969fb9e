//! Deterministic mock backend.
//!
//! Scripted responses are keyed by `(kind, room, index)` and loaded from a
//! JSONL file, one `{kind, room, index, response}` object per line. Requests
//! without a scripted entry fall back to one of the unscripted behaviors in
//! [`Fallback`].

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::heuristic;
use super::{Backend, BackendError, GatewayRequest, Prompt, RequestKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fallback {
    /// Empty insights and no labels; summaries use the fixed template.
    Neutral,
    /// Keyword polarity scoring.
    Heuristic,
    /// Distill narrative is the concatenated batch text; labels are empty.
    PassThrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptLine {
    pub kind: RequestKind,
    #[serde(default)]
    pub room: Option<usize>,
    pub index: u64,
    /// The object returned to the gateway. A JSON string is returned verbatim,
    /// which lets scripts simulate prose replies.
    pub response: Value,
    /// Number of leading calls for this key that fail as unavailable.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fail_times: u32,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

#[derive(Debug, Error)]
pub enum ScriptParseError {
    #[error("cannot read mock script: {0}")]
    Io(#[from] std::io::Error),
    #[error("mock script line {line}: {message}")]
    Line { line: usize, message: String },
}

type Key = (RequestKind, Option<usize>, u64);

pub struct MockBackend {
    script: HashMap<Key, ScriptLine>,
    failures: Mutex<HashMap<Key, u32>>,
    fallback: Fallback,
}

impl MockBackend {
    pub fn new(fallback: Fallback) -> Self {
        MockBackend {
            script: HashMap::new(),
            failures: Mutex::new(HashMap::new()),
            fallback,
        }
    }

    pub fn scripted(lines: impl IntoIterator<Item = ScriptLine>) -> Self {
        let mut backend = MockBackend::new(Fallback::Neutral);
        for line in lines {
            backend.script.insert((line.kind, line.room, line.index), line);
        }
        backend
    }

    pub fn with_fallback(mut self, fallback: Fallback) -> Self {
        self.fallback = fallback;
        self
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ScriptParseError> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: ScriptLine = serde_json::from_str(raw).map_err(|e| ScriptParseError::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
            lines.push(line);
        }
        Ok(MockBackend::scripted(lines))
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }

    fn unscripted(&self, request: &GatewayRequest) -> Value {
        match (request.kind, self.fallback) {
            (RequestKind::Summarize, _) => heuristic::template_summary(request),
            (RequestKind::Distill, Fallback::Heuristic) => heuristic::distill(request),
            (RequestKind::Distill, Fallback::PassThrough) => heuristic::pass_through(request),
            (RequestKind::Label, Fallback::Heuristic) => heuristic::label(request),
            (RequestKind::Distill, _) => serde_json::json!({"suggestions": [], "reasons": [], "narrative": ""}),
            (RequestKind::Label, _) => serde_json::json!({"labels": []}),
        }
    }
}

/// Loads a scripted mock backend from a JSONL file.
pub fn mock_script_load(path: impl AsRef<Path>) -> Result<MockBackend, ScriptParseError> {
    let text = std::fs::read_to_string(path)?;
    MockBackend::from_jsonl(&text)
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &GatewayRequest, _prompt: &Prompt) -> Result<String, BackendError> {
        let key = (request.kind, request.room, request.index);
        let Some(entry) = self.script.get(&key) else {
            return Ok(self.unscripted(request).to_string());
        };
        if entry.fail_times > 0 {
            let mut failures = self.failures.lock().unwrap_or_else(|e| e.into_inner());
            let seen = failures.entry(key).or_insert(0);
            if *seen < entry.fail_times {
                *seen += 1;
                return Err(BackendError::Unavailable(format!("scripted failure {} of {}", seen, entry.fail_times)));
            }
        }
        Ok(match &entry.response {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }
}
