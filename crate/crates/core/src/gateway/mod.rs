//! The single entry point for language-model work.
//!
//! Three request kinds go through [`Gateway::call`]: `distill` (observer
//! insight extraction), `label` (preference scoring) and `summarize`
//! (argument narratives for reports). A [`Backend`] only produces raw text;
//! the gateway parses it against the request's schema, clamps or drops
//! out-of-range values and retries once on unparseable output, so malformed
//! model output never reaches the rest of the system.

mod heuristic;
mod mock;
mod remote;

use std::collections::HashSet;
use std::fmt;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::Polarity;
use crate::message::AuthorKind;
use crate::time::ParticipantId;

pub use mock::{mock_script_load, Fallback, MockBackend, ScriptLine, ScriptParseError};
pub use remote::{RemoteBackend, RemoteConfig};

pub const DISTILL_SCHEMA: &str = "distill.v1";
pub const LABEL_SCHEMA: &str = "label.v1";
pub const SUMMARIZE_SCHEMA: &str = "summarize.v1";

const DISTILL_PROMPT: &str = include_str!("prompts/distill.v1.txt");
const LABEL_PROMPT: &str = include_str!("prompts/label.v1.txt");
const SUMMARIZE_PROMPT: &str = include_str!("prompts/summarize.v1.txt");
const SYSTEM_PROMPT: &str = "You are a careful deliberation analyst. Reply with one JSON object and nothing else.";

pub const MIN_SCORE: i8 = -3;
pub const MAX_SCORE: i8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Distill,
    Label,
    Summarize,
}

impl RequestKind {
    pub fn schema_id(self) -> &'static str {
        match self {
            RequestKind::Distill => DISTILL_SCHEMA,
            RequestKind::Label => LABEL_SCHEMA,
            RequestKind::Summarize => SUMMARIZE_SCHEMA,
        }
    }
}

impl fmt::Display for RequestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestKind::Distill => "distill",
            RequestKind::Label => "label",
            RequestKind::Summarize => "summarize",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionContext {
    pub session_id: String,
    pub question: String,
    /// Configured options followed by suggestions accumulated so far.
    pub options: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineRole {
    /// Dialog the request is about.
    New,
    /// Earlier dialog supplied so references can be resolved.
    Context,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogLine {
    pub author: ParticipantId,
    pub author_kind: AuthorKind,
    pub text: String,
    pub role: LineRole,
}

impl DialogLine {
    pub fn new(author: ParticipantId, author_kind: AuthorKind, text: impl Into<String>, role: LineRole) -> Self {
        DialogLine {
            author,
            author_kind,
            text: text.into(),
            role,
        }
    }
}

/// What a `summarize` request is about.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummarySubject {
    pub option: String,
    pub polarity: Polarity,
    /// Distinct participants behind the reasons in the payload.
    pub participants: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatewayRequest {
    pub kind: RequestKind,
    pub context: SessionContext,
    /// Room the request originates from; `None` for session-wide requests.
    pub room: Option<usize>,
    /// Batch index for `distill`, pass index for `label`, option ordinal for
    /// `summarize`. Together with `kind` and `room` it keys scripted mocks.
    pub index: u64,
    pub payload: Vec<DialogLine>,
    /// Participants that may be labeled or credited with reasons.
    pub members: Vec<ParticipantId>,
    pub subject: Option<SummarySubject>,
    pub schema: &'static str,
}

impl GatewayRequest {
    pub fn distill(context: SessionContext, room: usize, batch_index: u64, payload: Vec<DialogLine>, members: Vec<ParticipantId>) -> Self {
        GatewayRequest {
            kind: RequestKind::Distill,
            context,
            room: Some(room),
            index: batch_index,
            payload,
            members,
            subject: None,
            schema: DISTILL_SCHEMA,
        }
    }

    pub fn label(context: SessionContext, room: usize, pass_index: u64, payload: Vec<DialogLine>, members: Vec<ParticipantId>) -> Self {
        GatewayRequest {
            kind: RequestKind::Label,
            context,
            room: Some(room),
            index: pass_index,
            payload,
            members,
            subject: None,
            schema: LABEL_SCHEMA,
        }
    }

    pub fn summarize(context: SessionContext, ordinal: u64, subject: SummarySubject, payload: Vec<DialogLine>) -> Self {
        GatewayRequest {
            kind: RequestKind::Summarize,
            context,
            room: None,
            index: ordinal,
            payload,
            members: Vec::new(),
            subject: Some(subject),
            schema: SUMMARIZE_SCHEMA,
        }
    }

    fn check(&self) -> Result<(), GatewayError> {
        if self.payload.is_empty() {
            return Err(GatewayError::InvalidRequest("empty payload".into()));
        }
        if self.schema != self.kind.schema_id() {
            return Err(GatewayError::InvalidRequest(format!(
                "schema {} does not match {} request",
                self.schema, self.kind
            )));
        }
        if self.kind == RequestKind::Summarize && self.subject.is_none() {
            return Err(GatewayError::InvalidRequest("summarize without subject".into()));
        }
        Ok(())
    }

    /// Renders the versioned prompt template for this request.
    pub fn prompt(&self) -> Prompt {
        let options = if self.context.options.is_empty() {
            "(open-ended: none yet)".to_string()
        } else {
            self.context.options.join(", ")
        };
        let dialog = self
            .payload
            .iter()
            .map(|line| self.render_line(line))
            .collect::<Vec<_>>()
            .join("\n");
        let template = match self.kind {
            RequestKind::Distill => DISTILL_PROMPT,
            RequestKind::Label => LABEL_PROMPT,
            RequestKind::Summarize => SUMMARIZE_PROMPT,
        };
        let mut user = template
            .replace("{question}", &self.context.question)
            .replace("{options}", &options)
            .replace(
                "{members}",
                &self.members.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", "),
            )
            .replace("{dialog}", &dialog);
        if let Some(subject) = &self.subject {
            user = user
                .replace("{option}", &subject.option)
                .replace("{polarity}", subject.polarity.phrase())
                .replace("{count}", &subject.participants.to_string());
        }
        Prompt {
            system: SYSTEM_PROMPT.to_string(),
            user,
        }
    }

    fn render_line(&self, line: &DialogLine) -> String {
        let who = match line.author_kind {
            AuthorKind::Human => line.author.to_string(),
            AuthorKind::SurrogateAgent => format!("{} (agent)", line.author),
        };
        match (self.kind, line.role) {
            (RequestKind::Label, LineRole::New) => format!("[new] {who}: {}", line.text),
            (RequestKind::Label, LineRole::Context) => format!("[context] {who}: {}", line.text),
            (RequestKind::Summarize, _) => format!("- {} ({who})", line.text),
            (RequestKind::Distill, _) => format!("{who}: {}", line.text),
        }
    }

    /// Options a response may refer to.
    fn known_options(&self) -> HashSet<&str> {
        self.context.options.iter().map(String::as_str).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedReason {
    pub option: String,
    pub polarity: Polarity,
    pub text: String,
    pub conviction: u8,
    pub author: ParticipantId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillOutput {
    pub suggestions: Vec<String>,
    pub reasons: Vec<ExtractedReason>,
    pub narrative: String,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScoreLabel {
    pub user: ParticipantId,
    pub option: String,
    pub score: i8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResponseBody {
    Distill(DistillOutput),
    Label(Vec<ScoreLabel>),
    Summarize(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatewayResponse {
    pub body: ResponseBody,
    pub latency_ms: u64,
    pub backend: String,
    /// Values the gateway had to clamp or drop while validating.
    pub warnings: Vec<String>,
}

impl GatewayResponse {
    pub fn into_distill(self) -> Option<DistillOutput> {
        match self.body {
            ResponseBody::Distill(d) => Some(d),
            _ => None,
        }
    }

    pub fn into_labels(self) -> Option<Vec<ScoreLabel>> {
        match self.body {
            ResponseBody::Label(l) => Some(l),
            _ => None,
        }
    }

    pub fn into_summary(self) -> Option<String> {
        match self.body {
            ResponseBody::Summarize(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend timed out")]
    Timeout,
    #[error("backend rate limited")]
    RateLimited { retry_after: Option<Duration> },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("backend error: {0}")]
    BackendError(String),
    #[error("gateway call timed out")]
    Timeout,
    #[error("rate limited after {0} attempts")]
    RateLimited(u32),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Produces raw model text for a request.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &GatewayRequest, prompt: &Prompt) -> Result<String, BackendError>;
}

#[derive(Clone, Debug)]
pub struct GatewayConfig {
    pub max_inflight: usize,
    pub rate_limit_attempts: u32,
    pub base_backoff: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_inflight: 8,
            rate_limit_attempts: 4,
            base_backoff: Duration::from_millis(250),
        }
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
struct InflightLimiter {
    limit: usize,
    state: Mutex<(usize, usize)>,
    freed: Condvar,
}

impl InflightLimiter {
    fn new(limit: usize) -> Self {
        InflightLimiter {
            limit: limit.max(1),
            state: Mutex::new((0, 0)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InflightPermit<'_> {
        let mut guard = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while guard.0 >= self.limit {
            guard = self.freed.wait(guard).unwrap_or_else(|e| e.into_inner());
        }
        guard.0 += 1;
        guard.1 = guard.1.max(guard.0);
        InflightPermit { limiter: self }
    }

    fn peak(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).1
    }
}

struct InflightPermit<'a> {
    limiter: &'a InflightLimiter,
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut guard = self.limiter.state.lock().unwrap_or_else(|e| e.into_inner());
        guard.0 -= 1;
        self.limiter.freed.notify_one();
    }
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    limiter: InflightLimiter,
    config: GatewayConfig,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.name())
            .field("config", &self.config)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Self::with_config(backend, GatewayConfig::default())
    }

    pub fn with_config(backend: impl Backend + 'static, config: GatewayConfig) -> Self {
        Gateway {
            backend: Box::new(backend),
            limiter: InflightLimiter::new(config.max_inflight),
            config,
        }
    }

    /// Mock gateway answering everything heuristically.
    pub fn heuristic() -> Self {
        Gateway::new(MockBackend::new(Fallback::Heuristic))
    }

    /// Mock gateway whose distill narrative is the raw batch text.
    pub fn pass_through() -> Self {
        Gateway::new(MockBackend::new(Fallback::PassThrough))
    }

    /// Builds a gateway from `GATEWAY_BACKEND`, `GATEWAY_URL`, `GATEWAY_KEY`,
    /// `GATEWAY_MAX_INFLIGHT` and, for the mock, `GATEWAY_MOCK_SCRIPT`.
    pub fn from_env() -> Result<Self, String> {
        let mut config = GatewayConfig::default();
        if let Ok(v) = std::env::var("GATEWAY_MAX_INFLIGHT") {
            config.max_inflight = v.parse().map_err(|_| format!("bad GATEWAY_MAX_INFLIGHT {v:?}"))?;
        }
        match std::env::var("GATEWAY_BACKEND").as_deref().unwrap_or("mock") {
            "mock" => {
                let backend = match std::env::var("GATEWAY_MOCK_SCRIPT") {
                    Ok(path) => mock_script_load(path).map_err(|e| e.to_string())?,
                    Err(_) => MockBackend::new(Fallback::Heuristic),
                };
                Ok(Gateway::with_config(backend, config))
            }
            "remote" => {
                let remote = RemoteBackend::new(RemoteConfig::from_env()?).map_err(|e| e.to_string())?;
                Ok(Gateway::with_config(remote, config))
            }
            other => Err(format!("unknown GATEWAY_BACKEND {other:?}")),
        }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Highest number of simultaneous backend calls observed so far.
    pub fn peak_inflight(&self) -> usize {
        self.limiter.peak()
    }

    pub fn call(&self, request: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        request.check()?;
        let prompt = request.prompt();
        let started = Instant::now();
        let mut parse_retry_used = false;
        let mut rate_limited = 0u32;
        loop {
            let raw = {
                let _permit = self.limiter.acquire();
                self.backend.complete(request, &prompt)
            };
            match raw {
                Ok(text) => match validate(request, &text) {
                    Ok((body, warnings)) => {
                        for w in &warnings {
                            log::warn!("gateway {} {:?}/{}: {w}", request.kind, request.room, request.index);
                        }
                        return Ok(GatewayResponse {
                            body,
                            latency_ms: started.elapsed().as_millis() as u64,
                            backend: self.backend.name().to_string(),
                            warnings,
                        });
                    }
                    Err(reason) if !parse_retry_used => {
                        log::warn!("gateway {} output unparseable ({reason}), retrying", request.kind);
                        parse_retry_used = true;
                    }
                    Err(reason) => return Err(GatewayError::BackendError(format!("unparseable output: {reason}"))),
                },
                Err(BackendError::RateLimited { retry_after }) => {
                    rate_limited += 1;
                    if rate_limited >= self.config.rate_limit_attempts {
                        return Err(GatewayError::RateLimited(rate_limited));
                    }
                    let backoff = retry_after.unwrap_or(self.config.base_backoff * 2u32.pow(rate_limited - 1));
                    std::thread::sleep(backoff);
                }
                Err(BackendError::Timeout) => return Err(GatewayError::Timeout),
                Err(BackendError::Unavailable(msg)) => return Err(GatewayError::BackendError(msg)),
            }
        }
    }
}

/// Extracts the JSON object from model text, tolerating a code fence.
fn extract_object(text: &str) -> Result<serde_json::Map<String, Value>, String> {
    let mut trimmed = text.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        trimmed = rest.trim().strip_suffix("```").unwrap_or(rest).trim();
    }
    match serde_json::from_str::<Value>(trimmed) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err("top-level value is not an object".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn as_integer(value: &Value) -> Option<i64> {
    match value {
        Value::Number(n) => n.as_i64().or_else(|| n.as_f64().map(|f| f.round() as i64)),
        Value::String(s) => s.trim().trim_start_matches('+').parse::<f64>().ok().map(|f| f.round() as i64),
        _ => None,
    }
}

fn as_string(value: Option<&Value>) -> Option<String> {
    value.and_then(Value::as_str).map(|s| s.trim().to_string())
}

type Validated = (ResponseBody, Vec<String>);

fn validate(request: &GatewayRequest, text: &str) -> Result<Validated, String> {
    let object = extract_object(text)?;
    let mut warnings = Vec::new();
    let members: HashSet<&str> = request.members.iter().map(|m| m.as_str()).collect();
    let body = match request.kind {
        RequestKind::Label => {
            let labels = object
                .get("labels")
                .and_then(Value::as_array)
                .ok_or_else(|| "missing \"labels\" array".to_string())?;
            let known = request.known_options();
            let mut out = Vec::new();
            for entry in labels {
                let (Some(user), Some(option), Some(score)) = (
                    as_string(entry.get("user")),
                    as_string(entry.get("option")),
                    entry.get("score").and_then(as_integer),
                ) else {
                    warnings.push(format!("dropped malformed label {entry}"));
                    continue;
                };
                if !known.contains(option.as_str()) {
                    warnings.push(format!("dropped label for unknown option {option:?}"));
                    continue;
                }
                if !members.is_empty() && !members.contains(user.as_str()) {
                    warnings.push(format!("dropped label for non-member {user:?}"));
                    continue;
                }
                let clamped = score.clamp(MIN_SCORE as i64, MAX_SCORE as i64);
                if clamped != score {
                    warnings.push(format!("clamped score {score} to {clamped} for {user}/{option}"));
                }
                out.push(ScoreLabel {
                    user: ParticipantId(user),
                    option,
                    score: clamped as i8,
                });
            }
            ResponseBody::Label(out)
        }
        RequestKind::Distill => {
            let mut known: HashSet<String> = request.context.options.iter().cloned().collect();
            let mut suggestions = Vec::new();
            for s in object.get("suggestions").and_then(Value::as_array).into_iter().flatten() {
                match s.as_str().map(str::trim) {
                    Some(label) if !label.is_empty() => {
                        if known.insert(label.to_string()) {
                            suggestions.push(label.to_string());
                        }
                    }
                    _ => warnings.push(format!("dropped malformed suggestion {s}")),
                }
            }
            let mut reasons = Vec::new();
            for entry in object.get("reasons").and_then(Value::as_array).into_iter().flatten() {
                let option = as_string(entry.get("option"));
                let polarity = entry.get("polarity").and_then(Value::as_str).and_then(Polarity::parse);
                let text = as_string(entry.get("text")).unwrap_or_default();
                let author = as_string(entry.get("author"));
                let (Some(option), Some(polarity), Some(author)) = (option, polarity, author) else {
                    warnings.push(format!("dropped malformed reason {entry}"));
                    continue;
                };
                if !known.contains(&option) {
                    warnings.push(format!("dropped reason for unknown option {option:?}"));
                    continue;
                }
                if !members.is_empty() && !members.contains(author.as_str()) {
                    warnings.push(format!("dropped reason by non-member {author:?}"));
                    continue;
                }
                let raw = entry.get("conviction").and_then(as_integer).unwrap_or(1);
                let conviction = raw.clamp(1, 3);
                if conviction != raw {
                    warnings.push(format!("clamped conviction {raw} to {conviction}"));
                }
                reasons.push(ExtractedReason {
                    option,
                    polarity,
                    text,
                    conviction: conviction as u8,
                    author: ParticipantId(author),
                });
            }
            let mut narrative = as_string(object.get("narrative")).unwrap_or_default();
            if narrative.is_empty() && (!reasons.is_empty() || !suggestions.is_empty()) {
                narrative = heuristic::narrative_from(&suggestions, &reasons);
            }
            ResponseBody::Distill(DistillOutput {
                suggestions,
                reasons,
                narrative,
            })
        }
        RequestKind::Summarize => {
            let text = as_string(object.get("text")).ok_or_else(|| "missing \"text\"".to_string())?;
            ResponseBody::Summarize(text)
        }
    };
    Ok((body, warnings))
}
