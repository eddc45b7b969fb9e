//! Chat-completion client for a hosted model.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{Backend, BackendError, GatewayRequest, Prompt, RequestKind};

#[derive(Clone, Debug)]
pub struct RemoteConfig {
    pub url: String,
    pub key: String,
    pub distill_model: String,
    pub label_model: String,
    pub summarize_model: String,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>, key: impl Into<String>) -> Self {
        RemoteConfig {
            url: url.into(),
            key: key.into(),
            distill_model: "gpt-4".into(),
            label_model: "gpt-3.5-turbo".into(),
            summarize_model: "gpt-4".into(),
            timeout: Duration::from_secs(10),
        }
    }

    /// Reads `GATEWAY_URL`, `GATEWAY_KEY`, optional `GATEWAY_TIMEOUT_MS` and
    /// the per-kind model overrides `GATEWAY_MODEL_DISTILL`,
    /// `GATEWAY_MODEL_LABEL`, `GATEWAY_MODEL_SUMMARIZE`.
    pub fn from_env() -> Result<Self, String> {
        let var = |name: &str| std::env::var(name).map_err(|_| format!("{name} is not set"));
        let mut config = RemoteConfig::new(var("GATEWAY_URL")?, var("GATEWAY_KEY")?);
        if let Ok(ms) = std::env::var("GATEWAY_TIMEOUT_MS") {
            config.timeout = Duration::from_millis(ms.parse().map_err(|_| format!("bad GATEWAY_TIMEOUT_MS {ms:?}"))?);
        }
        for (name, slot) in [
            ("GATEWAY_MODEL_DISTILL", &mut config.distill_model),
            ("GATEWAY_MODEL_LABEL", &mut config.label_model),
            ("GATEWAY_MODEL_SUMMARIZE", &mut config.summarize_model),
        ] {
            if let Ok(model) = std::env::var(name) {
                *slot = model;
            }
        }
        Ok(config)
    }

    fn model(&self, kind: RequestKind) -> &str {
        match kind {
            RequestKind::Distill => &self.distill_model,
            RequestKind::Label => &self.label_model,
            RequestKind::Summarize => &self.summarize_model,
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    client: Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, reqwest::Error> {
        let client = Client::builder().timeout(config.timeout).build()?;
        Ok(RemoteBackend { config, client })
    }

    /// Request body sent for `request`.
    pub fn body(&self, request: &GatewayRequest, prompt: &Prompt) -> Value {
        json!({
            "model": self.config.model(request.kind),
            "temperature": 0,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
        })
    }
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete(&self, request: &GatewayRequest, prompt: &Prompt) -> Result<String, BackendError> {
        let response = self
            .client
            .post(&self.config.url)
            .bearer_auth(&self.config.key)
            .json(&self.body(request, prompt))
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout
                } else {
                    BackendError::Unavailable(e.to_string())
                }
            })?;
        let status = response.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            let retry_after = response
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(BackendError::RateLimited { retry_after });
        }
        if !status.is_success() {
            return Err(BackendError::Unavailable(format!("HTTP {status}")));
        }
        let payload: Value = response.json().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Unavailable(e.to_string())
            }
        })?;
        // Anything other than the expected envelope is handed to the gateway
        // as text so it goes through the same parse-and-retry path.
        Ok(payload
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| payload.to_string()))
    }
}
