//! Completion backends: a deterministic offline stub and an HTTP client
//! for chat-completions style endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::parse::extract_json_objects;
use super::{bin_midpoint, snap_to_bin_midpoint, BIN_LABELS};

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Verbatim request body, when the backend speaks a wire protocol.
    pub raw_request: Option<String>,
    pub raw_response: Option<String>,
}

impl Completion {
    fn local(text: String) -> Self {
        Completion { text, raw_request: None, raw_response: None }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend config: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("stub backend could not classify the prompt")]
    UnrecognizedPrompt,
}

/// A completion provider. Implementations must return or fail in bounded
/// time; the decision loop never inspects anything but the result.
pub trait LlmBackend: Send {
    fn name(&self) -> String;
    fn complete(&mut self, req: &CompletionRequest) -> Result<Completion, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StubPolicy {
    /// Always adjusts by 0; the pipeline-correctness oracle.
    Zero,
    /// Steers spend toward elapsed time, one bin midpoint per step.
    Pacing,
}

/// Offline deterministic backend answering all four prompt kinds with
/// schema-valid JSON.
#[derive(Debug, Clone)]
pub struct StubBackend {
    policy: StubPolicy,
}

impl StubBackend {
    pub fn zero() -> Self {
        StubBackend { policy: StubPolicy::Zero }
    }

    pub fn pacing() -> Self {
        StubBackend { policy: StubPolicy::Pacing }
    }

    fn insight_completion() -> String {
        let mut obj = serde_json::Map::new();
        for (i, label) in BIN_LABELS.iter().enumerate() {
            obj.insert(
                format!("adjustment range for {label}"),
                json!(format!("scales bids by about {:.2}x", 1.0 + bin_midpoint(i))),
            );
        }
        serde_json::Value::Object(obj).to_string()
    }

    fn pacing_action(prompt: &str) -> Result<String, BackendError> {
        let status = extract_json_objects(prompt)
            .into_iter()
            .find(|o| o.contains_key("remaining_budget"))
            .ok_or(BackendError::UnrecognizedPrompt)?;
        let num = |key: &str| -> Result<f64, BackendError> {
            status
                .get(key)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| BackendError::MalformedResponse(format!("status lacks {key}")))
        };
        let total = num("total_budget")?;
        let remaining = num("remaining_budget")?;
        let step = num("step_index")?;
        let steps_per_day = num("steps_per_day")?.max(1.0);
        let rho_spend = if total > 0.0 { (total - remaining) / total } else { 0.0 };
        let rho_time = step / steps_per_day;
        let raw = 0.45 * (rho_time - rho_spend) / rho_time.max(1.0 / steps_per_day);
        let a = snap_to_bin_midpoint(raw.clamp(-0.45, 0.45));
        Ok(json!({
            "adjustment": a,
            "reason": format!("pacing: time {rho_time:.2} vs spend {rho_spend:.2}"),
        })
        .to_string())
    }
}

impl LlmBackend for StubBackend {
    fn name(&self) -> String {
        match self.policy {
            StubPolicy::Zero => "stub:zero".into(),
            StubPolicy::Pacing => "stub:pacing".into(),
        }
    }

    fn complete(&mut self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let p = req.prompt.as_str();
        let text = if p.contains("adjustment range for") {
            Self::insight_completion()
        } else if p.contains("\"adjustment\"") {
            match self.policy {
                StubPolicy::Zero => {
                    json!({"adjustment": 0.0, "reason": "hold the base scale"}).to_string()
                }
                StubPolicy::Pacing => Self::pacing_action(p)?,
            }
        } else if p.contains("\"reflection\"") {
            json!({"reflection": "spend pace and win rate noted; keep the scale aligned with the remaining budget"})
                .to_string()
        } else if p.contains("\"summary\"") {
            json!({"summary": "recent records reviewed; spend, wins, and clicks tracked"})
                .to_string()
        } else {
            return Err(BackendError::UnrecognizedPrompt);
        };
        Ok(Completion::local(text))
    }
}

fn default_base_url() -> String {
    "http://localhost:8000/v1".to_string()
}

fn default_model() -> String {
    "default".to_string()
}

fn default_timeout() -> u64 {
    60
}

/// Chat-completions endpoint settings. The API key is read from the
/// process environment, never stored in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    /// Overrides the per-request temperature when set.
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: default_base_url(),
            model: default_model(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            temperature: None,
            max_tokens: None,
        }
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    cfg: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("api key environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend { cfg, api_key, client })
    }
}

impl LlmBackend for HttpBackend {
    fn name(&self) -> String {
        format!("http:{}", self.cfg.model)
    }

    fn complete(&mut self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": self.cfg.temperature.unwrap_or(req.temperature),
        });
        if let Some(mt) = req.max_tokens.or(self.cfg.max_tokens) {
            body["max_tokens"] = json!(mt);
        }
        let raw_request = body.to_string();
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let raw = response.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status { status: status.as_u16(), body: raw });
        }
        let value: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| {
                BackendError::MalformedResponse("no choices[0].message.content".into())
            })?
            .to_string();
        Ok(Completion { text, raw_request: Some(raw_request), raw_response: Some(raw) })
    }
}
