//! Chat-completion client used for both turns.
//!
//! Requests are POSTed to `{base_url}/chat/completions` with this body:
//!
//! ```json
//! {
//!   "model": "my-vlm",
//!   "temperature": 0.0,
//!   "max_tokens": 1024,
//!   "messages": [
//!     {"role": "user", "content": [
//!       {"type": "image_url", "image_url": {"url": "data:image/png;base64,..."}},
//!       {"type": "text", "text": "Identify the current surgical phase. ..."}
//!     ]},
//!     {"role": "assistant", "content": "B) Dissection of Calot's Triangle"},
//!     {"role": "user", "content": [ ... ]}
//!   ]
//! }
//! ```
//!
//! The reply text is `choices[0].message.content`, either a string or a list
//! of `{"type": "text", "text": ...}` parts that are concatenated.

use std::future::Future;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_seconds: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_base_seconds: 1.0 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based count of failures so far).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let secs = self.backoff_base_seconds * 2f64.powi(attempt.saturating_sub(1) as i32);
        Duration::from_secs_f64(secs.max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_seconds: f64,
    pub max_concurrency: usize,
    pub retry_policy: RetryPolicy,
    /// Name of an environment variable holding a bearer token.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "default".into(),
            temperature: 0.0,
            max_tokens: 1024,
            timeout_seconds: 120.0,
            max_concurrency: 4,
            retry_policy: RetryPolicy::default(),
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("temperature must be a finite value >= 0")]
    Temperature,
    #[error("max_tokens must be positive")]
    MaxTokens,
    #[error("timeout_seconds must be positive")]
    Timeout,
    #[error("max_concurrency must be at least 1")]
    Concurrency,
    #[error("retry_policy.max_attempts must be at least 1")]
    Attempts,
    #[error("retry_policy.backoff_base_seconds must be a finite value >= 0")]
    Backoff,
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ConfigError::Temperature);
        }
        if self.max_tokens == 0 {
            return Err(ConfigError::MaxTokens);
        }
        if !(self.timeout_seconds.is_finite() && self.timeout_seconds > 0.0) {
            return Err(ConfigError::Timeout);
        }
        if self.max_concurrency == 0 {
            return Err(ConfigError::Concurrency);
        }
        if self.retry_policy.max_attempts == 0 {
            return Err(ConfigError::Attempts);
        }
        let b = self.retry_policy.backoff_base_seconds;
        if !(b.is_finite() && b >= 0.0) {
            return Err(ConfigError::Backoff);
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MessageContent {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: MessageContent,
}

impl ChatMessage {
    /// A user message carrying an image followed by text.
    pub fn user_with_image(image_url: &str, text: &str) -> Self {
        Self {
            role: "user".into(),
            content: MessageContent::Parts(vec![
                ContentPart::ImageUrl { image_url: ImageUrl { url: image_url.to_string() } },
                ContentPart::Text { text: text.to_string() },
            ]),
        }
    }

    pub fn assistant(text: &str) -> Self {
        Self { role: "assistant".into(), content: MessageContent::Text(text.to_string()) }
    }

    /// Concatenated text parts.
    pub fn text(&self) -> String {
        match &self.content {
            MessageContent::Text(t) => t.clone(),
            MessageContent::Parts(parts) => parts
                .iter()
                .filter_map(|p| match p {
                    ContentPart::Text { text } => Some(text.as_str()),
                    ContentPart::ImageUrl { .. } => None,
                })
                .collect(),
        }
    }

    pub fn image_urls(&self) -> Vec<&str> {
        match &self.content {
            MessageContent::Text(_) => Vec::new(),
            MessageContent::Parts(parts) => parts
                .iter()
                .filter_map(|p| match p {
                    ContentPart::ImageUrl { image_url } => Some(image_url.url.as_str()),
                    ContentPart::Text { .. } => None,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<Choice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub message: ChatMessage,
}

impl ChatResponse {
    /// Response carrying a single assistant message.
    pub fn single(text: &str) -> Self {
        Self { choices: vec![Choice { message: ChatMessage::assistant(text) }] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointError {
    #[error("transport error: {message}")]
    Transport { message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {message}")]
    Decode { message: String },
    #[error("gave up after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: Box<EndpointError> },
}

/// Anything that can answer a chat request with the first choice's text.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> impl Future<Output = Result<String, EndpointError>> + Send;
}

/// OpenAI-compatible HTTP backend.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &EndpointConfig) -> Result<Self, EndpointError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_seconds))
            .build()
            .map_err(|e| EndpointError::Transport { message: e.to_string() })?;
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        Ok(Self { client, url: config.completions_url(), api_key })
    }
}

impl ChatBackend for HttpBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<String, EndpointError> {
        let mut builder = self.client.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| EndpointError::Transport { message: e.to_string() })?;
        let status = response.status();
        let body = response
            .text()
            .await
            .map_err(|e| EndpointError::Transport { message: e.to_string() })?;
        if !status.is_success() {
            let mut body = body;
            body.truncate(500);
            return Err(EndpointError::Status { status: status.as_u16(), body });
        }
        let parsed: ChatResponse = serde_json::from_str(&body)
            .map_err(|e| EndpointError::Decode { message: e.to_string() })?;
        parsed
            .choices
            .first()
            .map(|c| c.message.text())
            .ok_or_else(|| EndpointError::Decode { message: "response has no choices".into() })
    }
}

impl<B: ChatBackend> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, request: &ChatRequest) -> impl Future<Output = Result<String, EndpointError>> + Send {
        (**self).complete(request)
    }
}

/// One call attempt, kept in the transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub turn: u8,
    pub attempt: u32,
    pub started_at: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<EndpointError>,
}

/// Call `backend` until it succeeds or `policy.max_attempts` is reached,
/// sleeping with exponential backoff in between.
pub async fn complete_with_retry<B: ChatBackend>(
    backend: &B,
    request: &ChatRequest,
    policy: &RetryPolicy,
    turn: u8,
    log: &mut Vec<AttemptRecord>,
) -> Result<String, EndpointError> {
    let attempts = policy.max_attempts.max(1);
    let mut last = None;
    for attempt in 1..=attempts {
        let started_at = crate::timestamp();
        match backend.complete(request).await {
            Ok(text) => {
                log.push(AttemptRecord { turn, attempt, started_at, error: None });
                return Ok(text);
            }
            Err(e) => {
                tracing::warn!(turn, attempt, error = %e, "endpoint call failed");
                log.push(AttemptRecord { turn, attempt, started_at, error: Some(e.clone()) });
                last = Some(e);
                if attempt < attempts {
                    tokio::time::sleep(policy.backoff(attempt)).await;
                }
            }
        }
    }
    Err(EndpointError::Exhausted {
        attempts,
        last: Box::new(last.expect("at least one attempt")),
    })
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read image {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

/// Resolve an image reference to a URL usable in a message part. Remote and
/// data URLs pass through; file paths (relative to `root`) are inlined as
/// base64 data URLs.
pub fn image_data_url(image_ref: &str, root: &Path) -> Result<String, ImageError> {
    if ["http://", "https://", "data:"].iter().any(|p| image_ref.starts_with(p)) {
        return Ok(image_ref.to_string());
    }
    let path = root.join(image_ref);
    let bytes = std::fs::read(&path).map_err(|source| ImageError::Read {
        path: path.display().to_string(),
        source,
    })?;
    Ok(format!(
        "data:{};base64,{}",
        mime_for(&path),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}
