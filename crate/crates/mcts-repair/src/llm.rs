//! Minimal chat-completion client over an OpenAI-compatible HTTP endpoint,
//! with bounded retries, a deterministic stub transport for tests, and
//! token/cost accounting.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Environment variable holding the API credential.
pub const API_KEY_ENV: &str = "MCTS_REPAIR_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".to_string(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".to_string(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Token usage for one completion. `estimated` marks values reconstructed by
/// `estimate_tokens` because the provider omitted usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    #[serde(default)]
    pub estimated: bool,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Usage {
            prompt_tokens,
            completion_tokens,
            total_tokens: prompt_tokens + completion_tokens,
            estimated: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

/// One transport attempt's failure modes. Connection problems, timeouts,
/// HTTP 429 and HTTP 5xx are transient; other statuses are not.
#[derive(Debug, Clone, thiserror::Error)]
pub enum TransportError {
    #[error("connection error: {0}")]
    Connection(String),
    #[error("request timed out")]
    Timeout,
    #[error("http status {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

impl TransportError {
    fn is_transient(&self) -> bool {
        match self {
            TransportError::Connection(_) | TransportError::Timeout => true,
            TransportError::HttpStatus { status, .. } => *status == 429 || *status >= 500,
            TransportError::Malformed(_) => false,
        }
    }
}

/// Raw reply from a transport: the first choice's text plus provider usage
/// when reported.
#[derive(Debug, Clone)]
pub struct TransportReply {
    pub content: String,
    pub usage: Option<(u64, u64)>,
}

/// A single-attempt chat transport; the client layers retries on top.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<TransportReply, TransportError>;
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    fn delay_before(&self, attempt: u32) -> Duration {
        let factor = 1u32 << attempt.min(16);
        (self.base_delay * factor).min(self.max_delay)
    }
}

/// Thread-safe accumulation of usage across all calls of one client.
#[derive(Debug, Default)]
pub struct UsageLedger {
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    calls: AtomicU64,
    retries: AtomicU64,
}

impl UsageLedger {
    pub fn record(&self, usage: &Usage) {
        self.prompt_tokens.fetch_add(usage.prompt_tokens, Ordering::Relaxed);
        self.completion_tokens.fetch_add(usage.completion_tokens, Ordering::Relaxed);
        self.calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn prompt_tokens(&self) -> u64 {
        self.prompt_tokens.load(Ordering::Relaxed)
    }

    pub fn completion_tokens(&self) -> u64 {
        self.completion_tokens.load(Ordering::Relaxed)
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens() + self.completion_tokens()
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }
}

/// Chat client: one transport, bounded exponential-backoff retries, and a
/// usage ledger shared by all calls.
pub struct ChatClient {
    transport: Box<dyn ChatTransport>,
    retry: RetryPolicy,
    ledger: UsageLedger,
}

impl ChatClient {
    pub fn new(transport: Box<dyn ChatTransport>) -> Self {
        ChatClient { transport, retry: RetryPolicy::default(), ledger: UsageLedger::default() }
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }

    /// Sends a request, retrying transient failures up to the policy's
    /// attempt limit. Non-transient HTTP errors (4xx other than 429) fail
    /// immediately.
    pub fn chat(&self, request: &ChatRequest) -> Result<(String, Usage), LlmError> {
        let mut last_error = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay_before(attempt - 1));
                self.ledger.retries.fetch_add(1, Ordering::Relaxed);
            }
            match self.transport.send(request) {
                Ok(reply) => {
                    if attempt > 0 {
                        log::info!("chat succeeded on attempt {}", attempt + 1);
                    }
                    let usage = match reply.usage {
                        Some((prompt, completion)) => Usage::new(prompt, completion),
                        None => {
                            let prompt = request
                                .messages
                                .iter()
                                .map(|m| estimate_tokens(&m.content))
                                .sum::<u64>();
                            let completion = estimate_tokens(&reply.content);
                            Usage {
                                prompt_tokens: prompt,
                                completion_tokens: completion,
                                total_tokens: prompt + completion,
                                estimated: true,
                            }
                        }
                    };
                    self.ledger.record(&usage);
                    return Ok((reply.content, usage));
                }
                Err(TransportError::Malformed(message)) => {
                    return Err(LlmError::MalformedResponse(message));
                }
                Err(error) if error.is_transient() => {
                    log::warn!("chat attempt {} failed: {error}", attempt + 1);
                    last_error = error.to_string();
                }
                Err(error) => {
                    return Err(LlmError::BackendUnavailable {
                        attempts: attempt + 1,
                        message: error.to_string(),
                    });
                }
            }
        }
        Err(LlmError::BackendUnavailable {
            attempts: self.retry.max_attempts,
            message: last_error,
        })
    }
}

/// Byte-length estimate used only when the provider omits usage:
/// ceil(bytes / 4).
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

/// Monetary cost of a token total at a per-1k-token price.
pub fn cost(tokens_total: u64, price_per_1k: f64) -> f64 {
    tokens_total as f64 / 1000.0 * price_per_1k
}

/// Endpoint settings; the credential comes from `MCTS_REPAIR_API_KEY`, never
/// from bug data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub base_url: String,
    pub model: String,
    pub request_timeout_secs: f64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        LlmSettings {
            base_url: "https://api.openai.com/v1".to_string(),
            model: "gpt-3.5-turbo".to_string(),
            request_timeout_secs: 120.0,
        }
    }
}

/// Blocking HTTP transport speaking the de-facto OpenAI chat-completion
/// protocol: POST `<base_url>/chat/completions`.
pub struct HttpTransport {
    settings: LlmSettings,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(settings: LlmSettings) -> Result<Self, LlmError> {
        let api_key = std::env::var(API_KEY_ENV).ok();
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(settings.request_timeout_secs))
            .build()
            .map_err(|e| LlmError::BackendUnavailable { attempts: 0, message: e.to_string() })?;
        Ok(HttpTransport { settings, api_key, http })
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<TransportReply, TransportError> {
        let url = format!("{}/chat/completions", self.settings.base_url.trim_end_matches('/'));
        let model = if request.model.is_empty() { &self.settings.model } else { &request.model };
        let body = WireRequest {
            model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let mut builder = self.http.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connection(e.to_string())
            }
        })?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| TransportError::Connection(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::HttpStatus {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| TransportError::Malformed(format!("{e}: {}", text.chars().take(200).collect::<String>())))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Malformed("response carried no choices".to_string()))?;
        let content = choice
            .message
            .content
            .ok_or_else(|| TransportError::Malformed("choice carried no content".to_string()))?;
        let usage = parsed.usage.and_then(|u| match (u.prompt_tokens, u.completion_tokens) {
            (Some(p), Some(c)) => Some((p, c)),
            _ => None,
        });
        Ok(TransportReply { content, usage })
    }
}

/// Scripted single-attempt replies for tests, consumed in order.
#[derive(Default)]
pub struct StubTransport {
    script: Mutex<VecDeque<Result<TransportReply, TransportError>>>,
    calls: AtomicU64,
}

impl StubTransport {
    pub fn new(script: Vec<Result<TransportReply, TransportError>>) -> Self {
        StubTransport { script: Mutex::new(script.into()), calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ChatTransport for StubTransport {
    fn send(&self, _request: &ChatRequest) -> Result<TransportReply, TransportError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(TransportError::Connection("stub script exhausted".to_string())))
    }
}
