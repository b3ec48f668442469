//! Chat-completion backends and the retry/repair loop around them.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{parse_turn_response, MalformedResponse, TurnResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Checks that a request has exactly one system message, first, and no
/// empty user or assistant turns.
pub fn check_history(history: &[ChatMessage]) -> Result<(), ProviderError> {
    match history.first() {
        Some(m) if m.role == Role::System => {}
        _ => return Err(ProviderError::InvalidHistory("first message must be the system prompt".into())),
    }
    for (i, m) in history.iter().enumerate().skip(1) {
        if m.role == Role::System {
            return Err(ProviderError::InvalidHistory(format!(
                "extra system message at index {i}"
            )));
        }
        if m.content.trim().is_empty() {
            return Err(ProviderError::InvalidHistory(format!(
                "empty {:?} message at index {i}",
                m.role
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f32,
    #[serde(with = "millis")]
    pub timeout: Duration,
    pub max_retries: u8,
    pub api_key_env: String,
    /// First backoff delay; doubles on every retry.
    #[serde(with = "millis")]
    pub backoff_base: Duration,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4o".into(),
            temperature: 0.7,
            timeout: Duration::from_secs(60),
            max_retries: 2,
            api_key_env: "OPENAI_API_KEY".into(),
            backoff_base: Duration::from_millis(500),
        }
    }
}

pub const MAX_RETRIES_LIMIT: u8 = 5;

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(ProviderError::Config(format!(
                "max_retries {} exceeds {MAX_RETRIES_LIMIT}",
                self.max_retries
            )));
        }
        if self.timeout.is_zero() {
            return Err(ProviderError::Config("timeout must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ProviderError::Config(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Total request budget for one call.
    pub fn attempt_budget(&self) -> u32 {
        1 + u32::from(self.max_retries)
    }

    fn backoff(&self, failed_attempt: u32) -> Duration {
        self.backoff_base
            .saturating_mul(1u32 << (failed_attempt.saturating_sub(1)).min(16))
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderResult {
    pub raw_text: String,
    pub latency: Duration,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("invalid chat history: {0}")]
    InvalidHistory(String),
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("no parseable reply after {attempts} attempts ({reason})")]
    Protocol {
        last_raw: String,
        attempts: u32,
        reason: String,
    },
}

impl ProviderError {
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderError::Transport(_) | ProviderError::Timeout(_) => true,
            ProviderError::Http { status, .. } => matches!(status, 408 | 429 | 500..=599),
            _ => false,
        }
    }
}

/// One request/response exchange with a chat backend. Retries live in
/// [`complete`] and [`complete_parsed`], not in implementations.
#[async_trait]
pub trait ChatProvider: Send + Sync {
    async fn send(
        &self,
        history: &[ChatMessage],
        config: &ProviderConfig,
    ) -> Result<String, ProviderError>;
}

/// Sends `history`, retrying transient failures with exponential backoff.
pub async fn complete(
    provider: &dyn ChatProvider,
    history: &[ChatMessage],
    config: &ProviderConfig,
) -> Result<ProviderResult, ProviderError> {
    config.validate()?;
    check_history(history)?;
    let mut attempt = 0;
    loop {
        attempt += 1;
        let started = Instant::now();
        match provider.send(history, config).await {
            Ok(raw_text) => {
                return Ok(ProviderResult {
                    raw_text,
                    latency: started.elapsed(),
                    attempt,
                })
            }
            Err(e) if e.is_transient() && attempt < config.attempt_budget() => {
                tokio::time::sleep(config.backoff(attempt)).await;
            }
            Err(e) => return Err(e),
        }
    }
}

/// One raw reply received during [`complete_parsed`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCompletion {
    pub response: TurnResponse,
    /// Every reply received, in order; the last one parsed.
    pub attempts: Vec<AttemptRecord>,
}

/// Failure of [`complete_parsed`], carrying whatever raw replies came back.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{error}")]
pub struct CompletionFailure {
    pub error: ProviderError,
    pub attempts: Vec<AttemptRecord>,
}

/// Requests a reply and parses it, reprompting on malformed output.
///
/// Transport retries and reprompts share one budget of `1 + max_retries`
/// outbound requests. Each reprompt appends the malformed reply and
/// `corrective_prompt` to the request (not to the caller's history).
pub async fn complete_parsed<F>(
    provider: &dyn ChatProvider,
    history: &[ChatMessage],
    config: &ProviderConfig,
    corrective_prompt: &str,
    parse: F,
) -> Result<ParsedCompletion, CompletionFailure>
where
    F: Fn(&str) -> Result<TurnResponse, MalformedResponse>,
{
    let fail = |error, attempts| CompletionFailure { error, attempts };
    if let Err(e) = config.validate().and_then(|_| check_history(history)) {
        return Err(fail(e, Vec::new()));
    }

    let mut request = history.to_vec();
    let mut attempts: Vec<AttemptRecord> = Vec::new();
    let budget = config.attempt_budget();
    let mut last_error = None;
    for attempt in 1..=budget {
        match provider.send(&request, config).await {
            Ok(raw) => match parse(&raw) {
                Ok(response) => {
                    attempts.push(AttemptRecord {
                        attempt,
                        raw_text: raw,
                        parse_error: None,
                    });
                    return Ok(ParsedCompletion { response, attempts });
                }
                Err(MalformedResponse(reason)) => {
                    attempts.push(AttemptRecord {
                        attempt,
                        raw_text: raw.clone(),
                        parse_error: Some(reason.clone()),
                    });
                    if !raw.trim().is_empty() {
                        request.push(ChatMessage::assistant(raw.clone()));
                    }
                    request.push(ChatMessage::user(corrective_prompt));
                    last_error = Some(ProviderError::Protocol {
                        last_raw: raw,
                        attempts: attempt,
                        reason,
                    });
                }
            },
            Err(e) if e.is_transient() => {
                last_error = Some(e);
                if attempt < budget {
                    tokio::time::sleep(config.backoff(attempt)).await;
                }
            }
            Err(e) => return Err(fail(e, attempts)),
        }
    }
    Err(fail(
        last_error.expect("budget is at least one attempt"),
        attempts,
    ))
}

/// [`complete_parsed`] with the standard reply parser.
pub async fn complete_turn(
    provider: &dyn ChatProvider,
    history: &[ChatMessage],
    config: &ProviderConfig,
    corrective_prompt: &str,
) -> Result<ParsedCompletion, CompletionFailure> {
    complete_parsed(provider, history, config, corrective_prompt, parse_turn_response).await
}

/// Replays a fixed queue of raw replies. Exhaustion is a transport error.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    queue: Mutex<VecDeque<String>>,
    requests: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedProvider {
    pub fn new<I, S>(queue: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedProvider {
            queue: Mutex::new(queue.into_iter().map(Into::into).collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Reads a queue file: a JSON array of raw reply strings.
    pub fn from_queue_file(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let queue: Vec<String> = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self::new(queue))
    }

    pub fn push(&self, raw: impl Into<String>) {
        self.queue.lock().unwrap().push_back(raw.into());
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    /// Requests received so far, in order.
    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.requests.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

/// Shorthand for [`ScriptedProvider::new`].
pub fn scripted_provider<I, S>(queue: I) -> ScriptedProvider
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    ScriptedProvider::new(queue)
}

#[async_trait]
impl ChatProvider for ScriptedProvider {
    async fn send(
        &self,
        history: &[ChatMessage],
        _config: &ProviderConfig,
    ) -> Result<String, ProviderError> {
        self.requests.lock().unwrap().push(history.to_vec());
        self.queue
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| ProviderError::Transport("scripted queue exhausted".into()))
    }
}

/// Speaks the chat-completions HTTP contract with a bearer token read from
/// the environment variable named by `api_key_env`.
#[derive(Debug, Clone, Default)]
pub struct HttpProvider {
    client: reqwest::Client,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpProvider {
    pub fn new() -> Self {
        HttpProvider {
            client: reqwest::Client::new(),
        }
    }
}

#[async_trait]
impl ChatProvider for HttpProvider {
    async fn send(
        &self,
        history: &[ChatMessage],
        config: &ProviderConfig,
    ) -> Result<String, ProviderError> {
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                ProviderError::Auth(format!(
                    "environment variable {} is not set",
                    config.api_key_env
                ))
            })?;

        let body = CompletionRequest {
            model: &config.model_name,
            messages: history,
            temperature: config.temperature,
        };
        let response = self
            .client
            .post(&config.endpoint_url)
            .bearer_auth(key)
            .timeout(config.timeout)
            .json(&body)
            .send()
            .await
            .map_err(|e| map_reqwest(e, config.timeout))?;

        let status = response.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN
        {
            let body = response.text().await.unwrap_or_default();
            return Err(ProviderError::Auth(format!("HTTP {}: {body}", status.as_u16())));
        }
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(ProviderError::Http {
                status: status.as_u16(),
                body,
            });
        }
        let parsed: CompletionResponse = response
            .json()
            .await
            .map_err(|e| map_reqwest(e, config.timeout))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Transport("response has no message content".into()))
    }
}

fn map_reqwest(e: reqwest::Error, timeout: Duration) -> ProviderError {
    if e.is_timeout() {
        ProviderError::Timeout(timeout)
    } else {
        ProviderError::Transport(e.to_string())
    }
}

/// Which backend a front end talks to: `live` or `mock:<queue file>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderMode {
    Live,
    Mock(std::path::PathBuf),
}

impl std::str::FromStr for ProviderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            _ if s == "live" => Ok(ProviderMode::Live),
            Some(("mock", path)) if !path.is_empty() => Ok(ProviderMode::Mock(path.into())),
            _ => Err(format!("expected `live` or `mock:<queue file>`, got `{s}`")),
        }
    }
}

impl ProviderMode {
    pub fn build(&self) -> std::io::Result<std::sync::Arc<dyn ChatProvider>> {
        Ok(match self {
            ProviderMode::Live => std::sync::Arc::new(HttpProvider::new()),
            ProviderMode::Mock(path) => std::sync::Arc::new(ScriptedProvider::from_queue_file(path)?),
        })
    }

    pub fn is_mock(&self) -> bool {
        matches!(self, ProviderMode::Mock(_))
    }
}
