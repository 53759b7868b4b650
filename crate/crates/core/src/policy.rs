//! Chat-completion adapter for the policy model and its personas.
//!
//! Every model-dependent path goes through [`PolicyAdapter::complete`]. In
//! record mode each `(digest(history), response)` pair is appended to a
//! [`Transcript`]; in replay mode responses are served from the transcript by
//! exact digest match and no backend is ever contacted.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

use crate::core_tools::ToolDescriptor;
use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self::new(Role::Tool, content)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Live,
    Replay,
    Record,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(Mode::Live),
            "replay" => Ok(Mode::Replay),
            "record" => Ok(Mode::Record),
            other => Err(format!("unknown mode {other:?} (expected live, replay or record)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub max_rounds_hint: u32,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub transcript_path: Option<PathBuf>,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_request_timeout_ms")]
    pub request_timeout_ms: u64,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_request_timeout_ms() -> u64 {
    120_000
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model_name: "policy".into(),
            temperature: default_temperature(),
            max_rounds_hint: 12,
            mode: Mode::Live,
            transcript_path: None,
            api_key: None,
            request_timeout_ms: default_request_timeout_ms(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.temperature >= 0.0) {
            return Err(PolicyError::InvalidConfig("temperature must be >= 0".into()));
        }
        if self.mode != Mode::Live && self.transcript_path.is_none() {
            return Err(PolicyError::InvalidConfig(format!(
                "mode {:?} requires a transcript path",
                self.mode
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("endpoint unavailable after {attempts} attempts: {last}")]
    EndpointUnavailable { attempts: u32, last: String },
    #[error("no recorded response for digest {0}")]
    ReplayMiss(String),
    #[error("invalid history: {0}")]
    InvalidHistory(String),
    #[error("invalid policy configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed endpoint response: {0}")]
    Protocol(String),
    #[error("transcript i/o: {0}")]
    Transcript(#[from] std::io::Error),
}

/// SHA-256 over the canonical JSON encoding `[[role, content], ...]`.
pub fn digest(history: &[ChatMessage]) -> String {
    let canonical: Vec<[&str; 2]> = history
        .iter()
        .map(|m| [m.role.as_str(), m.content.as_str()])
        .collect();
    let bytes = serde_json::to_vec(&canonical).expect("string pairs always serialize");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    pub response: String,
}

/// Ordered `(digest, response)` table with unique digests.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
    index: HashMap<String, usize>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, digest: &str) -> Option<&str> {
        self.index
            .get(digest)
            .map(|&i| self.entries[i].response.as_str())
    }

    /// Returns false (and keeps the first response) when the digest is already present.
    pub fn insert(&mut self, digest: String, response: String) -> bool {
        if self.index.contains_key(&digest) {
            return false;
        }
        self.index.insert(digest.clone(), self.entries.len());
        self.entries.push(TranscriptEntry { digest, response });
        true
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let reader = BufReader::new(File::open(path)?);
        let mut transcript = Self::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(&line).map_err(|e| {
                PolicyError::InvalidConfig(format!(
                    "{}:{}: bad transcript record: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            transcript.insert(entry.digest, entry.response);
        }
        Ok(transcript)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    /// Connection-level failure; retried.
    #[error("transport: {0}")]
    Transport(String),
    /// Non-success HTTP status; retried only for 429 and 5xx.
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    /// The endpoint answered but the payload was not a chat completion; not retried.
    #[error("protocol: {0}")]
    Protocol(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            BackendError::Protocol(_) => false,
        }
    }
}

/// A chat-completion provider.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, messages: &[ChatMessage], model: &str, temperature: f64)
        -> Result<String, BackendError>;
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpChatBackend {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            api_key,
            agent,
        }
    }
}

impl ChatBackend for HttpChatBackend {
    fn chat(
        &self,
        messages: &[ChatMessage],
        model: &str,
        temperature: f64,
    ) -> Result<String, BackendError> {
        let body = json!({
            "model": model,
            "temperature": temperature,
            "messages": messages,
        });
        let mut request = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))
    }
}

/// Serves a fixed queue of responses in call order. Useful for scripting
/// sessions that are then recorded into a transcript.
#[derive(Default)]
pub struct ScriptedBackend {
    responses: Mutex<VecDeque<String>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            responses: Mutex::new(responses.into_iter().map(Into::into).collect()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.responses.lock().expect("script lock").len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(&self, _: &[ChatMessage], _: &str, _: f64) -> Result<String, BackendError> {
        self.responses
            .lock()
            .expect("script lock")
            .pop_front()
            .ok_or_else(|| BackendError::Protocol("script exhausted".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

pub struct PolicyAdapter {
    config: PolicyConfig,
    backend: Option<Arc<dyn ChatBackend>>,
    transcript: Mutex<Transcript>,
    retry: RetryPolicy,
}

impl PolicyAdapter {
    /// Build an adapter from configuration: the HTTP backend for live and
    /// record modes, and the transcript file for replay.
    pub fn from_config(config: PolicyConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let backend: Option<Arc<dyn ChatBackend>> = match config.mode {
            Mode::Replay => None,
            Mode::Live | Mode::Record => Some(Arc::new(HttpChatBackend::new(
                config.endpoint_url.clone(),
                config.api_key.clone(),
                Duration::from_millis(config.request_timeout_ms),
            ))),
        };
        let transcript = match (&config.mode, &config.transcript_path) {
            (Mode::Replay, Some(path)) => Transcript::load(path)?,
            (Mode::Record, Some(path)) if path.exists() => Transcript::load(path)?,
            _ => Transcript::new(),
        };
        Ok(Self {
            config,
            backend,
            transcript: Mutex::new(transcript),
            retry: RetryPolicy::default(),
        })
    }

    pub fn live(config: PolicyConfig, backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            config: PolicyConfig {
                mode: Mode::Live,
                ..config
            },
            backend: Some(backend),
            transcript: Mutex::new(Transcript::new()),
            retry: RetryPolicy::default(),
        }
    }

    /// Record mode without a transcript file; call [`Self::transcript`] to collect it.
    pub fn recording(config: PolicyConfig, backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            config: PolicyConfig {
                mode: Mode::Record,
                ..config
            },
            ..Self::live(PolicyConfig::default(), backend)
        }
    }

    pub fn replay(transcript: Transcript) -> Self {
        Self {
            config: PolicyConfig {
                mode: Mode::Replay,
                ..PolicyConfig::default()
            },
            backend: None,
            transcript: Mutex::new(transcript),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().expect("transcript lock").clone()
    }

    pub fn complete(&self, history: &[ChatMessage]) -> Result<String, PolicyError> {
        match history.first() {
            None => return Err(PolicyError::InvalidHistory("history is empty".into())),
            Some(m) if m.role != Role::System => {
                return Err(PolicyError::InvalidHistory(
                    "history must begin with a system message".into(),
                ))
            }
            Some(_) => {}
        }
        let key = digest(history);
        if self.config.mode == Mode::Replay {
            return self
                .transcript
                .lock()
                .expect("transcript lock")
                .get(&key)
                .map(str::to_string)
                .ok_or(PolicyError::ReplayMiss(key));
        }
        let text = self.call_with_retry(history)?;
        if self.config.mode == Mode::Record {
            let mut transcript = self.transcript.lock().expect("transcript lock");
            if transcript.insert(key.clone(), text.clone()) {
                if let Some(path) = &self.config.transcript_path {
                    append_record(path, &key, &text)?;
                }
            } else {
                warn!(digest = %key, "duplicate history while recording; keeping first response");
            }
        }
        Ok(text)
    }

    fn call_with_retry(&self, history: &[ChatMessage]) -> Result<String, PolicyError> {
        let backend = self
            .backend
            .as_ref()
            .ok_or_else(|| PolicyError::InvalidConfig("no backend configured".into()))?;
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
                debug!(attempt, ?delay, "retrying chat completion");
                thread::sleep(delay);
            }
            match backend.chat(history, &self.config.model_name, self.config.temperature) {
                Ok(text) => return Ok(text),
                Err(err) if err.retryable() => last = err.to_string(),
                Err(err) => return Err(PolicyError::Protocol(err.to_string())),
            }
        }
        Err(PolicyError::EndpointUnavailable { attempts, last })
    }
}

fn append_record(path: &Path, digest: &str, response: &str) -> Result<(), PolicyError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let entry = TranscriptEntry {
        digest: digest.to_string(),
        response: response.to_string(),
    };
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{}", serde_json::to_string(&entry).expect("entry serializes"))?;
    Ok(())
}

fn tool_line(tool: &ToolDescriptor) -> String {
    let view = json!({
        "name": tool.name,
        "description": tool.description,
        "arguments": tool.schema,
    });
    serde_json::to_string(&view).expect("descriptor serializes")
}

/// System prompt plus a user message ending with the available-tool list,
/// core tools first.
pub fn assemble_task_prompt(
    query: &str,
    core: &[ToolDescriptor],
    created: &[ToolDescriptor],
) -> Vec<ChatMessage> {
    let system = prompts::POLICY_SYSTEM_TEMPLATE
        .replace(prompts::CORE_TOOL_PLACEHOLDER, prompts::CORE_TOOL_INSTRUCTION);
    let mut user = String::from(query.trim());
    user.push_str("\n\nAvailable tools:\n");
    for tool in core.iter().chain(created) {
        user.push_str(&tool_line(tool));
        user.push('\n');
    }
    vec![ChatMessage::system(system), ChatMessage::user(user)]
}
