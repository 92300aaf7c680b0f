//! Uniform access to model backends: stepwise completion with top-k
//! candidate probabilities, and multi-round chat with schema-checked JSON.

mod http;
mod schema;
mod scripted;

use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::catalog::InfillingTask;

pub use http::{HttpChat, HttpCompletion, HttpEmbeddings};
pub use schema::{Property, PropertySchema};
pub use scripted::{ChatRule, CompletionFixture, ScriptedChat, ScriptedCompletion, StepRow, StepPolicy};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("context of {tokens} tokens exceeds the backend limit of {limit}")]
    ContextTooLong { tokens: usize, limit: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("rate limited, retry after {retry_after:?}")]
    RateLimited { retry_after: Duration },
    #[error("response violates schema: {0}")]
    SchemaViolation(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("fixture: {0}")]
    Fixture(String),
    #[error("backend {name} lacks capability {capability}")]
    MissingCapability { name: String, capability: &'static str },
}

/// One candidate next text token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub prob: f64,
}

/// Top-k candidates for the next text token, most probable first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionStep {
    candidates: Vec<Candidate>,
}

impl PredictionStep {
    /// Sorts by descending probability (stable for ties), drops entries
    /// whose probability is outside (0, 1], and keeps at most `k`.
    pub fn new(candidates: impl IntoIterator<Item = (String, f64)>, k: usize) -> PredictionStep {
        let mut candidates: Vec<Candidate> = candidates
            .into_iter()
            .filter(|(_, p)| *p > 0.0 && *p <= 1.0)
            .map(|(text, prob)| Candidate { text, prob })
            .collect();
        candidates.sort_by(|a, b| b.prob.total_cmp(&a.prob));
        candidates.truncate(k.max(1));
        PredictionStep { candidates }
    }

    pub fn from_logprobs(candidates: impl IntoIterator<Item = (String, f64)>, k: usize) -> PredictionStep {
        PredictionStep::new(candidates.into_iter().map(|(t, lp)| (t, lp.exp().min(1.0))), k)
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// The state of one constrained generation. Sessions are values: accepting
/// a token returns a new session and leaves the old one untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSession {
    pub task: Arc<InfillingTask>,
    pub forced: Vec<String>,
}

impl GenerationSession {
    /// Decoding is greedy; there is no sampling temperature to set.
    pub const TEMPERATURE: f64 = 0.0;

    pub fn new(task: Arc<InfillingTask>) -> GenerationSession {
        GenerationSession { task, forced: Vec::new() }
    }

    pub fn force_accept(&self, token_text: &str) -> GenerationSession {
        let mut forced = self.forced.clone();
        forced.push(token_text.to_string());
        GenerationSession {
            task: self.task.clone(),
            forced,
        }
    }

    pub fn forced_text(&self) -> String {
        self.forced.concat()
    }
}

/// A stepwise completion model.
pub trait CompletionBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Top-k next-token candidates conditioned on the task prefix, the
    /// accepted tokens and, for infilling backends, the suffix.
    fn next_step(&self, session: &GenerationSession, k: usize) -> Result<PredictionStep, GatewayError>;

    /// Fixed latency charged per step instead of wall-clock time. Scripted
    /// backends return one so timings are reproducible.
    fn virtual_step_latency(&self) -> Option<Duration> {
        None
    }
}

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
    pub fn new(role: Role, content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

/// A chat model that answers in JSON.
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Returns the raw assistant message content.
    fn complete(&self, messages: &[ChatMessage], schema: &PropertySchema) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRound {
    pub user_prompt: String,
    pub response: serde_json::Value,
    pub schema: PropertySchema,
}

/// A multi-round conversation. Rounds are only ever appended.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatExchange {
    pub system: String,
    pub model_id: String,
    pub rounds: Vec<ChatRound>,
}

impl ChatExchange {
    pub fn new(system: impl Into<String>, model_id: impl Into<String>) -> ChatExchange {
        ChatExchange {
            system: system.into(),
            model_id: model_id.into(),
            rounds: Vec::new(),
        }
    }

    /// Transcript so far, ready for the next user message.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut out = vec![ChatMessage::new(Role::System, self.system.clone())];
        for round in &self.rounds {
            out.push(ChatMessage::new(Role::User, round.user_prompt.clone()));
            out.push(ChatMessage::new(Role::Assistant, round.response.to_string()));
        }
        out
    }
}

pub const REFORMAT_NUDGE: &str =
    "Your previous reply did not match the requested JSON structure. Emit valid JSON only, as an object with a \"bugs\" array.";

/// Sends one user prompt, validates the reply against `schema`, and returns
/// the extended exchange with the normalized response. An invalid reply
/// gets exactly one reformat retry.
pub fn chat_round(
    backend: &dyn ChatBackend,
    exchange: &ChatExchange,
    user_prompt: &str,
    schema: &PropertySchema,
) -> Result<(ChatExchange, serde_json::Value), GatewayError> {
    let mut messages = exchange.messages();
    messages.push(ChatMessage::new(Role::User, user_prompt));
    let first = backend.complete(&messages, schema)?;
    let response = match schema.validate_text(&first) {
        Ok(v) => v,
        Err(reason) => {
            tracing::debug!(backend = backend.name(), %reason, "reformat retry");
            messages.push(ChatMessage::new(Role::Assistant, first));
            messages.push(ChatMessage::new(Role::User, REFORMAT_NUDGE));
            let second = backend.complete(&messages, schema)?;
            schema.validate_text(&second).map_err(GatewayError::SchemaViolation)?
        }
    };
    let mut next = exchange.clone();
    next.rounds.push(ChatRound {
        user_prompt: user_prompt.to_string(),
        response: response.clone(),
        schema: schema.clone(),
    });
    Ok((next, response))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Capability {
    pub completion_logprobs: bool,
    pub fim: bool,
    pub chat_json: bool,
}

/// Fill-in-the-middle sentinels. The prompt is laid out as
/// `prefix_sentinel + prefix + suffix_sentinel + suffix + middle_sentinel + forced`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FimSentinels {
    pub prefix: String,
    pub suffix: String,
    pub middle: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Scripted,
}

/// How to reach one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: String,
    /// Model identifier sent on the wire; defaults to `name`.
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub capability: Capability,
    #[serde(default)]
    pub sentinels: Option<FimSentinels>,
    #[serde(default = "default_max_context")]
    pub max_context_tokens: usize,
    #[serde(default)]
    pub price_per_call: Option<f64>,
    /// Step tables or chat rules for scripted backends.
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_max_context() -> usize {
    16_384
}
fn default_retries() -> u32 {
    3
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}

impl BackendProfile {
    pub fn scripted(name: &str, capability: Capability) -> BackendProfile {
        BackendProfile {
            name: name.to_string(),
            kind: BackendKind::Scripted,
            base_url: String::new(),
            model: None,
            api_key_env: None,
            capability,
            sentinels: None,
            max_context_tokens: default_max_context(),
            price_per_call: None,
            fixture: None,
            max_retries: default_retries(),
            concurrency: default_concurrency(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn model_id(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.name)
    }

    fn require(&self, ok: bool, capability: &'static str) -> Result<(), GatewayError> {
        if ok {
            Ok(())
        } else {
            Err(GatewayError::MissingCapability {
                name: self.name.clone(),
                capability,
            })
        }
    }

    pub fn completion_backend(&self) -> Result<Arc<dyn CompletionBackend>, GatewayError> {
        self.require(self.capability.completion_logprobs, "completion_logprobs")?;
        Ok(match self.kind {
            BackendKind::Http => Arc::new(HttpCompletion::new(self.clone())),
            BackendKind::Scripted => {
                let fixture = match &self.fixture {
                    Some(path) => CompletionFixture::load(path)?,
                    None => CompletionFixture::default(),
                };
                Arc::new(ScriptedCompletion::from_fixture(&self.name, fixture))
            }
        })
    }

    pub fn chat_backend(&self) -> Result<Arc<dyn ChatBackend>, GatewayError> {
        self.require(self.capability.chat_json, "chat_json")?;
        Ok(match self.kind {
            BackendKind::Http => Arc::new(HttpChat::new(self.clone())),
            BackendKind::Scripted => {
                let rules = match &self.fixture {
                    Some(path) => ScriptedChat::load_rules(path)?,
                    None => Vec::new(),
                };
                Arc::new(ScriptedChat::from_rules(&self.name, rules))
            }
        })
    }
}

/// Counting semaphore bounding in-flight requests per backend.
#[derive(Debug)]
pub struct ConcurrencyLimit {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a> {
    limit: &'a ConcurrencyLimit,
}

impl ConcurrencyLimit {
    pub fn new(slots: usize) -> ConcurrencyLimit {
        ConcurrencyLimit {
            free: Mutex::new(slots.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit { limit: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut free = self.limit.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.limit.cv.notify_one();
    }
}
