//! Deterministic backends serving pre-programmed steps and replies.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    ChatBackend, ChatMessage, CompletionBackend, GatewayError, GenerationSession, PredictionStep, PropertySchema, Role,
};

/// What to serve when no row matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum StepPolicy {
    /// The rest of the original token as one candidate.
    Echo { prob: f64 },
    /// No candidates at all.
    Empty,
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy::Echo { prob: 0.99 }
    }
}

/// One programmed step. Every selector that is present must match the
/// session; `forced` must match exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_no: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original: Option<String>,
    #[serde(default)]
    pub forced: Vec<String>,
    pub candidates: Vec<(String, f64)>,
}

impl StepRow {
    fn matches(&self, session: &GenerationSession) -> bool {
        let task = &session.task;
        self.task_id.as_ref().is_none_or(|id| *id == task.task_id)
            && self.path.as_ref().is_none_or(|p| Path::new(p) == task.path)
            && self.line_no.is_none_or(|l| l == task.line_no)
            && self.original.as_ref().is_none_or(|o| *o == task.original)
            && self.forced == session.forced
    }
}

/// Step-table file for [`ScriptedCompletion`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionFixture {
    pub fallback: StepPolicy,
    pub step_latency_ms: u64,
    pub rows: Vec<StepRow>,
}

impl CompletionFixture {
    pub fn load(path: &Path) -> Result<CompletionFixture, GatewayError> {
        let text = fs::read_to_string(path).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))
    }
}

type StepFn = dyn Fn(&GenerationSession, usize) -> PredictionStep + Send + Sync;

/// Completion backend driven by a step table or a closure.
#[derive(Clone)]
pub struct ScriptedCompletion {
    name: String,
    fixture: CompletionFixture,
    func: Option<Arc<StepFn>>,
    calls: Arc<AtomicUsize>,
}

impl std::fmt::Debug for ScriptedCompletion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedCompletion")
            .field("name", &self.name)
            .field("rows", &self.fixture.rows.len())
            .finish()
    }
}

impl ScriptedCompletion {
    pub fn from_fixture(name: &str, fixture: CompletionFixture) -> ScriptedCompletion {
        ScriptedCompletion {
            name: name.to_string(),
            fixture,
            func: None,
            calls: Arc::default(),
        }
    }

    pub fn echo(name: &str) -> ScriptedCompletion {
        ScriptedCompletion::from_fixture(name, CompletionFixture::default())
    }

    pub fn from_rows(name: &str, rows: Vec<StepRow>) -> ScriptedCompletion {
        ScriptedCompletion::from_fixture(
            name,
            CompletionFixture {
                rows,
                ..CompletionFixture::default()
            },
        )
    }

    /// Serves steps computed by `f` for sessions no row matches.
    pub fn from_fn(
        name: &str,
        f: impl Fn(&GenerationSession, usize) -> PredictionStep + Send + Sync + 'static,
    ) -> ScriptedCompletion {
        ScriptedCompletion {
            func: Some(Arc::new(f)),
            ..ScriptedCompletion::echo(name)
        }
    }

    pub fn with_latency(mut self, per_step: Duration) -> ScriptedCompletion {
        self.fixture.step_latency_ms = per_step.as_millis() as u64;
        self
    }

    /// Number of `next_step` calls served.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// The remainder of the original token as a single candidate.
    pub fn echo_step(session: &GenerationSession, prob: f64) -> PredictionStep {
        let done = session.forced_text();
        let rest = session.task.original.strip_prefix(done.as_str()).unwrap_or("");
        let text = if rest.is_empty() { "\n" } else { rest };
        PredictionStep::new([(text.to_string(), prob)], 1)
    }
}

impl CompletionBackend for ScriptedCompletion {
    fn name(&self) -> &str {
        &self.name
    }

    fn next_step(&self, session: &GenerationSession, k: usize) -> Result<PredictionStep, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if let Some(row) = self.fixture.rows.iter().find(|r| r.matches(session)) {
            return Ok(PredictionStep::new(row.candidates.iter().cloned(), k));
        }
        if let Some(f) = &self.func {
            let step = f(session, k);
            return Ok(PredictionStep::new(
                step.candidates().iter().map(|c| (c.text.clone(), c.prob)),
                k,
            ));
        }
        Ok(match self.fixture.fallback {
            StepPolicy::Echo { prob } => ScriptedCompletion::echo_step(session, prob),
            StepPolicy::Empty => PredictionStep::default(),
        })
    }

    fn virtual_step_latency(&self) -> Option<Duration> {
        Some(Duration::from_millis(self.fixture.step_latency_ms))
    }
}

/// One canned chat reply. Selectors that are present must match: `round`
/// is the 1-based index of the user message being answered and `contains`
/// is searched in the first user message (the one carrying the code).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// A JSON value, or a string sent verbatim (to exercise malformed replies).
    pub response: Value,
}

#[derive(Deserialize)]
struct ChatFixture {
    rules: Vec<ChatRule>,
}

type ChatFn = dyn Fn(&[ChatMessage], &PropertySchema) -> String + Send + Sync;

/// Chat backend driven by rules or a closure. Unmatched requests get an
/// empty finding list.
#[derive(Clone)]
pub struct ScriptedChat {
    name: String,
    rules: Vec<ChatRule>,
    func: Option<Arc<ChatFn>>,
    calls: Arc<AtomicUsize>,
}

impl std::fmt::Debug for ScriptedChat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedChat")
            .field("name", &self.name)
            .field("rules", &self.rules.len())
            .finish()
    }
}

impl ScriptedChat {
    pub fn from_rules(name: &str, rules: Vec<ChatRule>) -> ScriptedChat {
        ScriptedChat {
            name: name.to_string(),
            rules,
            func: None,
            calls: Arc::default(),
        }
    }

    pub fn load_rules(path: &Path) -> Result<Vec<ChatRule>, GatewayError> {
        let text = fs::read_to_string(path).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        let fixture: ChatFixture =
            serde_json::from_str(&text).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        Ok(fixture.rules)
    }

    pub fn from_fn(
        name: &str,
        f: impl Fn(&[ChatMessage], &PropertySchema) -> String + Send + Sync + 'static,
    ) -> ScriptedChat {
        ScriptedChat {
            func: Some(Arc::new(f)),
            ..ScriptedChat::from_rules(name, Vec::new())
        }
    }

    /// Number of `complete` calls served, reformat retries included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ChatBackend for ScriptedChat {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, messages: &[ChatMessage], schema: &PropertySchema) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let users: Vec<&str> = messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect();
        let round = users.len();
        let code = users.first().copied().unwrap_or("");
        let hit = self.rules.iter().find(|r| {
            r.round.is_none_or(|n| n == round) && r.contains.as_ref().is_none_or(|s| code.contains(s.as_str()))
        });
        if let Some(rule) = hit {
            return Ok(match &rule.response {
                Value::String(s) => s.clone(),
                v => v.to_string(),
            });
        }
        if let Some(f) = &self.func {
            return Ok(f(messages, schema));
        }
        Ok(r#"{"bugs":[]}"#.to_string())
    }
}
