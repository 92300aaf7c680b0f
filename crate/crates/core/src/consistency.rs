//! Constrained-generation consistency check: does a completion model,
//! forced along the original code token, agree with it?

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::catalog::{CodeTokenKind, InfillingTask};
use crate::gateway::{CompletionBackend, GatewayError, GenerationSession};
use crate::lang::{self, Language};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    /// A valid deviating candidate above this probability ends the check.
    pub prob_thresh: f64,
    /// More than this many penalties make the token inconsistent.
    pub rank_thresh: u32,
    /// Candidates fetched per step.
    pub k: usize,
    /// Generation steps allowed per task.
    pub max_steps: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            prob_thresh: 0.9,
            rank_thresh: 1,
            k: 10,
            max_steps: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConsistencyError {
    #[error("prob_thresh must lie in (0, 1), got {0}")]
    ProbThresh(f64),
    #[error("k and max_steps must be at least 1")]
    Width,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<(), ConsistencyError> {
        if !(self.prob_thresh > 0.0 && self.prob_thresh < 1.0) {
            return Err(ConsistencyError::ProbThresh(self.prob_thresh));
        }
        if self.k == 0 || self.max_steps == 0 {
            return Err(ConsistencyError::Width);
        }
        Ok(())
    }
}

/// True if `text` can begin a lexeme of a token of `kind`.
pub fn validate_token(text: &str, kind: CodeTokenKind, language: Language) -> bool {
    kind.lexeme_classes()
        .iter()
        .any(|&class| lang::is_viable_prefix(language, class, text))
}

/// True if appending `candidate` to the already generated text keeps it a
/// viable prefix of a token of `kind`. Empty candidates are never valid.
pub fn validate_fragment(generated: &str, candidate: &str, kind: CodeTokenKind, language: Language) -> bool {
    !candidate.is_empty() && validate_token(&format!("{generated}{candidate}"), kind, language)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    /// The original token was reproduced within the penalty budget.
    Matched,
    HighProbDeviation,
    RankExceeded,
    /// Every candidate at some step was syntactically invalid.
    NoValidCandidate,
    /// Valid candidates existed but none continued the original.
    OriginalNotInTopK,
    StepCap,
}

/// A deviating candidate, at a 1-based step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub step: usize,
    pub token: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub task_id: String,
    pub consistent: bool,
    pub rank_sum: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<Deviation>,
    pub steps_taken: usize,
    pub reason: VerdictReason,
}

/// Runs the check with the lexeme validator for the task's token kind.
pub fn check_consistency(
    task: &Arc<InfillingTask>,
    backend: &dyn CompletionBackend,
    cfg: &ConsistencyConfig,
) -> Result<ConsistencyVerdict, ConsistencyError> {
    let (kind, language) = (task.kind, task.language);
    check_consistency_with(task, backend, cfg, |done, cand| {
        validate_fragment(done, cand, kind, language)
    })
}

/// Runs the check with a caller-supplied validity test on
/// `(generated_so_far, candidate)`.
pub fn check_consistency_with(
    task: &Arc<InfillingTask>,
    backend: &dyn CompletionBackend,
    cfg: &ConsistencyConfig,
    is_valid: impl Fn(&str, &str) -> bool,
) -> Result<ConsistencyVerdict, ConsistencyError> {
    cfg.validate()?;
    let mut session = GenerationSession::new(task.clone());
    let mut generated = String::new();
    let mut rank_sum = 0u32;
    let mut steps = 0usize;
    let mut last_deviation = None;

    let verdict = |consistent, rank_sum, deviation, steps, reason| ConsistencyVerdict {
        task_id: task.task_id.clone(),
        consistent,
        rank_sum,
        deviation,
        steps_taken: steps,
        reason,
    };

    while generated.len() < task.original.len() {
        if steps == cfg.max_steps {
            return Ok(verdict(false, rank_sum, last_deviation, steps, VerdictReason::StepCap));
        }
        let left = &task.original[generated.len()..];
        let step = backend.next_step(&session, cfg.k)?;
        steps += 1;

        let mut accepted = None;
        let mut any_valid = false;
        for cand in step.candidates() {
            if !is_valid(&generated, &cand.text) {
                continue;
            }
            any_valid = true;
            if left.starts_with(cand.text.as_str()) {
                accepted = Some(cand.text.clone());
                break;
            }
            let deviation = Deviation {
                step: steps,
                token: cand.text.clone(),
                prob: cand.prob,
            };
            if cand.prob > cfg.prob_thresh {
                return Ok(verdict(false, rank_sum, Some(deviation), steps, VerdictReason::HighProbDeviation));
            }
            rank_sum += 1;
            last_deviation = Some(deviation);
        }

        let Some(token) = accepted else {
            let reason = if any_valid {
                VerdictReason::OriginalNotInTopK
            } else {
                VerdictReason::NoValidCandidate
            };
            let deviation = last_deviation.or_else(|| {
                step.candidates().first().map(|c| Deviation {
                    step: steps,
                    token: c.text.clone(),
                    prob: c.prob,
                })
            });
            return Ok(verdict(false, rank_sum, deviation, steps, reason));
        };
        if rank_sum > cfg.rank_thresh {
            return Ok(verdict(false, rank_sum, last_deviation, steps, VerdictReason::RankExceeded));
        }
        generated.push_str(&token);
        session = session.force_accept(&token);
    }
    Ok(verdict(true, rank_sum, None, steps, VerdictReason::Matched))
}

/// One line of a verdict stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    #[serde(flatten)]
    pub verdict: ConsistencyVerdict,
    pub stage_name: String,
    pub elapsed_ms: u64,
}

/// Checks one task and times it: virtual latency for backends that declare
/// one, wall-clock time otherwise.
pub fn timed_check(
    task: &Arc<InfillingTask>,
    backend: &dyn CompletionBackend,
    cfg: &ConsistencyConfig,
) -> Result<VerdictRecord, ConsistencyError> {
    let started = Instant::now();
    let verdict = check_consistency(task, backend, cfg)?;
    let elapsed = match backend.virtual_step_latency() {
        Some(per_step) => per_step * verdict.steps_taken as u32,
        None => started.elapsed(),
    };
    Ok(VerdictRecord {
        verdict,
        stage_name: backend.name().to_string(),
        elapsed_ms: elapsed.as_millis() as u64,
    })
}

/// Mean seconds per checked task, for cost modelling.
pub fn mean_seconds(records: &[VerdictRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let total: Duration = records.iter().map(|r| Duration::from_millis(r.elapsed_ms)).sum();
    total.as_secs_f64() / records.len() as f64
}
