//! CoT rewriting: strategy prompts, output parsing, and the structural
//! checks that keep manipulation action-preserving.

use crate::prompts::{
    screenshot_block, ImagePolicy, COMPETENCE_BOOSTING_BLOCK, ENVIRONMENT_BLAMING_BLOCK,
    PROGRESS_FABRICATION_BLOCK, REFLECTIVE_REASONING_BLOCK, REWRITE_BASE_TEMPLATE,
    TASK_REINTERPRETATION_BLOCK,
};
use crate::provider::{ChatClient, ChatMessage, ChatRequest, Part, ProviderError, RetryPolicy};
use crate::trajectory::{GoldLabel, Step, Trajectory};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// The five fixed rewriting strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    CompetenceBoosting,
    ReflectiveReasoning,
    ProgressFabrication,
    EnvironmentBlaming,
    TaskReinterpretation,
}

/// Style-based strategies alter only presentation; content-based ones inject
/// misleading claims about progress, environment, or task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyClass {
    Style,
    Content,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::CompetenceBoosting,
        Strategy::ReflectiveReasoning,
        Strategy::ProgressFabrication,
        Strategy::EnvironmentBlaming,
        Strategy::TaskReinterpretation,
    ];

    pub fn class(&self) -> StrategyClass {
        match self {
            Strategy::CompetenceBoosting | Strategy::ReflectiveReasoning => StrategyClass::Style,
            _ => StrategyClass::Content,
        }
    }

    pub fn slug(&self) -> &'static str {
        match self {
            Strategy::CompetenceBoosting => "competence_boosting",
            Strategy::ReflectiveReasoning => "reflective_reasoning",
            Strategy::ProgressFabrication => "progress_fabrication",
            Strategy::EnvironmentBlaming => "environment_blaming",
            Strategy::TaskReinterpretation => "task_reinterpretation",
        }
    }

    pub fn details_block(&self) -> &'static str {
        match self {
            Strategy::CompetenceBoosting => COMPETENCE_BOOSTING_BLOCK,
            Strategy::ReflectiveReasoning => REFLECTIVE_REASONING_BLOCK,
            Strategy::ProgressFabrication => PROGRESS_FABRICATION_BLOCK,
            Strategy::EnvironmentBlaming => ENVIRONMENT_BLAMING_BLOCK,
            Strategy::TaskReinterpretation => TASK_REINTERPRETATION_BLOCK,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|strategy| strategy.slug() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Strategy::ALL.iter().map(|s| s.slug()).collect();
                format!("unknown strategy {s:?}; known: {}", known.join(", "))
            })
    }
}

/// The mandatory closing sentence of every rewritten thought, up to the
/// action text.
pub const SUMMARY_SENTENCE: &str = "In summary, the next action I will perform is ";

/// One rewritten step as returned by the rewriting model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewritePair {
    pub action: String,
    pub thought: String,
}

/// True when `thought` ends with the mandatory summary sentence for
/// `action`, modulo trailing whitespace and at most one sentence-final
/// period.
pub fn has_summary_sentence(thought: &str, action: &str) -> bool {
    let expected = format!("{SUMMARY_SENTENCE}{}", action.trim());
    let trimmed = thought.trim_end();
    if trimmed.ends_with(&expected) {
        return true;
    }
    trimmed
        .strip_suffix('.')
        .map(|t| t.trim_end().ends_with(&expected))
        .unwrap_or(false)
}

/// A trajectory whose CoT fields were rewritten under one strategy; actions
/// and observations identical to the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManipulatedTrajectory {
    pub source_id: String,
    pub strategy: Strategy,
    pub steps: Vec<Step>,
    pub rewriter_model: String,
    /// Cache digest of the rewriting request that produced the accepted
    /// output.
    pub rewrite_digest: String,
    pub attempts: u32,
}

/// Builds the rewriting prompt text: the base template with the strategy
/// block, task, thought/action history, and screenshot markers filled in.
pub fn build_rewrite_prompt(t: &Trajectory, strategy: Strategy) -> String {
    crate::provider::render_messages(
        &build_rewrite_messages(t, strategy, &ImagePolicy::Markers)
            .expect("marker policy cannot fail"),
    )
}

/// Message form of the rewriting prompt with the configured image handling.
pub fn build_rewrite_messages(
    t: &Trajectory,
    strategy: Strategy,
    images: &ImagePolicy<'_>,
) -> Result<Vec<ChatMessage>, crate::prompts::PromptError> {
    let history = crate::prompts::render_history(&t.steps, true);
    let text = REWRITE_BASE_TEMPLATE
        .replace("{strategy_details}", strategy.details_block())
        .replace("{task}", &t.task)
        .replace("{agent_action_history}", &history);
    let (prefix, _) = text
        .split_once("{screenshots}")
        .expect("rewrite template has a screenshots placeholder");
    let mut parts = vec![Part::text(prefix.to_string())];
    parts.extend(screenshot_block(&t.steps, images)?);
    Ok(vec![ChatMessage::user(parts)])
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RewriteParseError {
    #[error("no parseable JSON array of action/thought objects in output")]
    NoArray,
    #[error("entry {index} missing field {field:?}")]
    MissingField { index: usize, field: &'static str },
    #[error("entry {index} field {field:?} is not a string")]
    NotAString { index: usize, field: &'static str },
    #[error("count mismatch: output has {got} pairs but the trajectory has {expected} steps")]
    CountMismatch { got: usize, expected: usize },
}

/// Extracts the first well-formed array of `{action, thought}` objects from
/// raw model output, tolerating surrounding prose, then checks the pair
/// count against the original trajectory.
pub fn parse_rewrite_output(
    text: &str,
    original: &Trajectory,
) -> Result<Vec<RewritePair>, RewriteParseError> {
    // Scan every array-of-objects candidate in order; the first one with the
    // action/thought shape wins. If none has it, report what was wrong with
    // the first candidate so the corrective retry names a concrete problem.
    let mut first_failure: Option<RewriteParseError> = None;
    let mut found_candidate = false;
    for (pos, ch) in text.char_indices() {
        if ch != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<serde_json::Value>();
        let Some(Ok(serde_json::Value::Array(items))) = stream.next() else {
            continue;
        };
        if items.is_empty() || !items.iter().all(|v| v.is_object()) {
            continue;
        }
        found_candidate = true;
        match pairs_from_entries(&items) {
            Ok(pairs) => {
                if pairs.len() != original.steps.len() {
                    return Err(RewriteParseError::CountMismatch {
                        got: pairs.len(),
                        expected: original.steps.len(),
                    });
                }
                return Ok(pairs);
            }
            Err(e) => {
                first_failure.get_or_insert(e);
            }
        }
    }
    match (found_candidate, first_failure) {
        (true, Some(err)) => Err(err),
        _ => Err(RewriteParseError::NoArray),
    }
}

fn pairs_from_entries(entries: &[serde_json::Value]) -> Result<Vec<RewritePair>, RewriteParseError> {
    let mut pairs = Vec::with_capacity(entries.len());
    for (index, entry) in entries.iter().enumerate() {
        let get = |field: &'static str| -> Result<String, RewriteParseError> {
            let value = entry.get(field).ok_or(RewriteParseError::MissingField { index, field })?;
            value
                .as_str()
                .map(str::to_string)
                .ok_or(RewriteParseError::NotAString { index, field })
        };
        pairs.push(RewritePair {
            action: get("action")?,
            thought: get("thought")?,
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RewriteViolation {
    CountMismatch { got: usize, expected: usize },
    ActionMismatch { step: u32, expected: String, got: String },
    MissingSummary { step: u32 },
}

impl fmt::Display for RewriteViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewriteViolation::CountMismatch { got, expected } => {
                write!(f, "count mismatch: {got} pairs vs {expected} steps")
            }
            RewriteViolation::ActionMismatch { step, expected, got } => {
                write!(f, "action mismatch at step {step}: expected {expected:?}, got {got:?}")
            }
            RewriteViolation::MissingSummary { step } => {
                write!(f, "missing summary sentence at step {step}")
            }
        }
    }
}

/// Structural check results for a candidate rewrite. Violations are data.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RewriteValidation {
    pub violations: Vec<RewriteViolation>,
}

impl RewriteValidation {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for RewriteValidation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks pair count, per-index verbatim action equality (whitespace
/// trimmed), and the mandatory closing sentence.
pub fn validate_rewrite(original: &Trajectory, pairs: &[RewritePair]) -> RewriteValidation {
    let mut violations = Vec::new();
    if pairs.len() != original.steps.len() {
        violations.push(RewriteViolation::CountMismatch {
            got: pairs.len(),
            expected: original.steps.len(),
        });
    }
    for (step, pair) in original.steps.iter().zip(pairs.iter()) {
        if step.action.trim() != pair.action.trim() {
            violations.push(RewriteViolation::ActionMismatch {
                step: step.index,
                expected: step.action.clone(),
                got: pair.action.clone(),
            });
        }
        if !has_summary_sentence(&pair.thought, &step.action) {
            violations.push(RewriteViolation::MissingSummary { step: step.index });
        }
    }
    RewriteValidation { violations }
}

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("trajectory {id:?} is not gold-labeled failure (found {label}); only failures are manipulated")]
    NotFailure { id: String, label: GoldLabel },
    #[error("prompt construction failed: {0}")]
    Prompt(#[from] crate::prompts::PromptError),
    #[error("provider error for trajectory {id:?}: {source}")]
    Provider {
        id: String,
        #[source]
        source: ProviderError,
    },
    #[error("rewrite failed for trajectory {id:?} ({strategy}) after {attempts} attempts: {reason}")]
    Failed {
        id: String,
        strategy: Strategy,
        attempts: u32,
        reason: String,
    },
}

/// Options for [`manipulate`]: validation-failure retries and transport
/// retries are separate planes.
pub struct ManipulateOptions<'a> {
    /// Attempts at getting a structurally valid rewrite (>= 1).
    pub max_attempts: u32,
    /// Transport-level retry schedule for each attempt.
    pub transport_retry: RetryPolicy,
    pub images: ImagePolicy<'a>,
    pub max_output_tokens: Option<u32>,
}

impl Default for ManipulateOptions<'_> {
    fn default() -> Self {
        ManipulateOptions {
            max_attempts: 2,
            transport_retry: RetryPolicy::default(),
            images: ImagePolicy::Markers,
            max_output_tokens: None,
        }
    }
}

/// Rewrites every CoT of a gold-failure trajectory under one strategy:
/// build prompt, complete greedily, parse, validate. Validation failures are
/// retried with a corrective instruction naming the violations.
pub fn manipulate(
    t: &Trajectory,
    strategy: Strategy,
    client: &ChatClient,
    rewriter_model: &str,
    opts: &ManipulateOptions<'_>,
) -> Result<ManipulatedTrajectory, RewriteError> {
    if t.gold_label != GoldLabel::Failure {
        return Err(RewriteError::NotFailure {
            id: t.id.clone(),
            label: t.gold_label,
        });
    }

    let mut messages = build_rewrite_messages(t, strategy, &opts.images)?;
    let max_attempts = opts.max_attempts.max(1);
    let mut last_reason = String::new();

    for attempt in 1..=max_attempts {
        let mut req = ChatRequest::greedy(rewriter_model, messages.clone());
        req.max_output_tokens = opts.max_output_tokens;
        let outcome = client
            .complete_with_retry(&req, &opts.transport_retry)
            .map_err(|source| RewriteError::Provider { id: t.id.clone(), source })?;
        let raw = outcome.response.texts[0].clone();
        let digest = outcome.response.sample_digests[0].clone();

        let validation = match parse_rewrite_output(&raw, t) {
            Ok(pairs) => {
                let validation = validate_rewrite(t, &pairs);
                if validation.is_empty() {
                    let steps = t
                        .steps
                        .iter()
                        .zip(pairs.iter())
                        .map(|(step, pair)| Step {
                            index: step.index,
                            cot: pair.thought.clone(),
                            action: step.action.clone(),
                            observation: step.observation.clone(),
                        })
                        .collect();
                    return Ok(ManipulatedTrajectory {
                        source_id: t.id.clone(),
                        strategy,
                        steps,
                        rewriter_model: rewriter_model.to_string(),
                        rewrite_digest: digest,
                        attempts: attempt,
                    });
                }
                validation.to_string()
            }
            Err(parse_err) => parse_err.to_string(),
        };
        last_reason = validation.clone();

        if attempt < max_attempts {
            messages.push(ChatMessage::assistant_text(raw));
            messages.push(ChatMessage::user_text(format!(
                "Your previous output violated the instructions: {validation}. \
                 Re-output the complete corrected JSON array only, with exactly one entry per \
                 action, each action copied verbatim, and each thought ending with the required \
                 summary sentence."
            )));
        }
    }

    Err(RewriteError::Failed {
        id: t.id.clone(),
        strategy,
        attempts: max_attempts,
        reason: last_reason,
    })
}

/// JSONL wire form of a manipulated trajectory: mirrors the trajectory
/// schema plus the manipulation provenance fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManipulatedRecord {
    pub id: String,
    pub task: String,
    pub gold_label: GoldLabel,
    pub source: String,
    pub steps: Vec<Step>,
    pub strategy: Strategy,
    pub source_id: String,
    pub rewriter_model: String,
    pub rewrite_digest: String,
}

impl ManipulatedRecord {
    pub fn new(source: &Trajectory, m: &ManipulatedTrajectory) -> Self {
        ManipulatedRecord {
            id: m.source_id.clone(),
            task: source.task.clone(),
            gold_label: source.gold_label,
            source: source.source.clone(),
            steps: m.steps.clone(),
            strategy: m.strategy,
            source_id: m.source_id.clone(),
            rewriter_model: m.rewriter_model.clone(),
            rewrite_digest: m.rewrite_digest.clone(),
        }
    }
}

/// Field-level difference check: the only fields allowed to differ between a
/// source trajectory and its manipulation are the per-step `cot` texts.
pub fn only_cot_delta(original: &Trajectory, manipulated: &ManipulatedTrajectory) -> bool {
    original.id == manipulated.source_id
        && original.steps.len() == manipulated.steps.len()
        && original
            .steps
            .iter()
            .zip(manipulated.steps.iter())
            .all(|(a, b)| a.index == b.index && a.action == b.action && a.observation == b.observation)
}
