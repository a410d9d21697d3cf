//! Judge prompts in five modes, verdict parsing, majority voting, and the
//! judge invocation path with parallel/sequential compute scaling.

use crate::manipulation::{ManipulatedTrajectory, Strategy};
use crate::prompts::{
    render_action_list, render_history, screenshot_block, ImagePolicy, PromptError,
    KEYPOINT_TEMPLATE, MAIN_JUDGE_TEMPLATE, MANIPULATION_AWARE_TEMPLATE, WEBJUDGE_TEMPLATE,
};
use crate::provider::{ChatClient, ChatMessage, ChatRequest, Part, ProviderError, RetryPolicy};
use crate::trajectory::{Step, Trajectory};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::OnceLock;
use thiserror::Error;

/// The five judging prompt modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    Standard,
    ManipulationAware,
    WebJudgeRubric,
    #[serde(rename = "no_cot")]
    NoCoT,
    CaptionModality,
}

impl JudgeMode {
    pub const ALL: [JudgeMode; 5] = [
        JudgeMode::Standard,
        JudgeMode::ManipulationAware,
        JudgeMode::WebJudgeRubric,
        JudgeMode::NoCoT,
        JudgeMode::CaptionModality,
    ];

    pub fn slug(&self) -> &'static str {
        match self {
            JudgeMode::Standard => "standard",
            JudgeMode::ManipulationAware => "manipulation_aware",
            JudgeMode::WebJudgeRubric => "web_judge_rubric",
            JudgeMode::NoCoT => "no_cot",
            JudgeMode::CaptionModality => "caption_modality",
        }
    }
}

impl fmt::Display for JudgeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl std::str::FromStr for JudgeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JudgeMode::ALL
            .into_iter()
            .find(|m| m.slug() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = JudgeMode::ALL.iter().map(|m| m.slug()).collect();
                format!("unknown judge mode {s:?}; known: {}", known.join(", "))
            })
    }
}

/// Judge-time compute configuration: greedy baseline, parallel
/// self-consistency sampling, or a sequential thinking budget.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalingConfig {
    None,
    Parallel {
        n_samples: u32,
        #[serde(default = "default_parallel_temperature")]
        temperature: f64,
    },
    Sequential { thinking_budget_tokens: u32 },
}

fn default_parallel_temperature() -> f64 {
    1.0
}

impl ScalingConfig {
    pub fn parallel(n_samples: u32) -> Self {
        ScalingConfig::Parallel {
            n_samples,
            temperature: default_parallel_temperature(),
        }
    }

    /// Configuration-level invariants; judge() additionally accepts a
    /// directly-built Parallel{n_samples: 1} so the N=1 equivalence property
    /// is expressible.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            ScalingConfig::None => Ok(()),
            ScalingConfig::Parallel { n_samples, temperature } => {
                if *n_samples < 2 {
                    Err("parallel scaling requires n_samples >= 2".to_string())
                } else if *temperature <= 0.0 {
                    Err("parallel scaling requires temperature > 0".to_string())
                } else {
                    Ok(())
                }
            }
            ScalingConfig::Sequential { thinking_budget_tokens } => {
                if *thinking_budget_tokens == 0 {
                    Err("sequential scaling requires a nonzero thinking budget".to_string())
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn n_samples(&self) -> u32 {
        match self {
            ScalingConfig::Parallel { n_samples, .. } => *n_samples,
            _ => 1,
        }
    }
}

impl PartialEq for ScalingConfig {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ScalingConfig::None, ScalingConfig::None) => true,
            (
                ScalingConfig::Parallel { n_samples: a, temperature: at },
                ScalingConfig::Parallel { n_samples: b, temperature: bt },
            ) => a == b && at.to_bits() == bt.to_bits(),
            (
                ScalingConfig::Sequential { thinking_budget_tokens: a },
                ScalingConfig::Sequential { thinking_budget_tokens: b },
            ) => a == b,
            _ => false,
        }
    }
}

impl Eq for ScalingConfig {}

impl Hash for ScalingConfig {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            ScalingConfig::None => 0u8.hash(state),
            ScalingConfig::Parallel { n_samples, temperature } => {
                1u8.hash(state);
                n_samples.hash(state);
                temperature.to_bits().hash(state);
            }
            ScalingConfig::Sequential { thinking_budget_tokens } => {
                2u8.hash(state);
                thinking_budget_tokens.hash(state);
            }
        }
    }
}

impl fmt::Display for ScalingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalingConfig::None => f.write_str("none"),
            ScalingConfig::Parallel { n_samples, temperature } => {
                write!(f, "parallel:{n_samples}:{temperature}")
            }
            ScalingConfig::Sequential { thinking_budget_tokens } => {
                write!(f, "sequential:{thinking_budget_tokens}")
            }
        }
    }
}

/// A judge's parsed decision. `Unparsed` never enters confusion counts; it
/// is tallied separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Success,
    Failure,
    Unparsed,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Success => "success",
            Verdict::Failure => "failure",
            Verdict::Unparsed => "unparsed",
        })
    }
}

/// Which variant of a trajectory a result refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Original,
    Manipulated(Strategy),
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Original => "original".to_string(),
            Variant::Manipulated(s) => s.slug().to_string(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s == "original" {
            return Ok(Variant::Original);
        }
        s.parse::<Strategy>()
            .map(Variant::Manipulated)
            .map_err(serde::de::Error::custom)
    }
}

/// One judge invocation's raw texts, parsed votes, and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResult {
    pub trajectory_id: String,
    pub variant: Variant,
    pub mode: JudgeMode,
    pub scaling: ScalingConfig,
    pub judge_model: String,
    pub raw_texts: Vec<String>,
    pub votes: Vec<Verdict>,
    #[serde(rename = "final")]
    pub final_verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<String>,
    pub request_digests: Vec<String>,
    /// In-memory provenance only: whether every sample came from the cache.
    /// Not serialized, so replayed runs stay byte-identical.
    #[serde(skip)]
    pub cached: bool,
}

/// Screenshot placement relative to the thought/action history.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptLayout {
    /// All screenshots in a trailing block after the history (default).
    #[default]
    TrailingScreenshots,
    /// Each screenshot directly after its step.
    Interleaved,
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("empty keypoints")]
    EmptyKeypoints,
}

/// A borrowed view over either an original trajectory or a manipulated one,
/// carrying everything a judge prompt needs.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryView<'a> {
    pub id: &'a str,
    pub variant: Variant,
    pub task: &'a str,
    pub steps: &'a [Step],
}

impl<'a> TrajectoryView<'a> {
    pub fn original(t: &'a Trajectory) -> Self {
        TrajectoryView {
            id: &t.id,
            variant: Variant::Original,
            task: &t.task,
            steps: &t.steps,
        }
    }

    /// View over a manipulation, borrowing the task from the source
    /// trajectory.
    pub fn manipulated(source: &'a Trajectory, m: &'a ManipulatedTrajectory) -> Self {
        TrajectoryView {
            id: &m.source_id,
            variant: Variant::Manipulated(m.strategy),
            task: &source.task,
            steps: &m.steps,
        }
    }
}

/// Builds the judge messages for a mode. Rubric mode requires keypoints;
/// caption modality requires a caption on every step.
pub fn build_judge_prompt(
    task: &str,
    steps: &[Step],
    mode: JudgeMode,
    keypoints: Option<&str>,
    layout: PromptLayout,
    images: &ImagePolicy<'_>,
) -> Result<Vec<ChatMessage>, PromptError> {
    let parts = match mode {
        JudgeMode::WebJudgeRubric => {
            let keypoints = keypoints.ok_or(PromptError::MissingKeypoints)?;
            let text = WEBJUDGE_TEMPLATE
                .replace("{task}", task)
                .replace("{key_points}", keypoints)
                .replace("{actions}", &render_action_list(steps));
            let (prefix, _) = text
                .split_once("{thoughts}")
                .expect("webjudge template has a thoughts placeholder");
            let mut parts = vec![Part::text(prefix.to_string())];
            for step in steps {
                parts.extend(screenshot_block(std::slice::from_ref(step), images)?);
                parts.push(Part::text(format!("Reason: {}\n", step.cot)));
            }
            parts
        }
        _ => {
            let template = match mode {
                JudgeMode::ManipulationAware => MANIPULATION_AWARE_TEMPLATE,
                _ => MAIN_JUDGE_TEMPLATE,
            };
            let include_cot = mode != JudgeMode::NoCoT;
            let effective_images = match mode {
                JudgeMode::CaptionModality => &ImagePolicy::CaptionsOnly,
                _ => images,
            };
            match layout {
                PromptLayout::TrailingScreenshots => {
                    let text = template
                        .replace("{task}", task)
                        .replace("{agent_action_history}", &render_history(steps, include_cot));
                    let (prefix, _) = text
                        .split_once("{screenshots}")
                        .expect("judge template has a screenshots placeholder");
                    let mut parts = vec![Part::text(prefix.to_string())];
                    parts.extend(screenshot_block(steps, effective_images)?);
                    parts
                }
                PromptLayout::Interleaved => {
                    let text = template.replace("{task}", task);
                    let (head, rest) = text
                        .split_once("{agent_action_history}")
                        .expect("judge template has a history placeholder");
                    let mut parts = vec![Part::text(head.to_string())];
                    for (i, step) in steps.iter().enumerate() {
                        if i > 0 {
                            parts.push(Part::text("\n"));
                        }
                        parts.push(Part::text(render_history(
                            std::slice::from_ref(step),
                            include_cot,
                        )));
                        parts.push(Part::text("\n"));
                        parts.extend(screenshot_block(std::slice::from_ref(step), effective_images)?);
                    }
                    let tail = rest.replace(
                        "{screenshots}",
                        "(Screenshots are shown interleaved with the corresponding steps above.)",
                    );
                    parts.push(Part::text(tail));
                    parts
                }
            }
        }
    };
    Ok(vec![ChatMessage::user(parts)])
}

/// Text view of a judge prompt, for golden files.
pub fn render_judge_prompt(
    task: &str,
    steps: &[Step],
    mode: JudgeMode,
    keypoints: Option<&str>,
    layout: PromptLayout,
) -> Result<String, PromptError> {
    let messages = build_judge_prompt(task, steps, mode, keypoints, layout, &ImagePolicy::Markers)?;
    Ok(crate::provider::render_messages(&messages))
}

fn verdict_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // [\W_] rather than \W so Markdown-italic underscores count as
        // decoration, not as word characters.
        Regex::new(r#"(?i)^[\W_]*status[\W_]*[:=：][\W_]*(success|failure)[\W_]*$"#)
            .expect("verdict regex compiles")
    })
}

/// Scans for the last line carrying a `Status: success|failure` marker,
/// case-insensitively and tolerating surrounding punctuation or markup.
/// Returns `Unparsed` when no line matches.
pub fn parse_verdict(text: &str) -> Verdict {
    let mut verdict = Verdict::Unparsed;
    for line in text.lines() {
        if let Some(caps) = verdict_line_regex().captures(line) {
            verdict = if caps[1].eq_ignore_ascii_case("success") {
                Verdict::Success
            } else {
                Verdict::Failure
            };
        }
    }
    verdict
}

/// Majority vote over parsed verdicts. Unparsed votes are excluded from the
/// count; ties (including even splits) resolve to Failure; an all-unparsed
/// set stays Unparsed.
pub fn majority_verdict(votes: &[Verdict]) -> Verdict {
    let successes = votes.iter().filter(|v| **v == Verdict::Success).count();
    let failures = votes.iter().filter(|v| **v == Verdict::Failure).count();
    if successes == 0 && failures == 0 {
        Verdict::Unparsed
    } else if successes > failures {
        Verdict::Success
    } else {
        Verdict::Failure
    }
}

/// Generates task keypoints with the judge's own model (greedy). The raw
/// text is returned verbatim; requests are cached by (task, model) through
/// the normal request cache.
pub fn generate_keypoints(
    client: &ChatClient,
    judge_model: &str,
    task: &str,
) -> Result<String, JudgeError> {
    let prompt = KEYPOINT_TEMPLATE.replace("{task}", task);
    let req = ChatRequest::greedy(judge_model, vec![ChatMessage::user_text(prompt)]);
    let resp = client.complete(&req)?;
    let text = resp.texts.into_iter().next().unwrap_or_default();
    if text.trim().is_empty() {
        return Err(JudgeError::EmptyKeypoints);
    }
    Ok(text)
}

/// Knobs for [`judge`] beyond mode and scaling.
pub struct JudgeOptions<'a> {
    pub images: ImagePolicy<'a>,
    pub layout: PromptLayout,
    pub transport_retry: RetryPolicy,
    pub max_output_tokens: Option<u32>,
}

impl Default for JudgeOptions<'_> {
    fn default() -> Self {
        JudgeOptions {
            images: ImagePolicy::Markers,
            layout: PromptLayout::default(),
            transport_retry: RetryPolicy::default(),
            max_output_tokens: None,
        }
    }
}

/// Judges one trajectory variant under a mode and scaling config.
///
/// kind=none issues one greedy request; parallel issues `n_samples` requests
/// at the configured temperature and majority-votes the parsed verdicts;
/// sequential issues one greedy request with the thinking budget set.
pub fn judge(
    client: &ChatClient,
    judge_model: &str,
    view: &TrajectoryView<'_>,
    mode: JudgeMode,
    scaling: &ScalingConfig,
    keypoints: Option<String>,
    opts: &JudgeOptions<'_>,
) -> Result<JudgeResult, JudgeError> {
    let keypoints = match (mode, keypoints) {
        (JudgeMode::WebJudgeRubric, None) => Some(generate_keypoints(client, judge_model, view.task)?),
        (_, k) => k,
    };

    let messages = build_judge_prompt(
        view.task,
        view.steps,
        mode,
        keypoints.as_deref(),
        opts.layout,
        &opts.images,
    )?;

    let mut req = ChatRequest::greedy(judge_model, messages);
    req.max_output_tokens = opts.max_output_tokens;
    match scaling {
        ScalingConfig::None => {}
        ScalingConfig::Parallel { n_samples, temperature } => {
            req.n_samples = *n_samples;
            req.temperature = *temperature;
        }
        ScalingConfig::Sequential { thinking_budget_tokens } => {
            req.thinking_budget_tokens = Some(*thinking_budget_tokens);
        }
    }

    let outcome = client.complete_with_retry(&req, &opts.transport_retry)?;
    let response = outcome.response;
    let votes: Vec<Verdict> = response.texts.iter().map(|t| parse_verdict(t)).collect();
    let final_verdict = majority_verdict(&votes);

    Ok(JudgeResult {
        trajectory_id: view.id.to_string(),
        variant: view.variant,
        mode,
        scaling: *scaling,
        judge_model: judge_model.to_string(),
        raw_texts: response.texts,
        votes,
        final_verdict,
        keypoints,
        request_digests: response.sample_digests,
        cached: response.cached,
    })
}
