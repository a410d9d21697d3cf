//! Trajectory data model: typed steps, dataset (de)serialization, validation,
//! synthetic fixtures, and caption attachment.
//!
//! Datasets are JSON-Lines files, one trajectory per line, with an optional
//! leading `{"schema_version": "..."}` header line. Screenshot paths are
//! stored relative to a dataset root and only checked for existence (their
//! bytes are hashed elsewhere, never decoded).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "1";

/// What a step's observation consists of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Screenshot,
    Caption,
    Both,
    None,
}

/// Reference to a step's observation: a screenshot on disk, a text caption,
/// both, or nothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationRef {
    pub kind: ObservationKind,
    pub screenshot_path: Option<String>,
    pub caption: Option<String>,
}

impl ObservationRef {
    pub fn screenshot(path: impl Into<String>) -> Self {
        ObservationRef {
            kind: ObservationKind::Screenshot,
            screenshot_path: Some(path.into()),
            caption: None,
        }
    }

    pub fn caption(text: impl Into<String>) -> Self {
        ObservationRef {
            kind: ObservationKind::Caption,
            screenshot_path: None,
            caption: Some(text.into()),
        }
    }

    pub fn both(path: impl Into<String>, text: impl Into<String>) -> Self {
        ObservationRef {
            kind: ObservationKind::Both,
            screenshot_path: Some(path.into()),
            caption: Some(text.into()),
        }
    }

    pub fn none() -> Self {
        ObservationRef {
            kind: ObservationKind::None,
            screenshot_path: None,
            caption: None,
        }
    }

    pub fn has_caption(&self) -> bool {
        matches!(self.kind, ObservationKind::Caption | ObservationKind::Both)
            && self.caption.as_deref().is_some_and(|c| !c.is_empty())
    }

    pub fn has_screenshot(&self) -> bool {
        matches!(self.kind, ObservationKind::Screenshot | ObservationKind::Both)
            && self.screenshot_path.is_some()
    }
}

/// One step of a trajectory: the observation, the agent's chain-of-thought,
/// and the action it took.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based, consecutive within a trajectory.
    pub index: u32,
    pub cot: String,
    pub action: String,
    pub observation: ObservationRef,
}

/// Ground-truth outcome of a trajectory. `Unlabeled` exists so the silver
/// labeling stage can fill it in later; metrics refuse unlabeled items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GoldLabel {
    Success,
    Failure,
    Unlabeled,
}

impl GoldLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            GoldLabel::Success => "success",
            GoldLabel::Failure => "failure",
            GoldLabel::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for GoldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// Wire form is "success" | "failure" | null.
impl Serialize for GoldLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            GoldLabel::Success => serializer.serialize_some("success"),
            GoldLabel::Failure => serializer.serialize_some("failure"),
            GoldLabel::Unlabeled => serializer.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for GoldLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match Option::<String>::deserialize(deserializer)? {
            None => Ok(GoldLabel::Unlabeled),
            Some(s) => match s.as_str() {
                "success" => Ok(GoldLabel::Success),
                "failure" => Ok(GoldLabel::Failure),
                other => Err(D::Error::custom(format!(
                    "gold_label must be \"success\", \"failure\", or null, got {other:?}"
                ))),
            },
        }
    }
}

/// A full agent trajectory for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub task: String,
    pub gold_label: GoldLabel,
    pub source: String,
    pub steps: Vec<Step>,
}

/// An ordered collection of trajectories plus the schema version they were
/// written with. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub schema_version: String,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Dataset {
            schema_version: SCHEMA_VERSION.to_string(),
            trajectories,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaHeader {
    schema_version: String,
}

/// A single violated invariant, with enough context to locate it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    EmptyTask,
    NoSteps,
    NonConsecutiveIndex { position: usize, found: u32 },
    EmptyCot { step: u32 },
    EmptyAction { step: u32 },
    Observation { step: u32, detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty id"),
            Violation::EmptyTask => write!(f, "empty task"),
            Violation::NoSteps => write!(f, "trajectory has no steps"),
            Violation::NonConsecutiveIndex { position, found } => {
                write!(f, "non-consecutive index at position {position} (found {found})")
            }
            Violation::EmptyCot { step } => write!(f, "empty cot at step {step}"),
            Violation::EmptyAction { step } => write!(f, "empty action at step {step}"),
            Violation::Observation { step, detail } => {
                write!(f, "observation invariant at step {step}: {detail}")
            }
        }
    }
}

/// Every violated invariant of one trajectory; empty iff the trajectory is
/// well-formed. Violations are data, not errors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks every structural invariant of a trajectory and reports each
/// violation with its step index. Screenshot file existence is a load-time
/// concern (see [`missing_screenshots`]), not part of this report.
pub fn validate_trajectory(t: &Trajectory) -> ValidationReport {
    let mut violations = Vec::new();
    if t.id.is_empty() {
        violations.push(Violation::EmptyId);
    }
    if t.task.is_empty() {
        violations.push(Violation::EmptyTask);
    }
    if t.steps.is_empty() {
        violations.push(Violation::NoSteps);
    }
    for (pos, step) in t.steps.iter().enumerate() {
        let expected = (pos + 1) as u32;
        if step.index != expected {
            violations.push(Violation::NonConsecutiveIndex {
                position: pos + 1,
                found: step.index,
            });
        }
        if step.cot.is_empty() {
            violations.push(Violation::EmptyCot { step: step.index });
        }
        if step.action.is_empty() {
            violations.push(Violation::EmptyAction { step: step.index });
        }
        let obs = &step.observation;
        let detail = match obs.kind {
            ObservationKind::Screenshot => {
                if obs.screenshot_path.is_none() {
                    Some("kind=screenshot requires screenshot_path".to_string())
                } else if obs.caption.is_some() {
                    Some("kind=screenshot forbids caption".to_string())
                } else {
                    None
                }
            }
            ObservationKind::Caption => {
                if obs.caption.as_deref().is_none_or(|c| c.is_empty()) {
                    Some("kind=caption requires nonempty caption".to_string())
                } else if obs.screenshot_path.is_some() {
                    Some("kind=caption forbids screenshot_path".to_string())
                } else {
                    None
                }
            }
            ObservationKind::Both => {
                if obs.screenshot_path.is_none() || obs.caption.as_deref().is_none_or(|c| c.is_empty()) {
                    Some("kind=both requires screenshot_path and nonempty caption".to_string())
                } else {
                    None
                }
            }
            ObservationKind::None => {
                if obs.screenshot_path.is_some() || obs.caption.is_some() {
                    Some("kind=none forbids screenshot_path and caption".to_string())
                } else {
                    None
                }
            }
        };
        if let Some(detail) = detail {
            violations.push(Violation::Observation {
                step: step.index,
                detail,
            });
        }
    }
    ValidationReport { violations }
}

/// Steps whose observation requires a screenshot that is not on disk under
/// `root`. Returns (step index, resolved path) pairs.
pub fn missing_screenshots(t: &Trajectory, root: &Path) -> Vec<(u32, PathBuf)> {
    t.steps
        .iter()
        .filter_map(|s| {
            if !matches!(s.observation.kind, ObservationKind::Screenshot | ObservationKind::Both) {
                return None;
            }
            let rel = s.observation.screenshot_path.as_deref()?;
            let path = root.join(rel);
            if path.is_file() {
                None
            } else {
                Some((s.index, path))
            }
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate trajectory id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("invalid trajectory {id:?} at line {line}: {report}")]
    Invalid {
        id: String,
        line: usize,
        report: ValidationReport,
    },
    #[error("missing screenshot for trajectory {id:?} step {step}: {path}")]
    MissingScreenshot { id: String, step: u32, path: PathBuf },
}

/// Loads a JSONL dataset, checking all invariants including screenshot
/// existence under `root`. Records are kept in file order.
pub fn load_dataset(path: &Path, root: &Path) -> Result<Dataset, DatasetError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    parse_dataset(reader, Some(root))
}

/// Parses dataset JSONL from any reader. When `root` is `None`, screenshot
/// existence is not checked (useful for in-memory round trips).
pub fn parse_dataset(reader: impl BufRead, root: Option<&Path>) -> Result<Dataset, DatasetError> {
    let mut schema_version: Option<String> = None;
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut seen_first_record = false;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if !seen_first_record && schema_version.is_none() {
            if let Ok(header) = serde_json::from_str::<SchemaHeader>(&line) {
                // Only treat as header if the object has no trajectory id.
                let value: serde_json::Value = serde_json::from_str(&line)
                    .map_err(|source| DatasetError::Malformed { line: line_no, source })?;
                if value.get("id").is_none() {
                    schema_version = Some(header.schema_version);
                    continue;
                }
            }
        }
        seen_first_record = true;
        let t: Trajectory = serde_json::from_str(&line)
            .map_err(|source| DatasetError::Malformed { line: line_no, source })?;
        if trajectories.iter().any(|existing| existing.id == t.id) {
            return Err(DatasetError::DuplicateId { id: t.id, line: line_no });
        }
        let report = validate_trajectory(&t);
        if !report.is_empty() {
            return Err(DatasetError::Invalid { id: t.id, line: line_no, report });
        }
        if let Some(root) = root {
            if let Some((step, path)) = missing_screenshots(&t, root).into_iter().next() {
                return Err(DatasetError::MissingScreenshot { id: t.id, step, path });
            }
        }
        trajectories.push(t);
    }

    Ok(Dataset {
        schema_version: schema_version.unwrap_or_else(|| SCHEMA_VERSION.to_string()),
        trajectories,
    })
}

/// Serializes a dataset to JSONL: schema header line, then one record per
/// line in order.
pub fn write_dataset(ds: &Dataset, mut out: impl Write) -> std::io::Result<()> {
    let header = SchemaHeader {
        schema_version: ds.schema_version.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for t in &ds.trajectories {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    std::fs::write(path, buf)
}

pub fn dataset_to_jsonl(ds: &Dataset) -> String {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf).expect("in-memory write cannot fail");
    String::from_utf8(buf).expect("JSONL is UTF-8")
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("n_trajectories must be >= 1")]
    NoTrajectories,
    #[error("steps_per must be >= 1")]
    NoSteps,
    #[error("gold_failure_fraction must be in [0, 1], got {0}")]
    BadFraction(f64),
}

const FIXTURE_GOALS: &[&str] = &[
    "find the cheapest listed item and open its detail page",
    "apply the in-stock filter and report the first result",
    "locate the booking form and submit the requested dates",
    "search the catalog for the target product and save it",
    "navigate to the account page and update the display name",
];

const FIXTURE_ELEMENTS: &[&str] = &["search_box", "submit", "filter_panel", "result_link", "date_picker"];

/// Generates a deterministic synthetic dataset: caption-only observations,
/// exactly `floor(n * gold_failure_fraction)` trajectories labeled failure.
/// Pure function of its arguments.
pub fn synthesize_fixture(
    n_trajectories: usize,
    steps_per: usize,
    gold_failure_fraction: f64,
    seed: u64,
) -> Result<Dataset, FixtureError> {
    if n_trajectories == 0 {
        return Err(FixtureError::NoTrajectories);
    }
    if steps_per == 0 {
        return Err(FixtureError::NoSteps);
    }
    if !(0.0..=1.0).contains(&gold_failure_fraction) || gold_failure_fraction.is_nan() {
        return Err(FixtureError::BadFraction(gold_failure_fraction));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_failures = ((n_trajectories as f64) * gold_failure_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n_trajectories).collect();
    order.shuffle(&mut rng);
    let mut is_failure = vec![false; n_trajectories];
    for &i in order.iter().take(n_failures) {
        is_failure[i] = true;
    }

    let mut trajectories = Vec::with_capacity(n_trajectories);
    for (i, &failure) in is_failure.iter().enumerate() {
        let id = format!("fix-{i:04}");
        let goal = FIXTURE_GOALS[rng.random_range(0..FIXTURE_GOALS.len())];
        let task = format!("Synthetic task {id}: {goal}.");
        let mut steps = Vec::with_capacity(steps_per);
        for k in 1..=steps_per {
            let element = FIXTURE_ELEMENTS[rng.random_range(0..FIXTURE_ELEMENTS.len())];
            let arg = rng.random_range(100..1000);
            let action = format!("click('{element}_{arg}')");
            let cot = format!(
                "Step {k} of {id}: the page shows the {element} control, so I will interact with it \
                 to make progress on the task. In summary, the next action I will perform is {action}"
            );
            let caption = format!("Synthetic screenshot for {id} step {k}: a web page showing the {element} control.");
            steps.push(Step {
                index: k as u32,
                cot,
                action,
                observation: ObservationRef::caption(caption),
            });
        }
        trajectories.push(Trajectory {
            id,
            task,
            gold_label: if failure { GoldLabel::Failure } else { GoldLabel::Success },
            source: format!("synthetic:seed={seed}"),
            steps,
        });
    }

    Ok(Dataset::new(trajectories))
}

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("step {step} has no screenshot to caption")]
    NoScreenshot { step: u32 },
    #[error("could not read screenshot for step {step}: {source}")]
    UnreadableScreenshot {
        step: u32,
        #[source]
        source: std::io::Error,
    },
    #[error("caption failed: step {step}: {reason}")]
    CaptionFailed { step: u32, reason: String },
    #[error("captioner returned empty text for step {step}")]
    EmptyCaption { step: u32 },
}

/// Produces a caption for one screenshot image.
pub trait Captioner {
    fn caption(&self, image: &[u8], media_type: &str) -> Result<String, String>;
}

impl<F> Captioner for F
where
    F: Fn(&[u8], &str) -> Result<String, String>,
{
    fn caption(&self, image: &[u8], media_type: &str) -> Result<String, String> {
        self(image, media_type)
    }
}

/// Media type inferred from a screenshot path extension.
pub fn media_type_for(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
        "image/jpeg"
    } else if lower.ends_with(".webp") {
        "image/webp"
    } else if lower.ends_with(".gif") {
        "image/gif"
    } else {
        "image/png"
    }
}

/// Returns a copy of `t` where every step's observation gains a caption and
/// its kind becomes `both`. Existing captions are overwritten; cot and action
/// fields are untouched. Results are assembled in step order.
pub fn attach_captions(
    t: &Trajectory,
    root: &Path,
    captioner: &dyn Captioner,
) -> Result<Trajectory, CaptionError> {
    let mut out = t.clone();
    for step in &mut out.steps {
        let rel = step
            .observation
            .screenshot_path
            .as_deref()
            .filter(|_| step.observation.has_screenshot())
            .ok_or(CaptionError::NoScreenshot { step: step.index })?;
        let path = root.join(rel);
        let bytes = std::fs::read(&path).map_err(|source| CaptionError::UnreadableScreenshot {
            step: step.index,
            source,
        })?;
        let caption = captioner
            .caption(&bytes, media_type_for(rel))
            .map_err(|reason| CaptionError::CaptionFailed { step: step.index, reason })?;
        if caption.is_empty() {
            return Err(CaptionError::EmptyCaption { step: step.index });
        }
        step.observation.caption = Some(caption);
        step.observation.kind = ObservationKind::Both;
    }
    Ok(out)
}
