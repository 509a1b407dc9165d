//! Response texts, parsing, refusal annotation and training datasets.
//!
//! A response is reasoning steps (delimited by a configurable step marker),
//! then either an assertive answer after `####` or the canonical refusal
//! suffix. Refusals may still embed an answer before the suffix; refusal
//! detection runs before answer extraction, so an embedded answer never
//! makes a refusal assertive.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Label, RuleChainTask, TaskSet};
use crate::error::{Error, Result};

/// Canonical refusal suffix appended to wrong answers during refusal-aware
/// initialisation and emitted by refusal-trained policies.
pub const REFUSAL_SUFFIX: &str =
    "Sorry, I am not sure if I answer the question correctly. There might be mistakes in my answer";

/// Marker separating the reasoning steps from the final answer.
pub const ANSWER_MARKER: &str = "####";

/// Step-marker convention of a task family. Reasoning length is the number
/// of occurrences of the marker pattern; rendering guarantees exactly one
/// occurrence per step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pattern: String,
}

impl Default for MarkerSpec {
    fn default() -> Self {
        MarkerSpec::keyword("Since")
    }
}

impl MarkerSpec {
    /// Keyword marker: each step opens with the keyword ("Since ...").
    pub fn keyword(word: &str) -> MarkerSpec {
        MarkerSpec { pattern: word.to_string() }
    }

    /// Paragraph marker: each step is a sentence terminated by ".\n".
    pub fn paragraph() -> MarkerSpec {
        MarkerSpec { pattern: ".\n".to_string() }
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    fn is_paragraph(&self) -> bool {
        self.pattern == ".\n"
    }

    /// Renders one reasoning step containing exactly one marker occurrence.
    /// `body` must not itself contain the marker pattern.
    pub fn render_step(&self, body: &str) -> String {
        debug_assert!(!body.contains(&self.pattern), "step body contains the marker");
        if self.is_paragraph() {
            format!("{body}.\n")
        } else {
            format!("{} {body}.", self.pattern)
        }
    }

    /// Joins rendered steps into the reasoning section of a response.
    pub fn join_steps(&self, steps: &[String]) -> String {
        if self.is_paragraph() {
            steps.concat()
        } else {
            steps.join(" ")
        }
    }
}

/// Renders a full assertive response: steps, then `#### <answer>`.
pub fn render_answer(step_bodies: &[String], answer: Label, marker: &MarkerSpec) -> String {
    let steps: Vec<String> = step_bodies.iter().map(|b| marker.render_step(b)).collect();
    let head = marker.join_steps(&steps);
    if head.is_empty() {
        format!("{ANSWER_MARKER} {answer}")
    } else {
        format!("{head} {ANSWER_MARKER} {answer}")
    }
}

/// Renders a refusal without an embedded answer.
pub fn render_refusal(step_bodies: &[String], marker: &MarkerSpec) -> String {
    let steps: Vec<String> = step_bodies.iter().map(|b| marker.render_step(b)).collect();
    let head = marker.join_steps(&steps);
    if head.is_empty() {
        REFUSAL_SUFFIX.to_string()
    } else {
        format!("{head} {REFUSAL_SUFFIX}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Answer(Label),
    /// Refusal, with the embedded answer if one precedes the suffix.
    Refusal(Option<Label>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub steps: Vec<String>,
    pub len: u32,
    pub verdict: Verdict,
}

fn normalize_whitespace(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses a raw response into steps, reasoning length and verdict.
///
/// Refusal detection is an exact suffix match after whitespace
/// normalisation and runs before answer extraction. The reasoning length is
/// the number of marker occurrences before the answer/suffix; a response
/// with no marker occurrence counts as a single step.
pub fn parse_response(raw: &str, marker: &MarkerSpec) -> Result<ParsedResponse> {
    // Normalising whitespace makes suffix detection robust to line wrapping,
    // but would erase paragraph markers; count steps on the raw text for
    // those instead.
    let norm = normalize_whitespace(raw);
    let norm_suffix = normalize_whitespace(REFUSAL_SUFFIX);
    let is_refusal = norm.ends_with(&norm_suffix);

    let body_raw = if is_refusal {
        // Cut the suffix (and the spaces before it) off the raw text. Keep
        // any trailing newline: it may terminate a paragraph marker, and
        // the last step must still count.
        let cut = raw
            .rfind(REFUSAL_SUFFIX.split_whitespace().next().expect("suffix is non-empty"))
            .unwrap_or(raw.len());
        raw[..cut].trim_end_matches([' ', '\t'])
    } else {
        raw.trim_end()
    };

    let (step_region, answer_text) = match body_raw.rfind(ANSWER_MARKER) {
        Some(idx) => (&body_raw[..idx], Some(body_raw[idx + ANSWER_MARKER.len()..].trim())),
        None => (body_raw, None),
    };

    let verdict = match (is_refusal, answer_text) {
        (true, Some(text)) => Verdict::Refusal(Some(parse_answer_text(text)?)),
        (true, None) => Verdict::Refusal(None),
        (false, Some(text)) => Verdict::Answer(parse_answer_text(text)?),
        (false, None) => return Err(Error::UnparseableResponse),
    };

    let mut steps: Vec<String> = Vec::new();
    let pattern = marker.pattern();
    let indices: Vec<usize> = step_region.match_indices(pattern).map(|(i, _)| i).collect();
    if indices.is_empty() {
        steps.push(normalize_whitespace(step_region));
    } else if marker.pattern() == ".\n" {
        // Paragraph markers terminate steps, so segments end at each marker.
        let mut start = 0usize;
        for &i in &indices {
            let end = i + pattern.len();
            steps.push(normalize_whitespace(&step_region[start..end]));
            start = end;
        }
    } else {
        // Keyword markers open steps, so segments start at each marker.
        for (n, &i) in indices.iter().enumerate() {
            let end = indices.get(n + 1).copied().unwrap_or(step_region.len());
            steps.push(normalize_whitespace(&step_region[i..end]));
        }
    }

    Ok(ParsedResponse { len: steps.len() as u32, steps, verdict })
}

fn parse_answer_text(text: &str) -> Result<Label> {
    let cleaned = text.trim().trim_matches(|c: char| ".,;:!?".contains(c));
    Label::parse(cleaned)
}

/// Appends the canonical refusal suffix to an assertive response.
/// Idempotent: responses that already end in the suffix are returned as-is.
/// An embedded assertive answer is retained.
pub fn annotate_refusal(raw: &str, marker: &MarkerSpec) -> Result<String> {
    let parsed = parse_response(raw, marker)?;
    match parsed.verdict {
        Verdict::Refusal(_) => Ok(raw.to_string()),
        Verdict::Answer(_) => Ok(format!("{} {REFUSAL_SUFFIX}", raw.trim_end())),
    }
}

/// Task-level outcome of one response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum Outcome {
    Correct,
    Wrong,
    Refusal { embedded_correct: bool },
}

impl Outcome {
    pub fn is_correct(&self) -> bool {
        matches!(self, Outcome::Correct)
    }

    pub fn is_wrong(&self) -> bool {
        matches!(self, Outcome::Wrong)
    }

    pub fn is_refusal(&self) -> bool {
        matches!(self, Outcome::Refusal { .. })
    }
}

/// Classifies a parsed response against the task's ground truth.
pub fn classify_outcome(parsed: &ParsedResponse, task: &RuleChainTask) -> Outcome {
    match &parsed.verdict {
        Verdict::Answer(label) => {
            if task.evaluate_answer(*label) {
                Outcome::Correct
            } else {
                Outcome::Wrong
            }
        }
        Verdict::Refusal(embedded) => {
            Outcome::Refusal { embedded_correct: embedded.is_some_and(|l| task.evaluate_answer(l)) }
        }
    }
}

/// One scored response, as serialised to outcome JSONL files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub task_id: String,
    pub outcome: String,
    pub embedded_correct: bool,
    pub steps: u32,
}

impl OutcomeRecord {
    pub fn new(task_id: &str, outcome: Outcome, steps: u32) -> OutcomeRecord {
        let (tag, embedded) = match outcome {
            Outcome::Correct => ("correct", false),
            Outcome::Wrong => ("wrong", false),
            Outcome::Refusal { embedded_correct } => ("refusal", embedded_correct),
        };
        OutcomeRecord {
            task_id: task_id.to_string(),
            outcome: tag.to_string(),
            embedded_correct: embedded,
            steps,
        }
    }

    pub fn to_outcome(&self) -> Result<Outcome> {
        match self.outcome.as_str() {
            "correct" => Ok(Outcome::Correct),
            "wrong" => Ok(Outcome::Wrong),
            "refusal" => Ok(Outcome::Refusal { embedded_correct: self.embedded_correct }),
            other => Err(Error::MalformedAnswer(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One prompt/completion pair tied to a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub task_id: String,
    pub prompt: String,
    pub completion: String,
}

/// A training corpus. Task ids may repeat (expert sets duplicate resampled
/// completions on purpose), but each id must resolve in the accompanying
/// task store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub split: Split,
}

impl Dataset {
    pub fn new(split: Split) -> Dataset {
        Dataset { records: Vec::new(), split }
    }

    pub fn push(&mut self, task: &RuleChainTask, completion: String) {
        self.records.push(DatasetRecord {
            task_id: task.id.clone(),
            prompt: task.prompt(),
            completion,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Errors with the first unresolvable task id, if any.
    pub fn check_resolves(&self, tasks: &TaskSet) -> Result<()> {
        for r in &self.records {
            if tasks.get(&r.task_id).is_none() {
                return Err(Error::UnknownTaskId(r.task_id.clone()));
            }
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(
                &serde_json::to_string(record).expect("dataset record serialization is infallible"),
            );
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl_string())?;
        Ok(())
    }

    pub fn from_jsonl(path: &Path, split: Split) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: DatasetRecord = serde_json::from_str(line).map_err(|e| {
                Error::ParseLine { path: path.to_path_buf(), line: i + 1, message: e.to_string() }
            })?;
            records.push(record);
        }
        Ok(Dataset { records, split })
    }

    /// Distinct task ids, in first-seen order.
    pub fn task_ids(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.task_id.as_str()))
            .map(|r| r.task_id.as_str())
            .collect()
    }
}
