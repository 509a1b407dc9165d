//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // --- task environment ---
    #[error("difficulty {0} outside supported range 1..={max}", max = crate::env::MAX_DEPTH)]
    InvalidDifficulty(u32),
    #[error("task {task}: unknown rule id {rule}")]
    UnknownRule { task: String, rule: String },
    #[error("task {task}: rule {rule} premises not satisfied")]
    PreconditionViolation { task: String, rule: String },
    #[error("invalid task {task}: {reason}")]
    InvalidTask { task: String, reason: String },

    // --- corpus ---
    #[error("response has no answer marker and no refusal suffix")]
    UnparseableResponse,
    #[error("answer {0:?} is not one of true/false/unknown")]
    MalformedAnswer(String),
    #[error("{path}:{line}: {message}")]
    ParseLine { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: duplicate task id {id}")]
    DuplicateTaskId { path: PathBuf, line: usize, id: String },
    #[error("task id {0} does not resolve in the task store")]
    UnknownTaskId(String),

    // --- numerics ---
    #[error("degenerate length distribution: sigma = 0")]
    DegenerateSigma,
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSample { needed: usize, got: usize },
    #[error("precision undefined: batch contains no non-refusal responses")]
    UndefinedPrecision,
    #[error("{what} = {value} outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("resampling over an empty batch")]
    EmptyBatch,

    // --- expert iteration / curriculum ---
    #[error("expert set is empty: every sampled response had reward -1")]
    EmptyExpertSet,
    #[error("resume mismatch: {0}")]
    ResumeMismatch(String),
    #[error("run directory incomplete: missing {0:?}")]
    IncompleteRun(Vec<String>),
    #[error("run directory {0} is locked by another process")]
    RunLocked(PathBuf),

    // --- config ---
    #[error("invalid run config:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    // --- remote backend ---
    #[error("remote request failed after {attempts} attempts: {message}")]
    RetriesExhausted { attempts: u32, message: String },
    #[error("remote request rejected: status {status}: {message}")]
    RemoteRejected { status: u16, message: String },
    #[error("remote response malformed: {0}")]
    RemoteMalformed(String),
    #[error("remote fine-tune job {id} ended in status {status}")]
    RemoteJobFailed { id: String, status: String },
    #[error("remote backend misconfigured: {0}")]
    RemoteConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
