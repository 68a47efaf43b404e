use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("invalid trajectory {id}: {violations:?}")]
    InvalidTrajectory { id: String, violations: Vec<String> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("token index {index} out of range for {bins} bins")]
    TokenOutOfRange { index: u32, bins: u32 },

    #[error("expected {expected} tokens, got {got}")]
    TokenCount { expected: usize, got: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("probability table does not sum to one (sum = {0})")]
    NotNormalized(f64),

    #[error("invalid joint distribution: {0}")]
    InvalidJoint(String),

    #[error("uncovered atomic label: {0}")]
    UncoveredLabel(String),

    #[error("unknown atomic label: {0:?}")]
    UnknownLabel(String),

    #[error("missing prompt field `{0}`")]
    MissingField(&'static str),

    #[error("empty counterfactual response")]
    EmptyCounterfactualResponse,

    #[error("summarize parse failure: {0}")]
    SummarizeParse(String),

    #[error("filter parse failure: {reason}; raw response: {raw}")]
    FilterParse { reason: String, raw: String },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("annotation failed for trajectory {trajectory}: {source}")]
    Annotation {
        trajectory: String,
        #[source]
        source: Box<Error>,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("orphan counterfactual for unknown trajectory {0}")]
    OrphanCounterfactual(String),

    #[error("unknown scene {0}")]
    UnknownScene(String),

    #[error("checksum mismatch for {path}: manifest {expected}, file {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("unsupported schema {schema} version {version}")]
    UnknownSchema { schema: String, version: u32 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("run directory {0} is locked by another pipeline run")]
    Locked(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
