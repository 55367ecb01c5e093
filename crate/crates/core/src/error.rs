use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("step called on a finished episode")]
    StepAfterDone,

    #[error("invalid task parameters: {0}")]
    InvalidTask(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("demonstration collection failed: {successes} successes over {attempts} attempts")]
    DemoFailure { successes: usize, attempts: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("intervention bucket is empty")]
    EmptyInterventionBucket,

    #[error("{0} bucket is empty")]
    EmptyBucket(&'static str),

    #[error("dataset store is empty")]
    EmptyStore,

    #[error("batch size {0} is odd; balanced sampling needs an even batch")]
    OddBatch(usize),

    #[error("cannot merge stores for tasks `{expected}` and `{found}`")]
    TaskMismatch { expected: String, found: String },

    #[error("dataset schema violation at line {line}: {message}")]
    SchemaViolation { line: usize, message: String },

    #[error("replayed trajectory diverged from its recorded observations at step {step}")]
    ReplayMismatch { step: usize },

    #[error("unknown training method `{0}`")]
    UnknownMethod(String),

    #[error("evaluation needs at least one rollout")]
    ZeroRollouts,

    #[error("quota of {quota} intervention samples not reached after {episodes} episodes ({collected} collected)")]
    QuotaUnreachable {
        quota: usize,
        episodes: usize,
        collected: usize,
    },

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
