use std::path::PathBuf;

/// Errors raised by the deduplication pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv ingestion failed at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("pair `{pair_id}` is at stage {found:?}, expected {expected}")]
    Stage {
        pair_id: String,
        found: crate::preprocess::Stage,
        expected: &'static str,
    },

    #[error("tagger `{tagger}` emitted overlapping spans {first:?} and {second:?}")]
    OverlappingSpans {
        tagger: String,
        first: (usize, usize),
        second: (usize, usize),
    },

    #[error("max_len {requested} cannot hold the mandatory tokens; minimum feasible length is {minimum}")]
    MaxLenTooSmall { requested: usize, minimum: usize },

    #[error("sequence of {found} tokens exceeds max_len {max_len}")]
    SequenceTooLong { found: usize, max_len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("not a probability vector: {0:?}")]
    NotProbability(Vec<f64>),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("unknown pair `{0}`")]
    UnknownPair(String),

    #[error("pair `{0}` is already labeled")]
    AlreadyLabeled(String),

    #[error("label for `{pair_id}` must be 0 or 1, got {label}")]
    InvalidLabel { pair_id: String, label: i64 },

    #[error("empty test set")]
    EmptyTestSet,

    #[error("label oracle timed out waiting for {pending} labels in round {round}")]
    OracleTimeout { round: usize, pending: usize },

    #[error("run is not ready: {0}")]
    NotReady(String),

    #[error("event log is inconsistent: {0}")]
    Replay(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Regex(#[from] regex::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
