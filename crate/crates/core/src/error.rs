use std::path::PathBuf;

use ndcore::NdError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] NdError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{context}: {source}")]
    Json { context: String, source: serde_json::Error },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0} is not divisible by {1}")]
    Divisibility(String, usize),

    #[error("parameter `{0}` is permanently frozen and cannot be made trainable")]
    FrozenViolation(String),

    #[error("{what} {index} out of range (limit {limit})")]
    Range { what: &'static str, index: usize, limit: usize },

    #[error("invalid box track: {0}")]
    InvalidTrack(String),

    #[error("{count} tracks exceed the limit of {limit} trajectory tokens")]
    TooManyTracks { count: usize, limit: usize },

    #[error("{0}: empty sequence")]
    EmptySequence(&'static str),

    #[error("unknown verb `{0}`")]
    UnknownVerb(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("unknown triplet `{0}`")]
    UnknownTriplet(String),

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("labels must be binary, found {0}")]
    NonBinaryLabel(f64),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("stage 2 needs a stage-1 checkpoint (pass cold start to override)")]
    StageOrder,

    #[error("data does not match the model vocabulary: {0}")]
    VocabularyMismatch(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("generator: {0}")]
    Generator(String),

    #[error("infeasible dataset balance: {0}")]
    Infeasible(String),

    #[error("dataset: {0}")]
    Dataset(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
}
