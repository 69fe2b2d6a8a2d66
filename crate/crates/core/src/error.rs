use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("degenerate vector")]
    DegenerateVector,

    #[error("token has no attention targets (row {0})")]
    NoAttentionTargets(usize),

    #[error("backward requires scalar loss")]
    NonScalarLoss,

    #[error("augmented branch requires visual prompts")]
    NoVisualPrompts,

    #[error("diverged: loss is {0}")]
    Diverged(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("dataset has no ground-truth masks")]
    MissingMasks,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error comes from user-supplied configuration rather than a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidArgument(_) | Error::Parse(_) | Error::UnknownWord(_)
        )
    }
}
