use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pre-training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate row {row} in masked softmax: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("index error: {0}")]
    Index(String),

    #[error("poisoned gradient in parameter `{name}` at element {index}")]
    PoisonedGradient { name: String, index: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },

    #[error("incompatible checkpoint: field `{field}` is {found}, expected {expected}")]
    Compatibility {
        field: String,
        found: String,
        expected: String,
    },

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },

    #[error("non-finite parameter `{name}` after optimizer step {step}")]
    NonFiniteParam { name: String, step: u64 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("fixture error: {0}")]
    Fixture(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
