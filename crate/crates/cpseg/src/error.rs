use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure contracts of the
/// individual subsystems so callers (and tests) can match on the cause.
#[derive(Debug, Error)]
pub enum CpSegError {
    #[error("dimension mismatch: {op} got shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("label {label} out of range at index {index} (num classes {num_classes})")]
    Label {
        label: usize,
        index: usize,
        num_classes: usize,
    },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("empty prompt after normalization")]
    EmptyPrompt,

    #[error("config error: {0}")]
    Config(String),

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl CpSegError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CpSegError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CpSegError>;
