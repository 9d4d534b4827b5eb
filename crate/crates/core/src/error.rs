use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: empty tensor")]
    EmptyTensor { op: &'static str },

    #[error("backward: loss must have shape (1,1,1,1), got {0}")]
    NotScalar(String),

    #[error("backward: tape already consumed")]
    TapeConsumed,

    #[error("backward: {0}")]
    ForeignParameter(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("parameter store is frozen")]
    Frozen,

    #[error(
        "teacher network needs a parsing map: pass one-hot planes of shape (n, {n_classes}, H, W) \
         aligned with the high-resolution target"
    )]
    ParsingRequired { n_classes: usize },

    #[error("teacher must be frozen before distillation")]
    TeacherNotFrozen,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("{path}: label {label} at (x={x}, y={y}) is out of range for {n_classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        x: usize,
        y: usize,
        label: u8,
        n_classes: usize,
    },

    #[error("dataset: missing {kind} file for stem `{stem}`")]
    MissingPair { stem: String, kind: &'static str },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: not a PKDN checkpoint (bad magic)")]
    BadMagic,

    #[error("checkpoint: unsupported format version `{0}`")]
    UnknownVersion(String),

    #[error("checkpoint: truncated ({0})")]
    Truncated(String),

    #[error("checkpoint: config mismatch in `{field}` (file has {file}, expected {expected})")]
    ConfigMismatch {
        field: String,
        file: String,
        expected: String,
    },

    #[error("checkpoint: malformed header: {0}")]
    MalformedHeader(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            dim,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. }
        )
    }
}
