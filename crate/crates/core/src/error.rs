use std::path::PathBuf;

use thiserror::Error;

/// Every error carries a stable, machine-parsable code (see [`Error::code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("input too short for {op}: length {len}, minimum {min}")]
    TooShort {
        op: &'static str,
        len: usize,
        min: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("model has no prediction head for layer {0}")]
    MissingHead(usize),

    #[error("non-finite loss at step {step}: l_feat={l_feat} l_hint={l_hint}")]
    NonFiniteLoss {
        step: usize,
        l_feat: f64,
        l_hint: f64,
    },

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::InvalidArgument { .. } => "E_ARG",
            Error::TooShort { .. } => "E_TOO_SHORT",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::Backward(_) => "E_BACKWARD",
            Error::Config(_) => "E_CONFIG",
            Error::UnknownPreset(_) => "E_PRESET",
            Error::MissingHead(_) => "E_HEAD",
            Error::NonFiniteLoss { .. } => "E_LOSS",
            Error::UnsupportedFormat(_) => "E_FORMAT",
            Error::Checkpoint(_) => "E_CKPT",
            Error::Checksum { .. } => "E_CHECKSUM",
            Error::Io { .. } => "E_IO",
            Error::Parse(_) => "E_PARSE",
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn arg(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
