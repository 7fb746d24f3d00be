use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operand had the wrong extent along some dimension.
    #[error("{op}: shape mismatch on {dim}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        dim: String,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid weight file at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("unsupported weight file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error("missing parameter tensor `{0}`")]
    MissingParam(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, dim: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::ShapeMismatch {
            op,
            dim: dim.into(),
            expected,
            actual,
        }
    }

    /// True for errors caused by the filesystem or by unreadable files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Format { .. } | Error::UnsupportedVersion { .. } | Error::Parse { .. }
        )
    }
}
