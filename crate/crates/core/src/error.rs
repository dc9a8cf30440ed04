use std::path::PathBuf;

use thiserror::Error;

/// Reasons a file on disk failed validation.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("malformed manifest {path}: {detail}")]
    MalformedManifest { path: PathBuf, detail: String },
    #[error("{path}: field `{field}` declares shape {expected:?} but the blob holds {found} values")]
    ShapeMismatch {
        path: PathBuf,
        field: String,
        expected: Vec<usize>,
        found: usize,
    },
    #[error("{path}: blob is truncated ({len} bytes is not a whole number of {width}-byte values)")]
    Truncated { path: PathBuf, len: usize, width: usize },
    #[error("{path}: spec_hash {found} does not match the embedded spec ({expected})")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: non-finite value in `{field}`")]
    NonFinite { path: PathBuf, field: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {context}: {detail}")]
    Shape { context: String, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("exemplar set `{0}` has no labels")]
    MissingLabels(String),
    #[error("training diverged at step {step} (task `{task}`): loss is {loss}")]
    Training { task: String, step: usize, loss: f64 },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 is a bad argument, 3 anything wrong with the inputs (files,
    /// shapes, specs), 4 a numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_)
            | Error::Io { .. }
            | Error::Shape { .. }
            | Error::NonFinite(_)
            | Error::Incompatible(_)
            | Error::InvalidSpec(_)
            | Error::MissingLabels(_) => 3,
            Error::Numerical { .. } | Error::Training { .. } => 4,
            Error::InvalidArgument(_) => 2,
        }
    }
}
