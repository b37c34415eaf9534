use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("no registered op named `{0}`")]
    UnknownOp(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty pyramid: every level is smaller than the {h}x{w} patch window")]
    EmptyPyramid { h: usize, w: usize },

    #[error("empty patch set")]
    EmptyPatchSet,

    #[error("degenerate (zero-norm) vector in cosine similarity")]
    DegenerateVector,

    #[error("label vector has {0}")]
    Labels(String),

    #[error("unknown label `{name}`; available labels: {available:?}")]
    UnknownLabel { name: String, available: Vec<String> },

    #[error("missing image file {0}")]
    MissingImage(PathBuf),

    #[error("training diverged at step {step} (non-finite loss); last good checkpoint: {last_checkpoint:?}")]
    Diverged {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
