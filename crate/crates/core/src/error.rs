use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),

    #[error("degenerate 6D rotation at joint {joint}: {detail}")]
    DegenerateRotation { joint: usize, detail: &'static str },

    #[error("unknown scene template `{0}`")]
    UnknownTemplate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no visible keypoints")]
    NoVisibleKeypoints,

    #[error("dimension mismatch at joint {joint}, field `{field}`: expected {expected}, got {got}")]
    ConditionDim {
        joint: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("timestep {t} outside 0..={max}")]
    TimestepRange { t: usize, max: usize },

    #[error("non-finite value in sampling loop at step {step}")]
    SamplingNonFinite { step: usize },

    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: &'static str },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
