use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed mask: value {value} at (row {row}, col {col}) is neither a class index nor the ignore value")]
    MalformedMask { value: u32, row: usize, col: usize },

    #[error(
        "infeasible scribble budget: {budget_pixels} pixel(s) available but {required} class(es) need a labeled pixel"
    )]
    InfeasibleBudget { budget_pixels: usize, required: usize },

    #[error("insufficient data: class {class} has {available} example(s), {requested} requested")]
    InsufficientData {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("empty supervision: mask has no labeled pixel")]
    EmptySupervision,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("divergence: non-finite gradient in `{param}`")]
    Divergence { param: String },

    #[error("transfer error: {reason}: {}", names.join(", "))]
    Transfer { reason: String, names: Vec<String> },

    #[error("unknown backbone preset `{0}`")]
    UnknownPreset(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("manifest error in {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
