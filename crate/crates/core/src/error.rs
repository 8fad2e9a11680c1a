use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("validation failed for video `{video}`: {detail}")]
    Validation { video: String, detail: String },

    #[error("event ordering violated in video `{video}`: start {start_s} >= end {end_s}")]
    Ordering { video: String, start_s: f64, end_s: f64 },

    #[error("duplicate video id `{0}`")]
    DuplicateVideo(String),

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("overlap rate undefined: video `{0}` has no events")]
    UndefinedRate(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("audio/visual misalignment for `{video}`: {detail}")]
    Alignment { video: String, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("degenerate regression target ({0}, {1})")]
    DegenerateTarget(f64, f64),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: cls={cls}, reg={reg}")]
    NonFiniteLoss { epoch: usize, batch: usize, cls: f64, reg: f64 },

    #[error("unknown video `{0}` in predictions")]
    UnknownVideo(String),

    #[error("configuration error for `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
