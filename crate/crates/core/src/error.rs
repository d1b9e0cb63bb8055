use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("step {t} out of range [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("non-finite loss {loss} at iteration {iteration} (lr {lr}, t {t:?})")]
    NonFiniteLoss {
        iteration: usize,
        loss: f64,
        lr: f64,
        t: Vec<usize>,
    },

    #[error("dataset validation failed: {}", format_issues(.0))]
    Dataset(Vec<DatasetIssue>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A single problem found while validating a dataset folder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIssue {
    pub path: PathBuf,
    pub message: String,
}

impl std::fmt::Display for DatasetIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.message)
    }
}

fn format_issues(issues: &[DatasetIssue]) -> String {
    let mut s = format!("{} issue(s)", issues.len());
    for issue in issues {
        s.push_str("; ");
        s.push_str(&issue.to_string());
    }
    s
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
