use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes. The CLI maps each one to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCategory {
    Config,
    Registry,
    Dataset,
    Artifact,
    Shape,
    Precondition,
    Numerical,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Registry => "registry",
            ErrorCategory::Dataset => "dataset",
            ErrorCategory::Artifact => "artifact",
            ErrorCategory::Shape => "shape",
            ErrorCategory::Precondition => "precondition",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 3,
            ErrorCategory::Registry => 4,
            ErrorCategory::Dataset => 5,
            ErrorCategory::Artifact => 6,
            ErrorCategory::Shape => 7,
            ErrorCategory::Precondition => 8,
            ErrorCategory::Numerical => 9,
            ErrorCategory::Io => 10,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("pretrained weights for {backbone} not available: {reason}")]
    WeightsUnavailable { backbone: String, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("insufficient samples for test case {case_id}: {deficit}")]
    InsufficientSamples { case_id: u8, deficit: String },

    #[error("model artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("window at ({x}, {y}): {source}")]
    Window {
        x: usize,
        y: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("chart rendering: {0}")]
    Chart(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::UnknownBackbone(_) | Error::WeightsUnavailable { .. } => ErrorCategory::Registry,
            Error::Dataset(_) | Error::InsufficientSamples { .. } | Error::Image { .. } => {
                ErrorCategory::Dataset
            }
            Error::Artifact { .. } => ErrorCategory::Artifact,
            Error::Shape(_) => ErrorCategory::Shape,
            Error::Precondition(_) => ErrorCategory::Precondition,
            Error::NonFiniteLoss { .. } => ErrorCategory::Numerical,
            Error::Window { source, .. } => source.category(),
            Error::Io { .. } | Error::Json(_) | Error::Csv(_) | Error::Chart(_) => ErrorCategory::Io,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn artifact(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
