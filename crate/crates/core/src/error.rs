use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing ground-truth mask for defect image(s): {}", list_paths(.0))]
    MissingMask(Vec<PathBuf>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("encoder error: {0}")]
    Encoder(String),

    #[error("missing predictions for {} image(s): {}", .0.len(), list_paths(.0))]
    MissingPredictions(Vec<PathBuf>),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn list_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
