use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

use crate::net::ModelBundle;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// The last bundle that finished an epoch with finite losses.
pub struct Checkpoint(pub Box<ModelBundle>);

impl fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Checkpoint({:?})", self.0.stage)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("imbalance factor {factor} leaves class {class} empty; use an imbalance factor below {limit}")]
    EmptyClass {
        factor: f64,
        class: usize,
        limit: f64,
    },

    #[error(
        "dataset classes are not in descending size order (class {class} has {size} > {previous})"
    )]
    NotDescending {
        class: usize,
        size: usize,
        previous: usize,
    },

    #[error("class {0} has no instances")]
    MissingClass(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed record in {path:?} at byte offset {offset}: {reason}")]
    MalformedRecord {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("unknown dataset variant {0:?}")]
    UnknownVariant(String),

    #[error("checksum mismatch for {path:?}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("stage mismatch: expected {expected} bundle, got {found}")]
    Stage {
        expected: &'static str,
        found: &'static str,
    },

    #[error("non-finite {component} at epoch {epoch} of {stage}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        component: String,
        last_good: Option<Checkpoint>,
    },

    #[error("config hash mismatch: {0} vs {1}")]
    HashMismatch(String, String),

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plot rendering failed: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
