use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read volume {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("volume has {0} slices; full-coverage stacks have 8, 9 or 10")]
    SliceCountOutOfRange(usize),
    #[error("slice {index} is {got:?}, expected {expected:?}")]
    NonUniformSliceShape {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("phantom slice count {0} not in 8..=10")]
    InvalidSliceCount(usize),
    #[error("{0} volumes cannot fill {1} folds")]
    TooFewVolumes(usize, usize),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(
        "loss became non-finite at epoch {epoch}, batch {batch} (last finite loss {last_finite:?})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        last_finite: Option<f64>,
    },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("checkpoint architecture {found} does not match expected {expected}")]
    CheckpointArchMismatch { expected: String, found: String },
    #[error("checkpoint is for {found}, expected {expected}")]
    CheckpointKindMismatch { expected: String, found: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no true positives to explain")]
    EmptyCorpus,
    #[error("length mismatch: {0} labels vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] coverage_nn::NnError),
}

impl Error {
    /// Variant name, for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnreadableFile { .. } => "UnreadableFile",
            Error::SliceCountOutOfRange(_) => "SliceCountOutOfRange",
            Error::NonUniformSliceShape { .. } => "NonUniformSliceShape",
            Error::InvalidSliceCount(_) => "InvalidSliceCount",
            Error::TooFewVolumes(..) => "TooFewVolumes",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::EmptyTrainingSet => "EmptyTrainingSet",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::CheckpointArchMismatch { .. } => "CheckpointArchMismatch",
            Error::CheckpointKindMismatch { .. } => "CheckpointKindMismatch",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::MissingArtifact { .. } => "MissingArtifact",
            Error::Malformed { .. } => "Malformed",
            Error::Io { .. } => "Io",
            Error::Nn(_) => "Nn",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
