use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header {path}: {msg}")]
    MalformedHeader { path: PathBuf, msg: String },
    #[error("unsupported WFDB format code {0} (only format 16 is supported)")]
    UnsupportedFormat(String),
    #[error("signal length mismatch: header declares {expected} samples, file holds {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("age {0} outside the supported range 18..=92")]
    AgeOutOfRange(f64),
    #[error("duplicate record id {0}")]
    DuplicateRecord(String),
    #[error("resampling {from} Hz to {to} Hz needs an integer decimation ratio")]
    NonIntegerRatio { from: u32, to: u32 },
    #[error("all samples are non-finite")]
    AllMissing,
    #[error("flat signal")]
    FlatSignal,
    #[error("record too short: {0}")]
    TooShort(String),
    #[error("fewer than two R-peaks found")]
    TooFewPeaks,
    #[error("no beat window fits inside the signal")]
    NoBeatFits,
    #[error("age group {0} missing from trend specification")]
    MissingGroup(usize),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("feature layout mismatch: {0}")]
    FeatureLayout(String),
    #[error("class id {class} out of range (model has {n_classes} classes)")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("no class has both positive and negative samples")]
    NoScorableClass,
    #[error("bootstrap gave up after {0} redraws of an undefined resample")]
    RetryCapExceeded(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
