use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("softmax saturated at class {class} (p = {prob}); unlikelihood gradient undefined")]
    Saturated { class: usize, prob: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("factor `{factor}` never observes class {class} in the training split")]
    UnseenClass { factor: String, class: usize },

    #[error("value {value} outside [{lo}, {hi}) for factor `{factor}`")]
    ValueOutOfRange { factor: String, value: f64, lo: f64, hi: f64 },

    #[error("batch of size {0} cannot be decorrelated (need at least 2)")]
    BatchTooSmall(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss term `{term}` at iteration {iteration}")]
    NonFinite { term: &'static str, iteration: u64 },

    #[error("{path}: wrong IDX magic {found:#010x}, expected {expected:#010x}")]
    WrongMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated IDX file (expected {expected} bytes, found {found})")]
    Truncated { path: PathBuf, expected: usize, found: usize },

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("dataset: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("metric: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Coarse failure category, used by the CLI for exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::UnseenClass { .. } | Error::ValueOutOfRange { .. } => {
                ErrorCategory::Config
            }
            Error::WrongMagic { .. }
            | Error::Truncated { .. }
            | Error::CountMismatch { .. }
            | Error::Data(_) => ErrorCategory::Data,
            Error::Checkpoint(_) | Error::CheckpointVersion { .. } => ErrorCategory::Checkpoint,
            Error::NonFinite { .. } => ErrorCategory::Training,
            Error::Metric(_) => ErrorCategory::Metric,
            Error::Io { .. } => ErrorCategory::Io,
            Error::IndexOutOfRange { .. }
            | Error::InvalidDistribution(_)
            | Error::Saturated { .. }
            | Error::BatchTooSmall(_)
            | Error::Shape(_) => ErrorCategory::Internal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Data,
    Checkpoint,
    Training,
    Metric,
    Internal,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Data => 4,
            ErrorCategory::Checkpoint => 5,
            ErrorCategory::Training => 6,
            ErrorCategory::Metric => 7,
            ErrorCategory::Internal => 70,
        }
    }
}
