use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("zero-length audio: {0}")]
    EmptyAudio(String),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("signal of {len} samples is shorter than one frame of {frame_length}")]
    TooShort { len: usize, frame_length: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("encoder kind mismatch: expected {expected}, got {actual}")]
    KindMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("held-out encoder misuse: {0}")]
    HeldOut(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("malformed encoder file: {0}")]
    Format(String),
    #[error("query budget of {0} oracle calls exhausted")]
    BudgetExhausted(usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than by
    /// a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::UnsupportedFormat(_)
                | Error::EmptyAudio(_)
                | Error::SampleRateMismatch(..)
                | Error::TooShort { .. }
                | Error::ShapeMismatch(_)
                | Error::InvalidConfig(_)
                | Error::KindMismatch { .. }
                | Error::HeldOut(_)
                | Error::Corpus(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
