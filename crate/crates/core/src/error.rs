use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a WAV file: {0}")]
    NotAWav(String),

    #[error("unsupported channel count {0} (mono only)")]
    UnsupportedChannels(u16),

    #[error("unsupported sample rate {0} Hz (16000 only)")]
    UnsupportedSampleRate(u32),

    #[error("unsupported sample format: {0}")]
    UnsupportedBitDepth(String),

    #[error("input too short: need at least {need} samples, got {got}")]
    InputTooShort { need: usize, got: usize },

    #[error("length {len} is not a multiple of the codec hop {hop}")]
    LengthNotMultipleOfHop { len: usize, hop: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("not a checkpoint file: {0}")]
    BadMagic(PathBuf),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint truncated: {0}")]
    TruncatedFile(String),

    #[error("insufficient input for step {step}: need {need} samples, have {have}")]
    InsufficientInput { step: usize, need: usize, have: usize },

    #[error("utterance too short: need {need} samples, got {got}")]
    UtteranceTooShort { need: usize, got: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<hound::Error> for Error {
    fn from(err: hound::Error) -> Self {
        match err {
            hound::Error::IoError(e) => Error::Io(e),
            hound::Error::Unsupported => Error::UnsupportedBitDepth("unsupported WAV encoding".into()),
            other => Error::NotAWav(other.to_string()),
        }
    }
}
