use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("bad magic: expected `ZQH1`")]
    BadMagic,

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("manifest mismatch: {0}")]
    Manifest(String),

    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),

    #[error("missing calibration sites: {}", .0.join(", "))]
    MissingSites(Vec<String>),

    #[error("no calibration data")]
    NoCalibrationData,

    #[error("unknown mode `{0}` (expected FP32, M1, M2, M3 or a JSON mode file)")]
    UnknownMode(String),

    #[error("unknown op kind `{0}`")]
    UnknownOpKind(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// An internal consistency check failed. Never caused by bad user input.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
