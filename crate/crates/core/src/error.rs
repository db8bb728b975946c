use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument or pixel value fell outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A focus position or model query fell outside the calibrated range.
    #[error("range error: {0}")]
    Range(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("conversion error: {0}")]
    Conversion(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("capture failed: {0}")]
    Capture(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Prefixes the message with extra context, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Domain(m) => Error::Domain(format!("{ctx}: {m}")),
            Error::Range(m) => Error::Range(format!("{ctx}: {m}")),
            Error::Shape(m) => Error::Shape(format!("{ctx}: {m}")),
            Error::Calibration(m) => Error::Calibration(format!("{ctx}: {m}")),
            Error::Training(m) => Error::Training(format!("{ctx}: {m}")),
            Error::Conversion(m) => Error::Conversion(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Capture(m) => Error::Capture(format!("{ctx}: {m}")),
            other => other,
        }
    }
}
