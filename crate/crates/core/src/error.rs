use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("coordinate ({row}, {col}) outside {rows}x{cols} grid")]
    Coordinate {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("fit error: {message} (residual {residual:e})")]
    Fit { message: String, residual: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("stream error: {0}")]
    Stream(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn fit(msg: impl Into<String>, residual: f64) -> Self {
        Error::Fit {
            message: msg.into(),
            residual,
        }
    }

    /// True for errors caused by bad user configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Coordinate { .. })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
