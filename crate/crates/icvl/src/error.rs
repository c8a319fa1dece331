//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, IcvlError>;

#[derive(Debug, Error)]
pub enum IcvlError {
    /// Two operands (or an operand and a parameter) disagree on dimensions.
    #[error("shape mismatch in {context}: {left_rows}x{left_dims} vs {right_rows}x{right_dims}")]
    Shape {
        context: &'static str,
        left_rows: usize,
        left_dims: usize,
        right_rows: usize,
        right_dims: usize,
    },

    /// Invalid configuration value (bad dimensions, out-of-range knobs, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid data fed to an otherwise well-configured operation.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced or encountered a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Model output could not be parsed into any candidate; carries the raw text.
    #[error("parse error: {message}")]
    Parse { message: String, raw_text: String },

    /// A peer violated the wire protocol (empty response, bad framing, unknown id).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An external client failed permanently; `partial` holds whatever
    /// per-frame intentions were collected before the failure.
    #[error("transport error: {message}")]
    Transport {
        message: String,
        partial: Vec<(crate::intention::FrameRef, String)>,
    },

    /// Malformed ICVLMAT container or archive manifest.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl IcvlError {
    pub fn shape(
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    ) -> Self {
        IcvlError::Shape {
            context,
            left_rows: left.0,
            left_dims: left.1,
            right_rows: right.0,
            right_dims: right.1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        IcvlError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        IcvlError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        IcvlError::Numeric(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        IcvlError::Protocol(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        IcvlError::Format(msg.into())
    }

    /// Short machine-readable kind tag, used by the CLI's `--json-errors` output.
    pub fn kind(&self) -> &'static str {
        match self {
            IcvlError::Shape { .. } => "shape",
            IcvlError::Config(_) => "config",
            IcvlError::Data(_) => "data",
            IcvlError::Numeric(_) => "numeric",
            IcvlError::Parse { .. } => "parse",
            IcvlError::Protocol(_) => "protocol",
            IcvlError::Transport { .. } => "transport",
            IcvlError::Format(_) => "format",
            IcvlError::Io(_) => "io",
            IcvlError::Json(_) => "json",
        }
    }
}
