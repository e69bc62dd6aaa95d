use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Scenario or model configuration is inconsistent. `field` names the
    /// offending configuration key.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Barrier gradient vanishes because two centers coincide.
    #[error("degenerate barrier gradient: centers of {pair} coincide")]
    DegenerateGradient { pair: String },

    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The scenario document is not valid JSON or does not match the schema.
    #[error("malformed scenario: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
