use serde::Serialize;
use styler_core::Error as CoreError;
use thiserror::Error;

/// Error classes of the exit-code contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Plan,
    Numeric,
    Io,
    Reproducibility,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Plan => 3,
            ErrorKind::Numeric => 4,
            ErrorKind::Io | ErrorKind::Reproducibility => 1,
        }
    }
}

#[derive(Debug, Error, Serialize)]
#[error("{kind:?} error: {message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::InvalidPlan(_) | CoreError::OverlappingMasks { .. } => ErrorKind::Plan,
            CoreError::Numeric(_) | CoreError::Divergence { .. } | CoreError::Degenerate(_) => ErrorKind::Numeric,
            CoreError::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Config,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorKind::Io, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(ErrorKind::Io, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Failures while reading inputs are configuration errors, whatever the cause.
pub trait InputContext<T> {
    fn input(self, what: &str) -> CliResult<T>;
}

impl<T, E: Into<CliError>> InputContext<T> for std::result::Result<T, E> {
    fn input(self, what: &str) -> CliResult<T> {
        self.map_err(|e| {
            let e: CliError = e.into();
            let kind = if e.kind == ErrorKind::Io { ErrorKind::Config } else { e.kind };
            CliError::new(kind, format!("{what}: {}", e.message))
        })
    }
}
