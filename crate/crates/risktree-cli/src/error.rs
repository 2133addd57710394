//! CLI error classification and the exit-status contract:
//! 0 all asserted residuals within tolerance, 1 residual failure,
//! 2 schema violation, 3 capacity bound.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CliErrorKind {
    Schema,
    Capacity,
    Internal,
}

#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub kind: CliErrorKind,
    pub message: String,
}

impl CliError {
    pub fn schema(message: impl Into<String>) -> Self {
        Self {
            kind: CliErrorKind::Schema,
            message: message.into(),
        }
    }

    pub fn capacity(message: impl Into<String>) -> Self {
        Self {
            kind: CliErrorKind::Capacity,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            kind: CliErrorKind::Internal,
            message: message.into(),
        }
    }

    /// Classify an engine error: capacity bounds keep their own exit code,
    /// everything else surfaces as an internal task failure.
    pub fn from_core(e: risktree::Error) -> Self {
        match e {
            risktree::Error::Capacity { .. } | risktree::Error::EnumerationBound { .. } => {
                Self::capacity(e.to_string())
            }
            other => Self::internal(other.to_string()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            CliErrorKind::Schema => 2,
            CliErrorKind::Capacity => 3,
            CliErrorKind::Internal => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}
