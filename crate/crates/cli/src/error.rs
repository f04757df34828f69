use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}; offending tensors written to {}", dump.display())]
    NonFiniteLoss { step: usize, dump: PathBuf },

    #[error("prediction and annotation ids do not match: {0:?}")]
    UnmatchedIds(Vec<String>),

    #[error(transparent)]
    Core(#[from] m2m_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::NonFiniteLoss { .. } => "non_finite_loss",
            CliError::UnmatchedIds(_) => "unmatched_ids",
            CliError::Core(m2m_core::Error::Checkpoint(_)) => "checkpoint",
            CliError::Core(m2m_core::Error::InvalidAnnotation { .. }) => "annotation",
            CliError::Core(m2m_core::Error::CeilingExceeded { .. }) => "ceiling_exceeded",
            CliError::Core(m2m_core::Error::ShapeMismatch { .. }) => "shape_mismatch",
            CliError::Core(_) => "runtime",
            CliError::Io { .. } => "io",
            CliError::Json(_) => "json",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    /// The single-line JSON object printed on stderr.
    pub fn to_json(&self) -> String {
        let mut detail = json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            CliError::UnmatchedIds(ids) => detail["ids"] = json!(ids),
            CliError::NonFiniteLoss { step, dump } => {
                detail["step"] = json!(step);
                detail["dump"] = json!(dump);
            }
            _ => {}
        }
        json!({ "error": detail }).to_string()
    }
}
