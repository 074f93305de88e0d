use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToolError {
    /// Malformed input file; reported with exit code 2.
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    /// A binary file that does not decode.
    #[error("{path}: {source}")]
    Format { path: String, source: apt_core::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] apt_core::Error),
    #[error("{0}")]
    Usage(String),
}

impl ToolError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ToolError::Parse { .. } | ToolError::Format { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ToolError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, ToolError>;

/// `path: message` for a located JSON error, without serde_json's
/// position suffix (inputs are single lines).
pub(crate) fn json_message(e: serde_path_to_error::Error<serde_json::Error>) -> String {
    let path = e.path().to_string();
    let msg = e.into_inner().to_string();
    let msg = match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg,
    };
    if path == "." { msg } else { format!("{path}: {msg}") }
}
