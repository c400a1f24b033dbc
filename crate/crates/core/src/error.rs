use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// Shape mismatches inside tensor kernels are programming errors and panic
/// instead of surfacing here.
#[derive(Debug, Error)]
pub enum TkgError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown {kind} '{name}' (closest: {})", suggestions.join(", "))]
    Lookup {
        kind: &'static str,
        name: String,
        suggestions: Vec<String>,
    },

    #[error("training diverged: non-finite loss at bucket {bucket}")]
    Divergence { bucket: usize },

    #[error("{measure} centrality did not converge after {iterations} iterations")]
    NonConvergence {
        measure: &'static str,
        iterations: usize,
    },

    #[error("missing price for {ticker} on {date}")]
    MissingPrice { ticker: String, date: String },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TkgError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TkgError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = TkgError> = std::result::Result<T, E>;
