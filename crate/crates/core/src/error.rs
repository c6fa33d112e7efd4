use std::path::PathBuf;

/// Errors produced by the body schema toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("control solve failed at iteration {iteration}: non-finite loss")]
    SolveFailure { iteration: usize },

    #[error("simulation fault at t={time:.4}s: {reason}")]
    SimulationFault { time: f64, reason: String },

    #[error("collection fault: only {converged} of {attempted} samples converged")]
    CollectionFault { converged: usize, attempted: usize },

    #[error("evaluation fault: {failed} of {total} targets failed")]
    EvaluationFault { failed: usize, total: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from bad user input (config, shapes, files)
    /// as opposed to a fault during a run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Shape { .. } | Error::Parse { .. } | Error::Io { .. }
        )
    }
}
