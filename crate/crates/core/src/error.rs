use std::path::PathBuf;

/// Errors raised anywhere in the compression toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate routing trace: {0}")]
    DegenerateTrace(String),

    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),

    #[error("infeasible compression ratio: {0}")]
    InfeasibleRatio(String),

    #[error("svd of {matrix} did not converge after {sweeps} sweeps")]
    NoConvergence { matrix: String, sweeps: usize },

    #[error("training diverged at step {step} (learning rate {learning_rate}){context}")]
    Divergence {
        step: usize,
        learning_rate: f64,
        context: String,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("integrity check failed for tensor {tensor}: {message}")]
    Integrity { tensor: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable machine-readable identifier for the error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::DegenerateTrace(_) => "degenerate_trace",
            Error::DegenerateMatrix(_) => "degenerate_matrix",
            Error::InfeasibleRatio(_) => "infeasible_ratio",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Divergence { .. } => "divergence",
            Error::Format { .. } => "format",
            Error::Integrity { .. } => "integrity",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Append location context (layer, kind, group) to errors that carry a
    /// free-form description.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Divergence {
                step,
                learning_rate,
                context,
            } => Error::Divergence {
                step,
                learning_rate,
                context: format!("{context} [{ctx}]"),
            },
            Error::NoConvergence { matrix, sweeps } => Error::NoConvergence {
                matrix: format!("{matrix} [{ctx}]"),
                sweeps,
            },
            Error::DegenerateMatrix(m) => Error::DegenerateMatrix(format!("{m} [{ctx}]")),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
