use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad or missing configuration value. `key` is the dotted path into the
    /// scenario document, e.g. `model.top_k`.
    #[error("{key}: {message}")]
    Config { key: String, message: String },

    /// The workload cannot run on the configured resources.
    #[error("workload infeasible: {0}")]
    Infeasible(String),

    /// A formula was evaluated outside its domain.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("profiler fit failed: {0}")]
    Fit(String),

    /// Trace file parse error. `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Trace {
        path: String,
        line: u64,
        message: String,
    },

    /// Broken internal invariant; always a bug.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
