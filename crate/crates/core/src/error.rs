use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot access {}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary input. `field` names the header field or section that failed.
    #[error("format error in {field}: {message}")]
    Format { field: &'static str, message: String },

    /// Malformed text input, with a 1-based line number.
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("no tree fits the budget {budget}; the cheapest tree needs {cheapest}")]
    Infeasible { budget: f64, cheapest: f64 },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("degenerate ranking: {0}")]
    Degenerate(String),

    #[error("missing history: {0}")]
    MissingHistory(String),

    #[error("invalid configuration key `{key}`: {message}")]
    Config { key: String, message: String },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
