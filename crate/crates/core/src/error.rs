use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("arity mismatch: network expects {expected} agents, got {actual}")]
    Arity { expected: usize, actual: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("regression did not converge: held-out mse {loss:.5} above {threshold}")]
    NotConverged { loss: f64, threshold: f64 },

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) | Error::Arity { .. } | Error::Io { .. } => "data",
            Error::Divergence(_) | Error::NotConverged { .. } => "divergence",
        }
    }
}
