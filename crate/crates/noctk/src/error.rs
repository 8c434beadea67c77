use std::path::PathBuf;

/// Toolkit-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Analytical-model failure, e.g. a cyclic link dependency graph.
    #[error("model error: {0}")]
    Model(String),

    /// A routing table lookup had no entry for a reachable destination.
    #[error("routing fault at router {router}: {msg}")]
    Routing { router: usize, msg: String },

    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Persisted artifact has an incompatible version or feature layout.
    #[error("version mismatch: {0}")]
    Version(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code per the CLI contract: 0 ok, 2 config error, 3 saturation-only.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Version(_) => 2,
            _ => 1,
        }
    }
}
