use thiserror::Error;

/// Errors surfaced by the library. CLI exit codes map `Config`-class errors
/// to 2 and everything else to 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error at {location}: {message}")]
    Ingest { location: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("CTC target infeasible: target needs at least {required} frames, got {available}")]
    CtcInfeasible { required: usize, available: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("training diverged at step {step}: {component} is non-finite")]
    Diverged { step: u64, component: String },

    #[error("gradient partition violated at step {step}: {detail}")]
    PartitionViolated { step: u64, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
