use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("config error at line {line}: {key}: {msg}")]
    Config {
        line: usize,
        key: String,
        msg: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("accelerometer magnitude {magnitude:.3} m/s^2 is not stationary (gravity {gravity:.3})")]
    NotStationary { magnitude: f64, gravity: f64 },

    #[error("infeasible ride: {0}")]
    Infeasible(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI and the C interface.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } | Error::InvalidConfig(_) => "config",
            Error::Io { .. } | Error::Data(_) | Error::Checkpoint(_) => "data",
            Error::NonFinite(_) | Error::Numeric(_) => "numeric",
            Error::NotStationary { .. } => "not_stationary",
            Error::Infeasible(_) => "infeasible",
            Error::Shape { .. } | Error::Contract(_) => "contract",
        }
    }

    /// Process exit status: 2 config, 3 data, 4 numeric or internal failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidConfig(_) | Error::Infeasible(_) => 2,
            Error::Io { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::NotStationary { .. } => 3,
            Error::NonFinite(_) | Error::Numeric(_) | Error::Shape { .. } | Error::Contract(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
