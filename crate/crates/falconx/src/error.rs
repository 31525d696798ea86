use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] falconx_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("dataset {}: {}", path.display(), problems.join("; "))]
    Dataset { path: PathBuf, problems: Vec<String> },
    #[error("checkpoint {} at offset {offset}: {message}", path.display())]
    Checkpoint {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error("training halted at step {step}: {message}; batch dumped to {}", dump.display())]
    TrainHalted {
        step: usize,
        message: String,
        dump: PathBuf,
    },
    #[error("gradient check failed for groups: {}", .0.join(", "))]
    GradCheck(Vec<String>),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for invalid input or configuration, 2 for runtime and numeric
    /// failures.
    pub fn exit_code(&self) -> i32 {
        use falconx_core::Error as C;
        match self {
            Error::Config { .. } | Error::Dataset { .. } | Error::Checkpoint { .. } | Error::Usage(_) => 1,
            Error::Io { .. } | Error::TrainHalted { .. } | Error::GradCheck(_) => 2,
            Error::Core(e) => match e {
                C::NonFinite { .. } | C::Factorization(_) | C::NoValidCells | C::Metric(_) => 2,
                _ => 1,
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
