use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] protostream::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    /// The gradient check ran but exceeded its tolerance.
    #[error("gradient check failed: max relative error {max_rel:e} above {tolerance:e}")]
    GradCheckFailed { max_rel: f64, tolerance: f64 },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 validation, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        use protostream::Error as E;
        match self {
            CliError::Core(E::Numerical { .. }) | CliError::GradCheckFailed { .. } => 2,
            CliError::Core(E::Io(_)) | CliError::Io { .. } => 3,
            CliError::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => 3,
            CliError::Json(e) if e.is_io() => 3,
            _ => 1,
        }
    }
}
