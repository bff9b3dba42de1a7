use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate vector: zero norm")]
    DegenerateVector,
    #[error("collapsed embedding: encoder output has zero norm")]
    CollapsedEmbedding,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{0} of an empty input")]
    EmptyInput(&'static str),
    #[error("loss is not a node of this tape")]
    NotOnTape,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty prototype memory")]
    EmptyMemory,
    #[error("episode {episode}, frame {frame} has no label but the protocol requires one")]
    MissingLabel { episode: usize, frame: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("numerical failure at episode {episode}: {message}")]
    Numerical { episode: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
