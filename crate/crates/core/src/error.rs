use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ground-truth attributes required for {0}")]
    MissingAttributes(&'static str),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("degenerate scenario: {0}")]
    DegenerateScenario(String),

    #[error("domain too large: {0}")]
    DomainTooLarge(String),

    #[error("empty snapshot list")]
    NoSnapshots,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation problems (bad input) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Diverged { .. } | Error::Io(_))
    }
}
