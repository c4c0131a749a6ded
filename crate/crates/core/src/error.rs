use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("distribution has zero total mass")]
    ZeroMass,

    #[error("invalid distribution: {0}")]
    InvalidDist(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("vocabulary mismatch: expected size {expected}, got {actual}")]
    VocabMismatch { expected: usize, actual: usize },

    #[error("corpus contains no tokens")]
    EmptyCorpus,

    #[error("dataset has no examples carrying loss")]
    EmptyDataset,

    #[error("generation produced no tokens")]
    EmptyGeneration,

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("state space exceeds the branch budget of {budget} leaves")]
    StateSpaceTooLarge { budget: u64 },

    #[error("misuse: {0}")]
    Misuse(String),

    #[error("cannot parse {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Parse { what, detail: detail.into() }
    }
}
