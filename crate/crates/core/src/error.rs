use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty softmax support")]
    EmptySoftmaxSupport,
    #[error("degenerate vector")]
    DegenerateVector,
    #[error("non-finite objective")]
    NonFiniteObjective,
    #[error("divergent chain")]
    DivergentChain,
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("unrecognized format")]
    UnrecognizedFormat,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("non-finite embedding at pair_id {0}")]
    NonFiniteEmbedding(String),
    #[error("zero-norm embedding at pair_id {0}")]
    ZeroNormEmbedding(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("no queries")]
    NoQueries,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input data rather than numerics or usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::UnrecognizedFormat
                | Error::UnsupportedVersion(_)
                | Error::Truncated(_)
                | Error::NonFiniteEmbedding(_)
                | Error::ZeroNormEmbedding(_)
                | Error::InvalidDataset(_)
                | Error::ManifestMismatch(_)
                | Error::NoQueries
                | Error::Io(_)
                | Error::Json(_)
                | Error::Checkpoint(_)
        )
    }

    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::DivergentChain | Error::Divergence(_) | Error::NonFiniteObjective
        )
    }
}
