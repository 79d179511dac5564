use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsatisfiable: {0}")]
    Unsatisfiable(String),

    #[error("observation has no target points")]
    EmptyTarget,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("dataset contains a single class")]
    SingleClass,

    #[error("no start configuration found: {0}")]
    NoStart(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("unsupported weight file version {0}")]
    WeightVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
