use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}: rec={rec}, indep={indep}")]
    NonFiniteLoss { epoch: usize, rec: f64, indep: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown behavior `{behavior}` in record {record}")]
    UnknownBehavior { behavior: String, record: String },
    #[error("no interaction records")]
    EmptyDataset,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("distance correlation needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("checkpoint is missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),
    #[error("invalid file format: {0}")]
    Format(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
