use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("non-finite gradient or update for parameter {0}")]
    NonFiniteGradient(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("cannot split: {0}")]
    Split(String),
    #[error("cannot rescale: {0}")]
    Rescale(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sampler diverged: {0}")]
    SamplerDiverged(String),
    #[error("nothing to evaluate")]
    EmptyEval,
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
