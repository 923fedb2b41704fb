use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown prompt id {0}")]
    UnknownPrompt(u32),
    #[error("unknown response id {response} for prompt {prompt}")]
    UnknownResponse { prompt: u32, response: u32 },
    #[error("invalid pair: both sides are response {0}")]
    InvalidPair(u32),
    #[error("invalid choice: {0}")]
    InvalidChoice(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("invalid population: {0}")]
    InvalidPopulation(String),
    #[error("degenerate population: {0}")]
    DegeneratePopulation(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("catalog hash mismatch: dataset has {expected}, catalog hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    Convergence { iterations: usize, grad_norm: f64 },
    #[error("step size too large: loss grew from {initial} to {current}")]
    StepSize { initial: f64, current: f64 },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("rank-deficient design: rank {rank} < dimension {dim}")]
    RankDeficient { rank: usize, dim: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
