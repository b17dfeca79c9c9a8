use thiserror::Error;

/// Error type shared across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dependency error: run stage `{stage}` first ({detail})")]
    Dependency { stage: String, detail: String },
    #[error("selection error: {0}")]
    Selection(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("generation backend error: {0}")]
    Backend(String),
    #[error("partial generation: completed groups {completed:?}, failed on {failed}: {detail}")]
    PartialGeneration {
        completed: Vec<String>,
        failed: String,
        detail: String,
    },
    #[error("divisibility error: M={m} not divisible by k_D={k}; nearest feasible M is {suggested}")]
    Divisibility { m: usize, k: usize, suggested: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 dependency, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::Parse(_) => 2,
            Error::Dependency { .. } => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}
