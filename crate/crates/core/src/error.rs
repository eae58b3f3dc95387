use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("invalid compositional spec: {0}")]
    InvalidSpec(String),

    #[error("unknown category `{category}` in group `{group}`")]
    UnknownCategory { group: String, category: String },

    #[error("empty donor pool")]
    EmptyDonorPool,

    #[error("singular regression design (condition number {condition:.3e})")]
    Singular { condition: f64 },

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    /// The inner simplex solver ran out of iterations; `best` is the last feasible iterate.
    #[error("solver did not converge after {iterations} iterations (gap {gap:.3e})")]
    NonConvergence { iterations: usize, gap: f64, best: Vec<f64> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("parse error at line {line}, column `{column}`: {message}")]
    Parse { line: usize, column: String, message: String },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
