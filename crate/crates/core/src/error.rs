use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("non-finite value {value} at tape node {node} ({op})")]
    NonFinite { node: usize, op: String, value: f64 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("no convergence after {iterations} iterations (last deviance {deviance})")]
    Convergence { iterations: usize, deviance: f64 },

    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        snapshot: Box<crate::checkpoint::ParamSnapshot>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
