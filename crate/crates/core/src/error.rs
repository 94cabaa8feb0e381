use std::path::PathBuf;

/// Errors produced anywhere in the metric synthesis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A user map returned a non-finite value.
    #[error("non-finite evaluation of {what} at c = {abscissa}")]
    Evaluation { what: &'static str, abscissa: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("LMI assembly error: {0}")]
    Assembly(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("solver breakdown: {0}")]
    Solver(String),

    #[error("no feasible metric on the search grid")]
    NoFeasibleMetric,

    #[error("factorization error: {0}")]
    Factorization(String),

    #[error("spectral-normalization certificate error: {0}")]
    Certificate(String),

    /// Non-finite loss; carries the network from the last finite epoch.
    #[error("training diverged at epoch {epoch}")]
    Training { epoch: usize, last_good: Option<Box<crate::nn::SnMlp>> },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
