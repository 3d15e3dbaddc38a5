use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: row {row}: {message}")]
    Ingestion {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{0}: no rows")]
    NoRows(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sinkhorn did not converge after {iterations} iterations (marginal residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("infeasible transport problem: {0}")]
    Infeasible(String),

    #[error("unsupported instance: {0}")]
    Unsupported(String),

    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("label space already widened for task {0:?}")]
    AlreadyWidened(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("pair ({source_task} -> {target_task}) failed: {cause}")]
    Pair {
        source_task: String,
        target_task: String,
        cause: Box<Error>,
    },

    #[error("{0}: already exists (pass --force to overwrite)")]
    Exists(PathBuf),

    #[error("usage: {0}")]
    Usage(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Internal(String),
}

impl Error {
    /// Stable machine-readable error kind used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Shape(_) => "shape",
            Error::Ingestion { .. } => "ingestion",
            Error::NoRows(_) => "no_rows",
            Error::Io { .. } => "io",
            Error::NotConverged { .. } => "not_converged",
            Error::Infeasible(_) => "infeasible",
            Error::Unsupported(_) => "unsupported",
            Error::Divergence { .. } => "divergence",
            Error::Degenerate(_) => "degenerate",
            Error::AlreadyWidened(_) => "already_widened",
            Error::Config { .. } => "config",
            Error::Pair { .. } => "pair",
            Error::Exists(_) => "exists",
            Error::Usage(_) => "usage",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Internal(_) => "internal",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
