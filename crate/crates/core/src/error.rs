use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: column `{column}` not found in header")]
    MissingColumn { column: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("estimand undefined: {0}")]
    EstimandUndefined(String),

    #[error("feature error: {0}")]
    Feature(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate clusters present ({count}); run filter_degenerate_clusters with drop-both first")]
    DegenerateClusters { count: usize },

    #[error("balance constraints infeasible (least-squares residual {residual:.3e}); worst coordinate violations: {violations:?}")]
    Infeasible { residual: f64, violations: Vec<f64> },

    #[error("logistic fit diverged (complete separation suspected); increase the penalty: {0}")]
    Separation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
