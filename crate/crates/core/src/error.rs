use thiserror::Error;

/// Errors produced by the timecast library.
#[derive(Debug, Error)]
pub enum TimecastError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("tick {tick} out of range 1..{event_time} for remaining-time label")]
    TickOutOfRange { tick: usize, event_time: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error(
        "ADMM did not converge after {iterations} iterations \
         (primal residual {primal_residual:.3e}, dual residual {dual_residual:.3e})"
    )]
    NotConverged {
        iterations: usize,
        primal_residual: f64,
        dual_residual: f64,
    },

    #[error("degenerate stage: {0}")]
    DegenerateStage(String),

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("data error in instance `{instance}` at row {row}: {message}")]
    Data {
        instance: String,
        row: usize,
        message: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TimecastError> = std::result::Result<T, E>;
