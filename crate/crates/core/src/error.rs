use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parameter {index} = {value} outside [{lo}, {hi}]")]
    OutOfBox {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("covariance factorization failed (max jitter {jitter:e}, diag ratio {condition:e})")]
    Factorization { jitter: f64, condition: f64 },

    #[error("simulation produced a non-finite value: {0}")]
    Simulation(String),

    #[error("price {price} violates the {bound} no-arbitrage bound {limit} (K={strike}, T={maturity})")]
    Inversion {
        price: f64,
        bound: &'static str,
        limit: f64,
        strike: f64,
        maturity: f64,
    },

    #[error("implied vol inversion failed at cell ({row}, {col}): {source}")]
    Cell {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("rejection rate {rate:.3} exceeds limit ({rejected} of {attempted} draws): {last}")]
    Rejection {
        rate: f64,
        rejected: usize,
        attempted: usize,
        last: String,
    },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
