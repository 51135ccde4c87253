use thiserror::Error;

use crate::lattice::Site;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported dimension {0} (supported: 1..={max})", max = crate::lattice::MAX_DIM)]
    UnsupportedDimension(usize),

    #[error("invalid perturbation table: {0}")]
    InvalidTable(String),

    /// A table violates rate positivity; the fingerprint identifies the configuration.
    #[error("rate-positivity violation: flip rate {rate} at site {site} (configuration fingerprint {fingerprint:016x})")]
    NegativeRate { site: Site, rate: f64, fingerprint: u64 },

    #[error("event budget of {budget} events exceeded at time {time}")]
    BudgetExceeded { budget: u64, time: f64 },

    #[error("coupling domination violated at site {site} (time {time})")]
    DominationViolation { site: Site, time: f64 },

    #[error("missing coalescing estimates for {} set(s): {}", .0.len(), format_sets(.0))]
    MissingSigma(Vec<Vec<Site>>),

    #[error("truncated event log: {0}")]
    TruncatedLog(String),

    #[error("unsupported test function: {0}")]
    UnsupportedTestFn(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_sets(sets: &[Vec<Site>]) -> String {
    sets.iter()
        .map(|s| {
            let inner: Vec<String> = s.iter().map(|x| x.to_string()).collect();
            format!("{{{}}}", inner.join(","))
        })
        .collect::<Vec<_>>()
        .join(" ")
}
