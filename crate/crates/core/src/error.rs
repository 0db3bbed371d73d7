use thiserror::Error;

use crate::adapt::TraceRecord;
use crate::driver::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty observation batch")]
    EmptyBatch,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("adaptation diverged at step {step}")]
    Diverged {
        step: usize,
        trace: Box<Vec<TraceRecord>>,
    },

    #[error("conjugate gradient breakdown at iteration {iteration}: curvature {curvature:e}")]
    Indefinite { iteration: usize, curvature: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unroll of {steps} steps exceeds the budget of {budget}")]
    UnrollBudget { steps: usize, budget: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("meta step {step}: {source}")]
    MetaStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("meta parameters became non-finite at meta step {step}")]
    NonFiniteMeta {
        step: usize,
        last_good: Box<Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
