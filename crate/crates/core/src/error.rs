use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("non-finite input in {context}")]
    NonFinite { context: &'static str },

    #[error("sample size {requested} exceeds population {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("budget exceeded: need {needed} but total is {total}")]
    BudgetExceeded { needed: usize, total: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("target class {target} out of range 0..={max}")]
    TargetOutOfRange { target: usize, max: usize },

    #[error("numeric overflow in {context}")]
    NumericOverflow { context: &'static str },

    #[error("infeasible packing: could not place instance {instance} after {retries} retries")]
    InfeasiblePacking { instance: usize, retries: usize },

    #[error("training diverged at step {step}: loss is not finite ({detail})")]
    Divergence { step: usize, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
