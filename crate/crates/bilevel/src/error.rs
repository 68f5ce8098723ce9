use thiserror::Error;

/// Errors reported by solvers, model fits and the problem catalog.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} values for {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("not enough samples to fit a {model} in {dim} variables: need {needed}, got {got}")]
    InsufficientData {
        model: &'static str,
        dim: usize,
        needed: usize,
        got: usize,
    },

    #[error("unknown problem `{name}`; available: {catalog}")]
    UnknownProblem { name: String, catalog: String },

    #[error("invalid dimension settings: {0}")]
    InvalidDims(String),

    #[error("tournament pool must have even size, got {0}")]
    OddPoolSize(usize),

    #[error("crossover needs three parents, got {0}")]
    NotEnoughParents(usize),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("no feasible starting pair found for `{problem}` within the retry and repair budget")]
    NoFeasibleStart { problem: String },
}

pub type Result<T> = std::result::Result<T, Error>;
