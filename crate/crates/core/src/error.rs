use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid token {token} (valid range 0..{limit})")]
    InvalidToken { token: u32, limit: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("posterior denominator {denominator:e} below 1e-30 for z_t = {z}")]
    DegeneratePosterior { z: u32, denominator: f64 },

    #[error("state space of {states} exceeds the enumeration guard of {limit}")]
    StateSpace { states: usize, limit: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
