use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("runaway dynamics: more than {0} collisions")]
    Runaway(usize),

    /// The point lies in a null set (grazing contact, simultaneous events).
    /// Callers working almost everywhere should resample.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("density too concentrated: acceptance rate {rate:e} over {trials} trials")]
    DensityTooConcentrated { rate: f64, trials: u64 },

    #[error("ill-conditioned: {0}")]
    IllConditioned(String),

    #[error("unreliable oracle: {failed} of {probes} probes failed")]
    UnreliableOracle { failed: usize, probes: usize },

    #[error("time {0} is not a stored output time")]
    NotStored(f64),

    #[error("level {level} exceeds the level cap {cap}")]
    LevelCap { level: usize, cap: usize },

    #[error("integer overflow in exact accumulation")]
    Overflow,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    /// True for errors that mark a probe point as lying in a null set.
    pub fn is_degenerate(&self) -> bool {
        matches!(self, Error::Degenerate(_) | Error::Runaway(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
