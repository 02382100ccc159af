use alloc::string::String;

/// Errors raised while configuring or running the swarm.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("Riccati iteration for {model} did not converge after {iterations} iterations")]
    NoConvergence { model: String, iterations: usize },

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("singular linear system: {0}")]
    Singular(&'static str),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(alloc::format!($($arg)*))
    };
}
pub(crate) use config_err;
