use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, ranges or configuration values that violate an operation's
    /// preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("iterative reconstruction diverged at iteration {iteration} (step size {step_size:e})")]
    Diverged { step_size: f64, iteration: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("latent optimization produced a non-finite loss at iteration {iteration}")]
    LatentDiverged { iteration: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::InvalidInput(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
