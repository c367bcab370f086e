use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A precondition of the called operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// The input configuration does not determine a unique solution.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    /// Robust estimation did not produce a usable model.
    #[error("estimation failed: {0}")]
    EstimationFailed(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// `trace` holds the losses recorded up to and including `step`.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64, trace: Vec<f64> },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
