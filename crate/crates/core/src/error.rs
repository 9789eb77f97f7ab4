use std::io;

use thiserror::Error;

/// Errors raised by the simulation, optimization and learning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("singular DAE system (pivot {pivot:.3e} in column {column})")]
    SingularSystem { column: usize, pivot: f64 },

    #[error("simulation diverged at substep {substep}: |{field}| = {value:e}")]
    Unstable {
        substep: usize,
        field: &'static str,
        value: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("episode already finished; call reset before stepping")]
    EpisodeDone,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("backward called before forward")]
    NoForwardCache,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite {what} at update {update}")]
    NonFiniteLoss { what: &'static str, update: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics (divergence, singularity, NaN losses).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularSystem { .. } | Error::Unstable { .. } | Error::NonFiniteLoss { .. }
        )
    }
}
