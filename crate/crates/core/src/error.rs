//! Error type shared by every module.

use thiserror::Error;

use crate::optim::{TrackerRow, Trajectory};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: out-of-range sizes, unknown reps, shape mismatches.
    #[error("configuration error: {0}")]
    Config(String),

    /// An exhaustive computation would exceed its hard cap.
    #[error("resource limit exceeded: {what} (cap {cap})")]
    Resource { what: String, cap: usize },

    /// A structural invariant failed (non-homomorphic action, not a subgroup, ...).
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("not reducible: {0}")]
    NotReducible(String),

    /// Gradient descent produced a non-finite loss.
    #[error("gradient descent diverged at step {step}")]
    Diverged { step: usize, last: Box<TrackerRow> },

    #[error("no convergence: {reason}")]
    NonConvergence {
        reason: String,
        trajectory: Option<Box<Trajectory>>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    /// True for errors caused by user input rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Resource { .. } | Error::Io(_) | Error::Json(_)
        )
    }
}
