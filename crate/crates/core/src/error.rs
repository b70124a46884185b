use alloc::string::String;

use crate::tensor::Shape;

/// Errors raised anywhere in the search core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("axis {axis} out of range for a rank-{rank} tensor in {op}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("clip rejected: {remaining} frames left after filtering, need at least {min}")]
    ClipRejected { remaining: usize, min: usize },
    #[error("cannot retain {k} spectral components from a {frames}-frame clip")]
    Resolution { frames: usize, k: usize },
    #[error("landmark layout error: {0}")]
    Layout(String),
    #[error("search space of size {size} exceeds the enumeration limit {limit}")]
    Budget { size: u128, limit: u128 },
    #[error("invalid token: {0}")]
    Token(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("missing input for attribute `{0}`")]
    Input(String),
    #[error("fusion conditioning error: {0}")]
    Conditioning(String),
    #[error("factorization error: {0}")]
    Factorization(String),
    #[error("rejected non-finite or negative validation error {0}")]
    InvalidError(f64),
    #[error("stage failed: {0}")]
    StageFailure(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
