//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A constructor argument violates its documented range.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// A step table ran out before the requested index.
    #[error("step table exhausted at n = {n} (table length {len})")]
    TableExhausted { n: u64, len: usize },

    /// The trajectory left the admissible region (norm above the divergence
    /// threshold, or a non-finite coordinate). Carries the last valid state.
    #[error("trajectory diverged at step {step} (gamma = {gamma:.6e}, |x| = {norm:.6e})")]
    Diverged {
        step: u64,
        gamma: f64,
        norm: f64,
        last_state: Vec<f64>,
    },

    /// A user-supplied callable produced a non-finite value where a finite
    /// one is required to continue.
    #[error("non-finite evaluation in {context}")]
    NonFinite { context: String },

    /// Two measures cannot be merged because their functional registries
    /// disagree.
    #[error("functional registries differ: {details}")]
    RegistryMismatch { details: String },

    /// An operation needs reservoir content but none has been collected.
    #[error("empty reservoir: {context}")]
    EmptyReservoir { context: String },

    /// A quadrature domain does not contain the distribution's mass.
    #[error("quadrature window [{lo}, {hi}] too small: boundary density {boundary:.3e} exceeds 1e-10 * peak {peak:.3e}")]
    WindowTooSmall {
        lo: f64,
        hi: f64,
        boundary: f64,
        peak: f64,
    },

    /// A moment system has no finite solution (non-ergodic regime
    /// mixture or unstable mean reversion).
    #[error("stationary moment system is singular or has no positive solution: {details}")]
    NoStationaryMoments { details: String },

    /// A matrix that must be symmetric positive definite is not.
    #[error("matrix not positive definite in {context} (min eigenvalue {min_eig:.6e})")]
    NotPositiveDefinite { context: String, min_eig: f64 },

    /// Configuration file violates the schema.
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
