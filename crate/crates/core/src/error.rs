//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a model invariant.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A stock, regime, or distress-state index is out of range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// Vector lengths do not match the configured dimensions.
    #[error("length mismatch: expected {expected}, got {got} ({context})")]
    LengthMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    /// An operation that requires a live stock was applied to a distressed one.
    #[error("stock {0} is already distressed")]
    AlreadyDistressed(usize),

    /// A coordinate left the probability simplex by more than the allowed
    /// tolerance, which means the integration step was too large.
    #[error("filter left the simplex at t={t}: coordinate {k} = {value}")]
    FilterDiverged { t: f64, k: usize, value: f64 },

    /// The PDE stepper produced a non-finite value.
    #[error("non-finite value in state {state} at time level {time_level}, node {node}")]
    NonFinite {
        state: String,
        time_level: usize,
        node: usize,
    },

    /// A simulated wealth path left the positive half-line; log-Euler keeps
    /// wealth positive exactly, so this only fires on numerical overflow.
    #[error("wealth became non-positive on path {path} at t = {t}")]
    WealthNonPositive { path: u64, t: f64 },

    /// A required child surface is missing from the recursion.
    #[error("missing child surface for state {0}")]
    MissingChild(String),

    /// A solved surface escaped its a-priori enclosure, which signals a
    /// defective solve rather than a legitimate parameter set.
    #[error("state {state}: value {value} outside [{lower}, {upper}]")]
    BoundViolation {
        state: String,
        value: f64,
        lower: f64,
        upper: f64,
    },

    /// The spatial stepper only handles a two-regime chain.
    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    /// Stocks declared homogeneous have differing coefficient tables.
    #[error("group {group} is not homogeneous: {detail}")]
    InhomogeneousGroup { group: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
