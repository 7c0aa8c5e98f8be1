//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]. Variants are grouped by the
//! subsystem that raises them so tests can match on the failure class
//! without parsing messages.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that must agree do not.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A rejected argument value (bad config field, out-of-range index,
    /// malformed input data).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An internal precondition was violated by the caller (e.g. backward
    /// from a non-scalar, stepping with gradients from a different model).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An activation arrived at the server with a split index that does not
    /// match the registered partition for that client.
    #[error("split mismatch for client {client}: message says cut {got}, registered cut {expected}")]
    SplitMismatch {
        client: usize,
        got: usize,
        expected: usize,
    },

    /// A message referenced a client id the server has never registered.
    #[error("unknown client {0}: not registered with the server")]
    UnknownClient(usize),

    /// A state-machine transition that the round protocol does not allow.
    #[error("protocol violation for client {client}: {reason}")]
    Protocol { client: usize, reason: String },

    /// Client and server adapter fragments cannot be joined into one set.
    #[error("pairing failed at block {block}: {reason}")]
    Pairing { block: usize, reason: String },

    /// Adapter sets with incompatible structure were averaged, or the
    /// weight vector is degenerate.
    #[error("aggregation failed: {0}")]
    Aggregation(String),

    /// A serialized artifact (checkpoint, preset, config) is malformed.
    #[error("format error in {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
