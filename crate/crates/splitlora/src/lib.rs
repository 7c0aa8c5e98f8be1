//! Split federated fine-tuning of a shared transformer with per-client
//! low-rank adapters.
//!
//! The crate simulates a deployment where several resource-constrained
//! clients each train the first few blocks of a transformer locally while a
//! single server executes the remaining blocks for all of them against one
//! shared frozen base model, keeping a separate low-rank adapter set per
//! client. Everything runs on a deterministic simulated clock; no real
//! network or GPU is involved.
//!
//! Module map:
//! - [`tensor`]: dense `f64` tensors and a reverse-mode autodiff tape.
//! - [`model`]: transformer encoder with low-rank adapters, split and
//!   monolithic forward/backward, checkpointing.
//! - [`data`]: synthetic classification corpus and non-IID sharding.
//! - [`sched`]: single-machine scheduling of per-client server work.
//! - [`aggregate`]: pairing, federated averaging, and redistribution of
//!   adapter sets.
//! - [`cost`]: analytical compute/communication/memory model and scheme
//!   comparison.
//! - [`protocol`]: the round state machine tying all of it together.

pub mod aggregate;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod protocol;
pub mod sched;
pub mod tensor;

pub use error::{Error, Result};
