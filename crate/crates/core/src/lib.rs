//! Vertical federated continual learning with evolving class prototypes.
//!
//! Passive parties hold disjoint feature columns and run local models whose
//! embeddings are summed at the active party, which holds the labels and a
//! server model. Across a sequence of class- or feature-incremental tasks the
//! active party keeps a list of class prototypes, replays evolved or fused
//! prototypes through the server, and passive parties freeze the local
//! parameters with the highest Fisher information.

pub mod continual;
pub mod data;
mod error;
pub mod experiment;
pub mod metrics;
pub mod protocol;
pub mod prototype;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
