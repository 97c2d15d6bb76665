//! Simulated synchronous message passing between one active party and the
//! passive parties, and the per-task orchestration around it.

mod exec;
mod federation;
mod message;
mod party;

pub use exec::Execution;
pub use federation::{Federation, FederationConfig, FisherDump, LmoConfig};
pub use message::{aggregate_embeddings, Direction, RoundMessage};
pub use party::{ActiveParty, PassiveParty, StepOutcome};
