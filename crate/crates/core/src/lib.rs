//! Consensus-free replicated payments: clients own append-only logs of their
//! outgoing payments, replicas keep the logs consistent through Byzantine
//! reliable broadcast instead of consensus, and incoming funds can be proven
//! with f+1 signed credits. A deterministic discrete-event harness drives the
//! whole system in-process for property testing and benchmarking.

pub mod brb;
pub mod crypto;
pub mod engine;
pub mod messages;
pub mod model;
pub mod node;
pub mod reconfig;
pub mod report;
pub mod scenarios;
pub mod shard;
pub mod sim;
pub mod wire;
pub mod workload;

pub use engine::Variant;
pub use model::{ClientId, Payment, PaymentId, ReplicaId, SystemConfig};
