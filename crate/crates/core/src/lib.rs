//! Deterministic simulator of completion poisoning in decentralized GRPO.

pub mod adversary;
pub mod analysis;
pub mod corpus;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod rewards;
pub mod seed;
pub mod sentinel;
pub mod swarm;
