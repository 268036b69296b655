//! Consensus-ADMM distributed linear SVM training over arbitrary connected
//! graphs, with a data-poisoning attacker at compromised nodes and two
//! resilience defenses (neighbor verification and update rejection).
//!
//! The crate is organized bottom-up:
//!
//! - [`topology`]: communication graphs and degree statistics.
//! - [`dataset`]: synthetic and CSV data, per-node partitions.
//! - [`subsolvers`]: the box-constrained dual QP, the attacker's closed-form
//!   best response, and the diagonal `U_v^{-1}`.
//! - [`engine`]: the synchronous round loop with attacker/defense hooks.
//! - [`adversary`]: compromised-node specs and strategy presets.
//! - [`defenses`]: verification and rejection hooks.
//! - [`harness`]: risks, run configs, shipped presets, traces and plots.

pub mod adversary;
pub mod dataset;
pub mod defenses;
pub mod engine;
pub mod harness;
pub mod subsolvers;
pub mod topology;

pub use adversary::{AttackStrategyPreset, AttackerSpec, BudgetSplit};
pub use dataset::{LabeledSet, NodePartition, TrainSizes};
pub use defenses::{DefenseSet, RejectionConfig, VerificationConfig};
pub use engine::{EngineConfig, EngineError, EngineState, InitMode, RoundReport};
pub use harness::trace::RiskTrace;
pub use topology::{Topology, TopologyKind};
