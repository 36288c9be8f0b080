//! Backend-agnostic finite-state safety loop for federated computing.
//!
//! Simulated nodes and an aggregator run mock privacy back-ends while a control
//! plane senses signed telemetry, evaluates guard-rail predicates, dispatches
//! signed commands, and records evidence in a Merkle ledger.

pub mod audit;
pub mod canonical;
pub mod crypto;
pub mod digest;
pub mod ep;
pub mod feedback;
pub mod fsm;
pub mod guardrails;
pub mod manifest;
pub mod simulator;
pub mod telemetry;
pub mod verifier;

pub use audit::{verify_chain, Ledger, LedgerBlock, LedgerRecord, RecordKind};
pub use crypto::{Identity, KeyRegistry, Keyring};
pub use digest::{sha256, Digest};
pub use ep::{Opcode, PluginDescriptor};
pub use feedback::{OverrideOutcome, OverrideRequest};
pub use fsm::{ACommand, Ack, AggregatorState, CommandKind, CommandTarget, NodePhase, NodeState};
pub use guardrails::{parse_guardrails, GuardrailConfig};
pub use manifest::{admission_check, compile_manifest, AdmissionResult, EpRegistry, Manifest};
pub use simulator::{run_scenario, Scenario, SimConfig, Simulation, Trace, Verdict};
pub use telemetry::{MetricFrame, MetricKey};
