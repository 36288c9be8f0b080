use serde::{Deserialize, Serialize};

use super::config::{FaultInjection, Scenario};
use crate::canonical::to_canonical_bytes;
use crate::digest::{sha256, Digest};
use crate::ep::EmittedMetrics;
use crate::feedback::OverrideRequest;
use crate::fsm::{
    ACommand, Ack, AggregatorState, CommandKind, CommandTarget, ControlEngineState, Escalation,
    NodePhase, SafeSet,
};
use crate::guardrails::{FiredAction, Forecast};
use crate::manifest::AdmissionResult;
use crate::telemetry::{AlignedSnapshot, Rejection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    #[serde(rename = "FINALIZE")]
    Finalize,
    #[serde(rename = "ABORTED")]
    Aborted,
    MaxTicksExceeded,
    AdmissionRejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateInfo {
    pub id: String,
    pub kind: CommandKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub scenario: Scenario,
    pub n_nodes: u32,
    pub seed: u64,
    pub job_id: String,
    pub ep_id: String,
    pub plugin: String,
    pub manifest_hash: Option<Digest>,
    pub guardrails_hash: Digest,
    pub quorum: usize,
    pub max_ticks: u64,
    pub s_ok: SafeSet,
    pub injections: Vec<FaultInjection>,
    /// Enabled predicates in evaluation order.
    pub predicates: Vec<PredicateInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub id: String,
    pub phase: NodePhase,
    pub isolated: bool,
    pub bootstrap_pending: bool,
    pub share_sent: bool,
    pub pc: usize,
    pub metrics: EmittedMetrics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InFlightView {
    pub nonce: String,
    pub kind: CommandKind,
    pub target: CommandTarget,
    pub awaiting: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialRecord {
    pub nodes: Vec<NodeView>,
    pub aggregator: AggregatorState,
    pub mu: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub world_digest: Digest,
    pub silenced: Vec<String>,
    pub nodes: Vec<NodeView>,
    pub aggregator: AggregatorState,
    pub control: ControlEngineState,
    pub snapshot: AlignedSnapshot,
    pub forecast: Forecast,
    pub fired: Vec<FiredAction>,
    pub overrides: Vec<OverrideRequest>,
    pub commands: Vec<ACommand>,
    pub resent: Vec<String>,
    pub acks: Vec<Ack>,
    pub rejects: Vec<Rejection>,
    pub liveness_faults: Vec<String>,
    pub escalations: Vec<Escalation>,
    pub in_flight: Vec<InFlightView>,
    pub mu: u32,
    pub safety_ok: bool,
    pub ledger_root: Digest,
}

impl TickRecord {
    pub fn node(&self, id: &str) -> Option<&NodeView> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub header: TraceHeader,
    pub admission: AdmissionResult,
    pub initial: Option<InitialRecord>,
    pub ticks: Vec<TickRecord>,
    pub verdict: Verdict,
    pub final_mu: u32,
    pub ledger_root: Digest,
}

impl Trace {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("traces serialize")
    }

    pub fn hash(&self) -> Digest {
        sha256(&self.canonical_bytes())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}
