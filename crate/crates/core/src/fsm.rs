//! Node, Aggregator, and Control Engine state machines, signed A-commands,
//! and the ranking function μ.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::canonical::signing_bytes;
use crate::crypto::{Identity, KeyRegistry, SignatureError};
use crate::guardrails::FiredAction;

pub const AGGREGATOR_ID: &str = "aggregator";
pub const CONTROL_PLANE_ID: &str = "control-plane";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NodePhase {
    Idle,
    Pref,
    Inf,
    Postf,
    Done,
    Aborted,
}

impl NodePhase {
    pub const ALL: [NodePhase; 6] = [
        NodePhase::Idle,
        NodePhase::Pref,
        NodePhase::Inf,
        NodePhase::Postf,
        NodePhase::Done,
        NodePhase::Aborted,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, NodePhase::Done | NodePhase::Aborted)
    }
}

impl fmt::Display for NodePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodePhase::Idle => "IDLE",
            NodePhase::Pref => "PREF",
            NodePhase::Inf => "INF",
            NodePhase::Postf => "POSTF",
            NodePhase::Done => "DONE",
            NodePhase::Aborted => "ABORTED",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeState {
    pub phase: NodePhase,
    pub isolated: bool,
    pub bootstrap_pending: bool,
}

impl Default for NodeState {
    fn default() -> Self {
        Self {
            phase: NodePhase::Idle,
            isolated: false,
            bootstrap_pending: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeEvent {
    JobAdmitted,
    EpBound,
    PluginFinished,
    FinalizeAck,
    Bootstrap,
    AbortJob,
    /// A-ISOLATE_PARTY addressed to this node.
    IsolateSelf,
}

impl NodeEvent {
    pub const ALL: [NodeEvent; 7] = [
        NodeEvent::JobAdmitted,
        NodeEvent::EpBound,
        NodeEvent::PluginFinished,
        NodeEvent::FinalizeAck,
        NodeEvent::Bootstrap,
        NodeEvent::AbortJob,
        NodeEvent::IsolateSelf,
    ];
}

/// Total transition function; pairs without a rule are logged no-ops.
/// A bootstrap is recorded as pending and serviced by the node's next
/// data-plane step, both during and after inference.
pub fn node_step(node: NodeState, event: NodeEvent) -> NodeState {
    use NodePhase::*;
    let mut next = node;
    match (node.phase, event) {
        (Idle, NodeEvent::JobAdmitted) => next.phase = Pref,
        (Pref, NodeEvent::EpBound) => next.phase = Inf,
        (Inf, NodeEvent::PluginFinished) => next.phase = Postf,
        (Postf, NodeEvent::FinalizeAck) => {
            next.phase = Done;
            next.bootstrap_pending = false;
        }
        (Inf | Postf, NodeEvent::Bootstrap) => next.bootstrap_pending = true,
        (phase, NodeEvent::AbortJob) if !phase.is_terminal() => {
            next.phase = Aborted;
            next.bootstrap_pending = false;
        }
        (phase, NodeEvent::IsolateSelf) if !phase.is_terminal() => {
            next.phase = Aborted;
            next.isolated = true;
            next.bootstrap_pending = false;
        }
        (phase, event) => tracing::debug!(?phase, ?event, "ignored node event"),
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AggregatorState {
    Wait,
    Merge,
    Finalize,
    Aborted,
}

impl AggregatorState {
    pub const ALL: [AggregatorState; 4] = [
        AggregatorState::Wait,
        AggregatorState::Merge,
        AggregatorState::Finalize,
        AggregatorState::Aborted,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, AggregatorState::Finalize | AggregatorState::Aborted)
    }
}

impl fmt::Display for AggregatorState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregatorState::Wait => "WAIT",
            AggregatorState::Merge => "MERGE",
            AggregatorState::Finalize => "FINALIZE",
            AggregatorState::Aborted => "ABORTED",
        })
    }
}

/// What the aggregator can observe when it steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregatorView {
    pub non_isolated: usize,
    pub quorum: usize,
    /// Every non-isolated node has sent its share.
    pub shares_complete: bool,
    pub finalize_guard: bool,
    pub abort_commanded: bool,
}

pub fn aggregator_step(agg: AggregatorState, view: &AggregatorView) -> AggregatorState {
    use AggregatorState::*;
    if agg.is_terminal() {
        return agg;
    }
    if view.abort_commanded || view.non_isolated < view.quorum {
        return Aborted;
    }
    match agg {
        Wait if view.shares_complete => Merge,
        Merge if view.finalize_guard => Finalize,
        other => other,
    }
}

/// States a non-isolated node may occupy when the aggregator finalizes.
/// DONE is always admitted: it is reachable only from POSTF via the
/// finalize acknowledgment, i.e. after the release.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafeSet(pub BTreeSet<NodePhase>);

impl Default for SafeSet {
    fn default() -> Self {
        SafeSet(BTreeSet::from([NodePhase::Postf]))
    }
}

impl SafeSet {
    pub fn admits(&self, phase: NodePhase) -> bool {
        phase == NodePhase::Done || self.0.contains(&phase)
    }
}

/// The MERGE→FINALIZE guard: every non-isolated node is safe and nothing fired.
pub fn finalize_guard<'a>(
    nodes: impl IntoIterator<Item = &'a NodeState>,
    s_ok: &SafeSet,
    fired: bool,
) -> bool {
    !fired
        && nodes
            .into_iter()
            .filter(|n| !n.isolated)
            .all(|n| s_ok.admits(n.phase))
}

/// FINALIZE ⇒ (every non-isolated node in S_ok ∧ no predicate fired).
pub fn check_safety<'a>(
    nodes: impl IntoIterator<Item = &'a NodeState>,
    agg: AggregatorState,
    s_ok: &SafeSet,
    fired: bool,
) -> bool {
    agg != AggregatorState::Finalize || finalize_guard(nodes, s_ok, fired)
}

pub fn rank(phase: NodePhase) -> u32 {
    match phase {
        NodePhase::Idle => 3,
        NodePhase::Pref => 2,
        NodePhase::Inf => 1,
        NodePhase::Postf | NodePhase::Done | NodePhase::Aborted => 0,
    }
}

pub fn rank_agg(agg: AggregatorState) -> u32 {
    match agg {
        AggregatorState::Wait => 2,
        AggregatorState::Merge => 1,
        AggregatorState::Finalize | AggregatorState::Aborted => 0,
    }
}

pub fn mu(nodes: impl IntoIterator<Item = NodePhase>, agg: AggregatorState) -> u32 {
    nodes.into_iter().map(rank).sum::<u32>() + rank_agg(agg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CommandKind {
    #[serde(rename = "A-BOOTSTRAP")]
    Bootstrap,
    #[serde(rename = "A-ABORT_JOB")]
    AbortJob,
    #[serde(rename = "A-ISOLATE_PARTY")]
    IsolateParty,
}

impl CommandKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandKind::Bootstrap => "A-BOOTSTRAP",
            CommandKind::AbortJob => "A-ABORT_JOB",
            CommandKind::IsolateParty => "A-ISOLATE_PARTY",
        }
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Addressee of a command. Serialized as `"all"`, `"aggregator"`, or a node id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CommandTarget {
    All,
    Aggregator,
    Node(String),
}

impl CommandTarget {
    pub fn participant(id: &str) -> Self {
        match id {
            AGGREGATOR_ID => CommandTarget::Aggregator,
            other => CommandTarget::Node(other.to_string()),
        }
    }

    pub fn addresses(&self, participant: &str) -> bool {
        match self {
            CommandTarget::All => true,
            CommandTarget::Aggregator => participant == AGGREGATOR_ID,
            CommandTarget::Node(id) => id == participant,
        }
    }
}

impl fmt::Display for CommandTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommandTarget::All => f.write_str("all"),
            CommandTarget::Aggregator => f.write_str(AGGREGATOR_ID),
            CommandTarget::Node(id) => f.write_str(id),
        }
    }
}

impl Serialize for CommandTarget {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CommandTarget {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s.is_empty() {
            return Err(serde::de::Error::custom("empty command target"));
        }
        Ok(if s == "all" {
            CommandTarget::All
        } else {
            CommandTarget::participant(&s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ACommand {
    pub kind: CommandKind,
    pub job_id: String,
    pub target: CommandTarget,
    pub nonce: String,
    pub issued_tick: u64,
    #[serde(default)]
    pub sig: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ack {
    pub nonce: String,
    pub node_id: String,
    pub tick: u64,
    #[serde(default)]
    pub sig: String,
}

pub fn sign_command(mut command: ACommand, control: &Identity) -> ACommand {
    command.sig = control.sign(&signing_bytes(&command).expect("commands serialize"));
    command
}

pub fn verify_command(command: &ACommand, registry: &KeyRegistry) -> Result<(), SignatureError> {
    registry.verify(
        CONTROL_PLANE_ID,
        &signing_bytes(command).expect("commands serialize"),
        &command.sig,
    )
}

pub fn sign_ack(mut ack: Ack, participant: &Identity) -> Ack {
    ack.sig = participant.sign(&signing_bytes(&ack).expect("acks serialize"));
    ack
}

pub fn verify_ack(ack: &Ack, registry: &KeyRegistry) -> Result<(), SignatureError> {
    registry.verify(
        &ack.node_id,
        &signing_bytes(ack).expect("acks serialize"),
        &ack.sig,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommandRejected {
    #[error("command signature: {0}")]
    Signature(#[from] SignatureError),
    #[error("command for job `{0}`")]
    WrongJob(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Receipt {
    /// First delivery of this nonce: apply the command and return the ack.
    Fresh(Ack),
    /// Nonce already processed; nothing to do and no second ack.
    Duplicate,
}

/// Per-participant command intake. Enforces authenticity and nonce idempotence.
#[derive(Debug, Clone)]
pub struct CommandGateway {
    identity: Identity,
    control: KeyRegistry,
    job_id: String,
    processed: BTreeSet<String>,
}

impl CommandGateway {
    pub fn new(identity: Identity, control: KeyRegistry, job_id: impl Into<String>) -> Self {
        Self {
            identity,
            control,
            job_id: job_id.into(),
            processed: BTreeSet::new(),
        }
    }

    pub fn id(&self) -> &str {
        self.identity.id()
    }

    pub fn has_processed(&self, nonce: &str) -> bool {
        self.processed.contains(nonce)
    }

    pub fn receive(&mut self, command: &ACommand, tick: u64) -> Result<Receipt, CommandRejected> {
        verify_command(command, &self.control)?;
        if command.job_id != self.job_id {
            return Err(CommandRejected::WrongJob(command.job_id.clone()));
        }
        if !self.processed.insert(command.nonce.clone()) {
            return Ok(Receipt::Duplicate);
        }
        let ack = Ack {
            nonce: command.nonce.clone(),
            node_id: self.identity.id().to_string(),
            tick,
            sig: String::new(),
        };
        Ok(Receipt::Fresh(sign_ack(ack, &self.identity)))
    }
}

/// Maps a delivered command onto the receiving node's FSM event, if any.
pub fn node_event_for(command: &ACommand, node_id: &str) -> Option<NodeEvent> {
    match command.kind {
        CommandKind::Bootstrap => Some(NodeEvent::Bootstrap),
        CommandKind::AbortJob => Some(NodeEvent::AbortJob),
        CommandKind::IsolateParty => {
            matches!(&command.target, CommandTarget::Node(id) if id == node_id)
                .then_some(NodeEvent::IsolateSelf)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ControlPhase {
    Ready,
    Evaluate,
    Dispatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlEngineState {
    pub phase: ControlPhase,
    pub pending_acks: BTreeSet<String>,
}

/// A command the control engine intends to issue this tick, merged over all
/// fired actions with the same (kind, target).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedCommand {
    pub kind: CommandKind,
    pub target: CommandTarget,
    pub predicate_ids: Vec<String>,
    pub firing_nodes: Vec<String>,
}

/// Groups fired actions into commands. A-ABORT_JOB is always job-wide.
pub fn plan_commands(fired: &[FiredAction]) -> Vec<PlannedCommand> {
    let mut plans: Vec<PlannedCommand> = Vec::new();
    for action in fired {
        let target = if action.kind == CommandKind::AbortJob {
            CommandTarget::All
        } else {
            action.target.clone()
        };
        let plan = match plans
            .iter_mut()
            .find(|p| p.kind == action.kind && p.target == target)
        {
            Some(p) => p,
            None => {
                plans.push(PlannedCommand {
                    kind: action.kind,
                    target,
                    predicate_ids: Vec::new(),
                    firing_nodes: Vec::new(),
                });
                plans.last_mut().expect("just pushed")
            }
        };
        if !plan.predicate_ids.contains(&action.predicate_id) {
            plan.predicate_ids.push(action.predicate_id.clone());
        }
        if !plan.firing_nodes.contains(&action.node_id) {
            plan.firing_nodes.push(action.node_id.clone());
        }
    }
    plans
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InFlight {
    pub command: ACommand,
    pub awaiting: BTreeSet<String>,
    pub resent: bool,
}

/// What to do about participants that have not acknowledged a command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Escalation {
    /// A bootstrap went unacknowledged: treat the participant as faulty.
    IsolateFaulty { nonce: String, node_id: String },
    /// An abort went unacknowledged: the participant is aborted unilaterally.
    ForceAbort { nonce: String, node_id: String },
    /// An isolation went unacknowledged: the participant is isolated unilaterally.
    ForceIsolate { nonce: String, node_id: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DueWork {
    pub resend: Vec<(ACommand, BTreeSet<String>)>,
    pub escalate: Vec<Escalation>,
}

/// Control Engine plus Command Dispatcher: issues signed commands with fresh
/// nonces and tracks acknowledgments.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    identity: Identity,
    job_id: String,
    next_nonce: u64,
    phase: ControlPhase,
    in_flight: BTreeMap<String, InFlight>,
}

impl Dispatcher {
    pub fn new(identity: Identity, job_id: impl Into<String>) -> Self {
        Self {
            identity,
            job_id: job_id.into(),
            next_nonce: 0,
            phase: ControlPhase::Ready,
            in_flight: BTreeMap::new(),
        }
    }

    pub fn phase(&self) -> ControlPhase {
        self.phase
    }

    pub fn state(&self) -> ControlEngineState {
        ControlEngineState {
            phase: self.phase,
            pending_acks: self.in_flight.keys().cloned().collect(),
        }
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &InFlight> {
        self.in_flight.values()
    }

    /// READY→EVALUATE at the start of the Act phase. A dispatcher still
    /// waiting on acks stays in DISPATCH.
    pub fn begin_evaluate(&mut self) {
        if self.phase == ControlPhase::Ready {
            self.phase = ControlPhase::Evaluate;
        }
    }

    /// Signs and registers a command. Recipients are the participants expected
    /// to acknowledge it.
    pub fn issue(
        &mut self,
        kind: CommandKind,
        target: CommandTarget,
        tick: u64,
        recipients: BTreeSet<String>,
    ) -> ACommand {
        let nonce = format!("{}-{:06}", self.job_id, self.next_nonce);
        self.next_nonce += 1;
        let command = sign_command(
            ACommand {
                kind,
                job_id: self.job_id.clone(),
                target,
                nonce: nonce.clone(),
                issued_tick: tick,
                sig: String::new(),
            },
            &self.identity,
        );
        if !recipients.is_empty() {
            self.in_flight.insert(
                nonce,
                InFlight {
                    command: command.clone(),
                    awaiting: recipients,
                    resent: false,
                },
            );
            self.phase = ControlPhase::Dispatch;
        }
        command
    }

    /// Records an ack; returns false for unknown nonces or unexpected senders.
    pub fn acknowledge(&mut self, ack: &Ack) -> bool {
        let Some(entry) = self.in_flight.get_mut(&ack.nonce) else {
            return false;
        };
        let removed = entry.awaiting.remove(&ack.node_id);
        if entry.awaiting.is_empty() {
            self.in_flight.remove(&ack.nonce);
        }
        removed
    }

    /// Stops waiting on a participant (it became terminal by other means).
    pub fn forget_participant(&mut self, participant: &str) {
        self.in_flight.retain(|_, entry| {
            entry.awaiting.remove(participant);
            !entry.awaiting.is_empty()
        });
    }

    /// Commands unacknowledged for one tick are re-sent once; after two ticks
    /// every silent recipient is escalated and the command is retired.
    pub fn due(&mut self, tick: u64) -> DueWork {
        let mut work = DueWork::default();
        let mut retired = Vec::new();
        for (nonce, entry) in self.in_flight.iter_mut() {
            let age = tick.saturating_sub(entry.command.issued_tick);
            if age >= 2 {
                for node_id in &entry.awaiting {
                    let (nonce, node_id) = (nonce.clone(), node_id.clone());
                    work.escalate.push(match entry.command.kind {
                        CommandKind::Bootstrap => Escalation::IsolateFaulty { nonce, node_id },
                        CommandKind::AbortJob => Escalation::ForceAbort { nonce, node_id },
                        CommandKind::IsolateParty => Escalation::ForceIsolate { nonce, node_id },
                    });
                }
                retired.push(nonce.clone());
            } else if age == 1 && !entry.resent {
                entry.resent = true;
                work.resend
                    .push((entry.command.clone(), entry.awaiting.clone()));
            }
        }
        for nonce in retired {
            self.in_flight.remove(&nonce);
        }
        work
    }

    /// End of the Act phase: DISPATCH while acks are outstanding, else READY.
    pub fn settle(&mut self) -> ControlPhase {
        self.phase = if self.in_flight.is_empty() {
            ControlPhase::Ready
        } else {
            ControlPhase::Dispatch
        };
        self.phase
    }
}
