//! Deterministic tick-driven execution of the safety loop.
//!
//! Each tick runs the data plane, then Sense (collect and seal), Predict
//! (forecast), Act (evaluate, dispatch, acknowledge, aggregator step), and
//! Prove (ledger commit).

mod config;
mod trace;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{
    dp_pipeline, fed_aggregate, fhe_pipeline, mpc_pipeline, node_id, ConfigError, FaultInjection,
    FaultKind, FaultMagnitudes, Scenario, SimConfig, DEFAULT_MAX_TICKS, DEFAULT_QUORUM,
    DP_PIPELINE_JSON, FED_AGGREGATE_JSON, FHE_PIPELINE_JSON, MPC_PIPELINE_JSON,
};
pub use trace::{
    InFlightView, InitialRecord, NodeView, PredicateInfo, TickRecord, Trace, TraceHeader, Verdict,
};

use crate::audit::{Ledger, RecordKind};
use crate::canonical::to_canonical_bytes;
use crate::crypto::{Identity, KeyRegistry, Keyring};
use crate::digest::{sha256, Digest};
use crate::ep::{
    apply_drain, apply_extra_spend, bind_ep, ep_execute, EmittedMetrics, EpInstance, EpState,
    FaultFlags, Opcode,
};
use crate::feedback::{OverrideDesk, OverrideOutcome, OverrideRequest};
use crate::fsm::{
    aggregator_step, check_safety, finalize_guard, mu, node_event_for, node_step, plan_commands,
    ACommand, Ack, AggregatorState, AggregatorView, CommandGateway, CommandKind, CommandTarget,
    Dispatcher, Escalation, NodeEvent, NodePhase, NodeState, Receipt, AGGREGATOR_ID,
    CONTROL_PLANE_ID,
};
use crate::guardrails::{forecast, select_actions, FiredAction};
use crate::manifest::{
    admission_check, compile_manifest, manifest_hash, AdmissionReason, AdmissionResult,
    AdmissionVerdict, Manifest, ManifestError,
};
use crate::telemetry::{
    sign_frame, AlignedSnapshot, Collector, CollectorConfig, MetricFrame, Timestamp,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("admission rejected: {}", .result.reasons.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(", "))]
    Rejected {
        result: AdmissionResult,
        manifest: Option<Box<Manifest>>,
    },
}

/// A finished run: the trace plus the closed ledger.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub trace: Trace,
    pub ledger: Ledger,
}

#[derive(Debug, Clone)]
struct NodeRuntime {
    state: NodeState,
    ep_state: EpState,
    pc: usize,
    share_sent: bool,
    seq: u64,
    faults: FaultFlags,
    gateway: CommandGateway,
}

#[derive(Debug, Clone)]
struct AggregatorRuntime {
    state: AggregatorState,
    ep_state: EpState,
    seq: u64,
    gateway: CommandGateway,
    abort_commanded: bool,
}

/// Why a command was issued; recorded in its ledger metadata.
#[derive(Debug, Clone)]
enum Origin {
    Predicate {
        predicate_ids: Vec<String>,
        firing_nodes: Vec<String>,
    },
    Override {
        operator_id: String,
        nonce: String,
    },
    Liveness,
    Escalation {
        stale_nonce: String,
    },
    Quorum,
}

pub struct Simulation {
    config: SimConfig,
    manifest: Manifest,
    manifest_hash: Digest,
    ep: EpInstance,
    keyring: Keyring,
    participant_keys: KeyRegistry,
    nodes: BTreeMap<String, NodeRuntime>,
    aggregator: AggregatorRuntime,
    collector: Collector,
    dispatcher: Dispatcher,
    ledger: Ledger,
    desk: OverrideDesk,
    queued_overrides: Vec<OverrideRequest>,
    external_frames: Vec<Vec<u8>>,
    prev_snapshot: Option<AlignedSnapshot>,
    tick: u64,
    rng: ChaCha8Rng,
    admission: AdmissionResult,
    initial: InitialRecord,
    records: Vec<TickRecord>,
    closed: bool,
}

fn hash_of<T: Serialize>(value: &T) -> Digest {
    sha256(&to_canonical_bytes(value).expect("simulation values serialize"))
}

fn meta<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Compiles and admits the job described by `config`.
pub fn admit(config: &SimConfig) -> Result<(Manifest, AdmissionResult), SimError> {
    config.validate()?;
    let manifest = match compile_manifest(
        &config.job_id,
        &config.plugin,
        &config.ep_id,
        &config.registry,
        &config.guardrails,
        config.n_nodes,
    ) {
        Ok(m) => m,
        Err(ManifestError::BadConfig(detail)) => {
            let reason = if config.registry.get(&config.ep_id).is_none() {
                AdmissionReason::UnknownEp {
                    ep_id: config.ep_id.clone(),
                }
            } else {
                AdmissionReason::BadConfig { detail }
            };
            let result = AdmissionResult {
                verdict: AdmissionVerdict::Rejected,
                reasons: vec![reason],
            };
            return Err(SimError::Rejected {
                result,
                manifest: None,
            });
        }
        Err(ManifestError::Json(e)) => return Err(ConfigError(e.to_string()).into()),
    };
    let result = admission_check(&manifest, &config.registry, &config.guardrails);
    if !result.is_admitted() {
        return Err(SimError::Rejected {
            result,
            manifest: Some(Box::new(manifest)),
        });
    }
    Ok((manifest, result))
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        let (manifest, admission) = admit(&config)?;
        let manifest_hash = manifest_hash(&manifest);
        let ep = bind_ep(&manifest, &config.registry, config.ep_params)
            .expect("admitted manifest binds");

        let control = Identity::derive(config.seed, CONTROL_PLANE_ID);
        let mut control_keys = KeyRegistry::default();
        control_keys.insert(CONTROL_PLANE_ID, control.verifying_key());

        let mut keyring = Keyring::new();
        let mut nodes = BTreeMap::new();
        for id in config.node_ids() {
            let identity = Identity::derive(config.seed, &id);
            keyring.insert(identity.clone());
            nodes.insert(
                id,
                NodeRuntime {
                    state: NodeState::default(),
                    ep_state: ep.initial_state(),
                    pc: 0,
                    share_sent: false,
                    seq: 0,
                    faults: FaultFlags::default(),
                    gateway: CommandGateway::new(identity, control_keys.clone(), &config.job_id),
                },
            );
        }
        let agg_identity = Identity::derive(config.seed, AGGREGATOR_ID);
        keyring.insert(agg_identity.clone());
        let aggregator = AggregatorRuntime {
            state: AggregatorState::Wait,
            ep_state: ep.initial_state(),
            seq: 0,
            gateway: CommandGateway::new(agg_identity, control_keys, &config.job_id),
            abort_commanded: false,
        };
        let participant_keys = keyring.registry();
        let mut participants: BTreeSet<String> = nodes.keys().cloned().collect();
        participants.insert(AGGREGATOR_ID.to_string());
        let collector = Collector::new(CollectorConfig {
            manifest_hash,
            metric_keys: manifest.metric_keys.clone(),
            registry: participant_keys.clone(),
            participants,
        });

        let mut ledger = Ledger::new();
        ledger
            .append(
                0,
                RecordKind::Admission,
                hash_of(&admission),
                meta([
                    ("verdict", "admitted".into()),
                    ("job_id", config.job_id.clone()),
                    ("manifest_hash", manifest_hash.to_hex()),
                ]),
            )
            .expect("fresh ledger accepts appends");
        ledger.commit(false).expect("admission record pending");

        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut sim = Self {
            dispatcher: Dispatcher::new(control, &config.job_id),
            config,
            manifest,
            manifest_hash,
            ep,
            keyring,
            participant_keys,
            nodes,
            aggregator,
            collector,
            ledger,
            desk: OverrideDesk::default(),
            queued_overrides: Vec::new(),
            external_frames: Vec::new(),
            prev_snapshot: None,
            tick: 0,
            rng,
            admission,
            initial: InitialRecord {
                nodes: Vec::new(),
                aggregator: AggregatorState::Wait,
                mu: 0,
            },
            records: Vec::new(),
            closed: false,
        };
        sim.initial = InitialRecord {
            nodes: sim.node_views(),
            aggregator: sim.aggregator.state,
            mu: sim.mu(),
        };
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_hash(&self) -> Digest {
        self.manifest_hash
    }

    pub fn collector_manifest_hash(&self) -> Digest {
        self.collector.manifest_hash()
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn initial(&self) -> &InitialRecord {
        &self.initial
    }

    pub fn records(&self) -> &[TickRecord] {
        &self.records
    }

    pub fn last_record(&self) -> Option<&TickRecord> {
        self.records.last()
    }

    pub fn current_tick(&self) -> u64 {
        self.tick
    }

    pub fn participant_keys(&self) -> &KeyRegistry {
        &self.participant_keys
    }

    pub fn aggregator_state(&self) -> AggregatorState {
        self.aggregator.state
    }

    pub fn node_state(&self, id: &str) -> Option<NodeState> {
        self.nodes.get(id).map(|n| n.state)
    }

    pub fn mu(&self) -> u32 {
        mu(
            self.nodes.values().map(|n| n.state.phase),
            self.aggregator.state,
        )
    }

    /// Every participant has reached a terminal state.
    pub fn is_terminal(&self) -> bool {
        self.aggregator.state.is_terminal()
            && self.nodes.values().all(|n| n.state.phase.is_terminal())
    }

    /// Ticks have stopped: terminal, budget exhausted, or explicitly closed.
    pub fn is_finished(&self) -> bool {
        self.closed || self.is_terminal() || self.tick >= self.config.max_ticks
    }

    /// Queues raw wire bytes for the next Sense phase, as if an extra frame
    /// arrived from the network.
    pub fn inject_wire_frame(&mut self, bytes: Vec<u8>) {
        self.external_frames.push(bytes);
    }

    /// Validates an operator override and queues it for the next tick.
    pub fn submit_override(
        &mut self,
        request: &OverrideRequest,
        operators: &KeyRegistry,
    ) -> OverrideOutcome {
        let terminal = self.aggregator.state.is_terminal() || self.is_finished();
        let nodes = &self.nodes;
        let outcome = self
            .desk
            .check(request, operators, terminal, |id| nodes.contains_key(id));
        if outcome == OverrideOutcome::Accepted {
            self.ledger
                .append(
                    self.tick,
                    RecordKind::Override,
                    hash_of(request),
                    meta([
                        ("operator_id", request.operator_id.clone()),
                        ("kind", request.kind.to_string()),
                        ("target", request.target.to_string()),
                        ("nonce", request.nonce.clone()),
                    ]),
                )
                .expect("ledger open while job is active");
            self.queued_overrides.push(request.clone());
        }
        outcome
    }

    fn node_views(&self) -> Vec<NodeView> {
        self.nodes
            .iter()
            .map(|(id, n)| NodeView {
                id: id.clone(),
                phase: n.state.phase,
                isolated: n.state.isolated,
                bootstrap_pending: n.state.bootstrap_pending,
                share_sent: n.share_sent,
                pc: n.pc,
                metrics: self.ep.metrics(&n.ep_state),
            })
            .collect()
    }

    fn make_frame(&mut self, id: &str, seq: u64, metrics: EmittedMetrics) -> MetricFrame {
        let lag_ms = self.rng.gen_range(50..=200);
        let op_latency_ms = (self.rng.gen_range(1.0..=5.0f64) * 1000.0).round() / 1000.0;
        let frame = MetricFrame {
            node_id: id.to_string(),
            seq,
            noise_bits: metrics.noise_bits,
            levels_left: metrics.levels_left,
            epsilon_spent: metrics.epsilon_spent,
            share_auth_fail: metrics.share_auth_fail,
            lag_ms,
            op_latency_ms,
            timestamp: Timestamp::from_tick(self.tick),
            sig: String::new(),
        };
        sign_frame(&frame, &self.keyring).expect("participants hold keys")
    }

    fn data_plane(&mut self, silenced: &BTreeSet<String>) -> Vec<MetricFrame> {
        let t = self.tick;
        let due: Vec<FaultInjection> = self
            .config
            .injections
            .iter()
            .filter(|i| i.tick == t)
            .cloned()
            .collect();
        for inj in due.iter().filter(|i| i.kind == FaultKind::InvalidShare) {
            if let Some(node) = self.nodes.get_mut(&inj.node_id) {
                node.faults.invalid_shares += 1;
            }
        }
        let agg_finalized = self.aggregator.state == AggregatorState::Finalize;
        let program = self.config.plugin.dsl_ops.clone();
        let ids: Vec<String> = self.nodes.keys().cloned().collect();
        let mut frames = Vec::new();
        for id in ids {
            let ep = &self.ep;
            let magnitudes = self.config.magnitudes;
            let node = self.nodes.get_mut(&id).expect("known node");
            if node.state.phase.is_terminal() || silenced.contains(&id) {
                continue;
            }
            if node.state.phase == NodePhase::Inf {
                for inj in due.iter().filter(|i| i.node_id == id) {
                    node.ep_state = match inj.kind {
                        FaultKind::NoiseDrain => {
                            apply_drain(&node.ep_state, magnitudes.noise_drain_bits)
                        }
                        FaultKind::ExtraDpSpend => {
                            apply_extra_spend(&node.ep_state, magnitudes.extra_dp_spend)
                        }
                        FaultKind::InvalidShare | FaultKind::Silence => node.ep_state,
                    };
                }
            }
            match node.state.phase {
                NodePhase::Idle => node.state = node_step(node.state, NodeEvent::JobAdmitted),
                NodePhase::Pref => node.state = node_step(node.state, NodeEvent::EpBound),
                NodePhase::Inf if node.state.bootstrap_pending => {
                    node.ep_state = ep.bootstrap(&node.ep_state);
                    node.state.bootstrap_pending = false;
                }
                NodePhase::Inf => {
                    let op = program[node.pc];
                    let out = ep_execute(ep, &node.ep_state, op, &mut node.faults)
                        .expect("admitted plugins only use implemented opcodes");
                    node.ep_state = out.state;
                    if out.advance {
                        if op == Opcode::Send {
                            node.share_sent = true;
                        }
                        node.pc += 1;
                    }
                    if node.pc == program.len() {
                        node.state = node_step(node.state, NodeEvent::PluginFinished);
                    }
                }
                NodePhase::Postf => {
                    if node.state.bootstrap_pending {
                        node.ep_state = ep.bootstrap(&node.ep_state);
                        node.state.bootstrap_pending = false;
                    }
                    if agg_finalized {
                        node.state = node_step(node.state, NodeEvent::FinalizeAck);
                    }
                }
                NodePhase::Done | NodePhase::Aborted => unreachable!("terminal nodes are skipped"),
            }
            node.seq += 1;
            let (seq, metrics) = (node.seq, ep.metrics(&node.ep_state));
            frames.push(self.make_frame(&id, seq, metrics));
        }
        if !self.aggregator.state.is_terminal() {
            self.aggregator.seq += 1;
            let (seq, metrics) = (
                self.aggregator.seq,
                self.ep.metrics(&self.aggregator.ep_state),
            );
            frames.push(self.make_frame(AGGREGATOR_ID, seq, metrics));
        }
        frames
    }

    /// Participants a command expects acks from: addressed and non-terminal.
    fn recipients(&self, target: &CommandTarget) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self
            .nodes
            .iter()
            .filter(|(id, n)| target.addresses(id) && !n.state.phase.is_terminal())
            .map(|(id, _)| id.clone())
            .collect();
        if target.addresses(AGGREGATOR_ID) && !self.aggregator.state.is_terminal() {
            out.insert(AGGREGATOR_ID.to_string());
        }
        out
    }

    fn issue(
        &mut self,
        kind: CommandKind,
        target: CommandTarget,
        origin: Origin,
        out: &mut Vec<(ACommand, BTreeSet<String>)>,
    ) {
        let recipients = self.recipients(&target);
        let command = self
            .dispatcher
            .issue(kind, target, self.tick, recipients.clone());
        let mut m = meta([
            ("kind", command.kind.to_string()),
            ("target", command.target.to_string()),
            ("nonce", command.nonce.clone()),
        ]);
        let (origin_name, extra): (&str, Vec<(&str, String)>) = match origin {
            Origin::Predicate {
                predicate_ids,
                firing_nodes,
            } => (
                "predicate",
                vec![
                    ("predicate_id", predicate_ids.join(",")),
                    ("firing_node", firing_nodes.join(",")),
                ],
            ),
            Origin::Override { operator_id, nonce } => (
                "override",
                vec![("operator_id", operator_id), ("override_nonce", nonce)],
            ),
            Origin::Liveness => ("liveness-fault", vec![]),
            Origin::Escalation { stale_nonce } => {
                ("escalation", vec![("stale_nonce", stale_nonce)])
            }
            Origin::Quorum => ("quorum-loss", vec![]),
        };
        m.insert("origin".into(), origin_name.into());
        for (k, v) in extra {
            m.insert(k.into(), v);
        }
        self.ledger
            .append(self.tick, RecordKind::Command, hash_of(&command), m)
            .expect("ledger open");
        out.push((command, recipients));
    }

    fn note(&mut self, event: &str, fields: BTreeMap<String, String>) {
        let mut m = fields;
        m.insert("event".into(), event.into());
        self.ledger
            .append(self.tick, RecordKind::StateNote, hash_of(&m), m)
            .expect("ledger open");
    }

    fn apply_to_participant(&mut self, id: &str, event: NodeEvent) {
        if id == AGGREGATOR_ID {
            if event == NodeEvent::AbortJob {
                self.aggregator.abort_commanded = true;
            }
            return;
        }
        if let Some(node) = self.nodes.get_mut(id) {
            node.state = node_step(node.state, event);
            if node.state.isolated {
                self.collector.isolate(id);
            }
        }
    }

    fn deliver(
        &mut self,
        command: &ACommand,
        recipients: &BTreeSet<String>,
        silenced: &BTreeSet<String>,
        acks: &mut Vec<Ack>,
    ) {
        for id in recipients {
            if silenced.contains(id) {
                continue;
            }
            let t = self.tick;
            let gateway = if id == AGGREGATOR_ID {
                &mut self.aggregator.gateway
            } else {
                match self.nodes.get_mut(id) {
                    Some(n) => &mut n.gateway,
                    None => continue,
                }
            };
            match gateway.receive(command, t) {
                Ok(Receipt::Fresh(ack)) => {
                    if let Some(event) = node_event_for(command, id) {
                        self.apply_to_participant(id, event);
                    }
                    self.dispatcher.acknowledge(&ack);
                    self.ledger
                        .append(
                            t,
                            RecordKind::Ack,
                            hash_of(&ack),
                            meta([
                                ("nonce", ack.nonce.clone()),
                                ("node_id", ack.node_id.clone()),
                            ]),
                        )
                        .expect("ledger open");
                    acks.push(ack);
                }
                Ok(Receipt::Duplicate) => {}
                Err(e) => tracing::warn!(participant = %id, error = %e, "command refused"),
            }
        }
    }

    /// Runs one tick. Returns `None` once the run is finished.
    pub fn step(&mut self) -> Option<&TickRecord> {
        if self.is_finished() {
            return None;
        }
        let t = self.tick;
        let silenced: BTreeSet<String> = self
            .config
            .injections
            .iter()
            .filter(|i| i.tick == t && i.kind == FaultKind::Silence)
            .map(|i| i.node_id.clone())
            .collect();

        let frames = self.data_plane(&silenced);

        // Sense
        for frame in &frames {
            self.collector.ingest_wire(&frame.wire_bytes());
        }
        for bytes in std::mem::take(&mut self.external_frames) {
            self.collector.ingest_wire(&bytes);
        }
        let sealed = self.collector.seal(t);
        self.ledger
            .append(
                t,
                RecordKind::FrameBatch,
                sealed.batch.batch_hash,
                meta([
                    ("frames", sealed.batch.frame_hashes.len().to_string()),
                    (
                        "missed",
                        sealed
                            .snapshot
                            .missed
                            .iter()
                            .cloned()
                            .collect::<Vec<_>>()
                            .join(","),
                    ),
                ]),
            )
            .expect("ledger open");
        for reject in &sealed.rejects {
            self.ledger
                .append(
                    t,
                    RecordKind::Reject,
                    reject.frame_hash,
                    meta([
                        ("node_id", reject.node_id.clone()),
                        ("seq", reject.seq.to_string()),
                        ("reason", reject.reason.to_string()),
                    ]),
                )
                .expect("ledger open");
        }

        // Predict
        let forecast = forecast(self.prev_snapshot.as_ref(), &sealed.snapshot);

        // Act
        self.dispatcher.begin_evaluate();
        let fired: Vec<FiredAction> = select_actions(
            &self.config.guardrails,
            &self.manifest,
            &sealed.snapshot,
            &forecast,
        );
        let mut outgoing: Vec<(ACommand, BTreeSet<String>)> = Vec::new();
        let mut escalations = Vec::new();

        let due = self.dispatcher.due(t);
        let resent: Vec<String> = due.resend.iter().map(|(c, _)| c.nonce.clone()).collect();
        for nonce in &resent {
            self.note("resend", meta([("nonce", nonce.clone())]));
        }
        for esc in due.escalate {
            match &esc {
                Escalation::IsolateFaulty { nonce, node_id } => {
                    self.note(
                        "ack-timeout",
                        meta([("nonce", nonce.clone()), ("node_id", node_id.clone())]),
                    );
                    let live = self
                        .nodes
                        .get(node_id)
                        .is_some_and(|n| !n.state.phase.is_terminal());
                    if live {
                        let origin = Origin::Escalation {
                            stale_nonce: nonce.clone(),
                        };
                        self.issue(
                            CommandKind::IsolateParty,
                            CommandTarget::participant(node_id),
                            origin,
                            &mut outgoing,
                        );
                    }
                }
                Escalation::ForceAbort { nonce, node_id } => {
                    self.apply_to_participant(node_id, NodeEvent::AbortJob);
                    self.note(
                        "forced-abort",
                        meta([("nonce", nonce.clone()), ("node_id", node_id.clone())]),
                    );
                }
                Escalation::ForceIsolate { nonce, node_id } => {
                    self.apply_to_participant(node_id, NodeEvent::IsolateSelf);
                    self.note(
                        "forced-isolation",
                        meta([("nonce", nonce.clone()), ("node_id", node_id.clone())]),
                    );
                }
            }
            escalations.push(esc);
        }

        for plan in plan_commands(&fired) {
            if plan.kind == CommandKind::AbortJob && self.aggregator.state.is_terminal() {
                self.note(
                    "abort-suppressed",
                    meta([("predicate_id", plan.predicate_ids.join(","))]),
                );
                continue;
            }
            let origin = Origin::Predicate {
                predicate_ids: plan.predicate_ids,
                firing_nodes: plan.firing_nodes,
            };
            self.issue(plan.kind, plan.target, origin, &mut outgoing);
        }
        let overrides = std::mem::take(&mut self.queued_overrides);
        for req in &overrides {
            if req.kind == CommandKind::AbortJob && self.aggregator.state.is_terminal() {
                self.note(
                    "abort-suppressed",
                    meta([("override_nonce", req.nonce.clone())]),
                );
                continue;
            }
            let target = if req.kind == CommandKind::AbortJob {
                CommandTarget::All
            } else {
                req.target.clone()
            };
            let origin = Origin::Override {
                operator_id: req.operator_id.clone(),
                nonce: req.nonce.clone(),
            };
            self.issue(req.kind, target, origin, &mut outgoing);
        }
        for id in &sealed.liveness_faults {
            let live = self
                .nodes
                .get(id)
                .is_some_and(|n| !n.state.phase.is_terminal());
            self.note("liveness-fault", meta([("node_id", id.clone())]));
            if live {
                self.issue(
                    CommandKind::IsolateParty,
                    CommandTarget::participant(id),
                    Origin::Liveness,
                    &mut outgoing,
                );
            }
        }

        let mut acks = Vec::new();
        for (command, recipients) in &due.resend {
            self.deliver(command, recipients, &silenced, &mut acks);
        }
        for (command, recipients) in &outgoing {
            self.deliver(command, recipients, &silenced, &mut acks);
        }

        let before = self.aggregator.state;
        let view = {
            let active: Vec<(&String, &NodeRuntime)> = self
                .nodes
                .iter()
                .filter(|(_, n)| !n.state.isolated)
                .collect();
            let all_reported = active
                .iter()
                .all(|(id, _)| sealed.snapshot.frames.contains_key(*id));
            AggregatorView {
                non_isolated: active.len(),
                quorum: self.config.quorum,
                shares_complete: active.iter().all(|(_, n)| n.share_sent),
                finalize_guard: all_reported
                    && finalize_guard(
                        active.iter().map(|(_, n)| &n.state),
                        &self.config.s_ok,
                        !fired.is_empty(),
                    ),
                abort_commanded: self.aggregator.abort_commanded,
            }
        };
        self.aggregator.state = aggregator_step(before, &view);
        if self.aggregator.state != before {
            self.note(
                "aggregator",
                meta([
                    ("from", before.to_string()),
                    ("to", self.aggregator.state.to_string()),
                ]),
            );
        }
        if self.aggregator.state == AggregatorState::Aborted
            && before != AggregatorState::Aborted
            && !view.abort_commanded
        {
            let mut quorum_cmds = Vec::new();
            self.issue(
                CommandKind::AbortJob,
                CommandTarget::All,
                Origin::Quorum,
                &mut quorum_cmds,
            );
            for (command, recipients) in &quorum_cmds {
                self.deliver(command, recipients, &silenced, &mut acks);
            }
            outgoing.extend(quorum_cmds);
        }

        let terminal: Vec<String> = self
            .nodes
            .iter()
            .filter(|(_, n)| n.state.phase.is_terminal())
            .map(|(id, _)| id.clone())
            .collect();
        for id in &terminal {
            self.collector.retire(id);
            self.dispatcher.forget_participant(id);
        }
        if self.aggregator.state.is_terminal() {
            self.collector.retire(AGGREGATOR_ID);
            self.dispatcher.forget_participant(AGGREGATOR_ID);
        }
        self.dispatcher.settle();

        // Prove
        self.ledger
            .commit(false)
            .expect("every tick appends a frame batch");
        let ledger_root = self.ledger.last_root();

        let safety_ok = check_safety(
            self.nodes.values().map(|n| &n.state),
            self.aggregator.state,
            &self.config.s_ok,
            !fired.is_empty(),
        );
        if !safety_ok {
            tracing::error!(tick = t, "safety invariant violated");
        }
        let control = self.dispatcher.state();
        let in_flight = self
            .dispatcher
            .in_flight()
            .map(|f| InFlightView {
                nonce: f.command.nonce.clone(),
                kind: f.command.kind,
                target: f.command.target.clone(),
                awaiting: f.awaiting.iter().cloned().collect(),
            })
            .collect();
        let nodes = self.node_views();
        let world_digest = hash_of(&(
            t,
            &nodes,
            self.aggregator.state,
            &control,
            self.nodes
                .values()
                .map(|n| (n.ep_state, n.seq))
                .collect::<Vec<_>>(),
            self.aggregator.seq,
            ledger_root,
        ));
        let record = TickRecord {
            tick: t,
            world_digest,
            silenced: silenced.into_iter().collect(),
            nodes,
            aggregator: self.aggregator.state,
            control,
            snapshot: sealed.snapshot.clone(),
            forecast,
            fired,
            overrides,
            commands: outgoing.into_iter().map(|(c, _)| c).collect(),
            resent,
            acks,
            rejects: sealed.rejects,
            liveness_faults: sealed.liveness_faults,
            escalations,
            in_flight,
            mu: self.mu(),
            safety_ok,
            ledger_root,
        };
        self.prev_snapshot = Some(sealed.snapshot);
        self.records.push(record);
        self.tick += 1;
        if self.is_finished() {
            self.close();
        }
        self.records.last()
    }

    /// Writes the job-end block. Idempotent.
    pub fn close(&mut self) {
        if self.closed {
            return;
        }
        let verdict = serde_json::to_value(self.verdict()).expect("verdicts serialize");
        let m = meta([
            ("event", "end-of-job".to_string()),
            ("verdict", verdict.as_str().unwrap_or_default().to_string()),
            ("final_mu", self.mu().to_string()),
        ]);
        let tick = self.records.last().map_or(0, |r| r.tick);
        self.ledger
            .append(tick, RecordKind::StateNote, hash_of(&m), m)
            .expect("ledger open until close");
        self.ledger.commit(true).expect("ledger open until close");
        self.closed = true;
    }

    pub fn verdict(&self) -> Verdict {
        match self.aggregator.state {
            AggregatorState::Finalize if self.is_terminal() => Verdict::Finalize,
            AggregatorState::Aborted if self.is_terminal() => Verdict::Aborted,
            _ => Verdict::MaxTicksExceeded,
        }
    }

    pub fn run_to_end(&mut self) {
        while self.step().is_some() {}
        self.close();
    }

    fn header(config: &SimConfig, manifest: Option<&Manifest>) -> TraceHeader {
        let predicates = manifest
            .map(|m| {
                config
                    .guardrails
                    .predicates
                    .iter()
                    .filter(|p| m.predicates.contains(&p.id))
                    .map(|p| PredicateInfo {
                        id: p.id.clone(),
                        kind: p.action,
                    })
                    .collect()
            })
            .unwrap_or_default();
        TraceHeader {
            scenario: config.scenario,
            n_nodes: config.n_nodes,
            seed: config.seed,
            job_id: config.job_id.clone(),
            ep_id: config.ep_id.clone(),
            plugin: config.plugin.name.clone(),
            manifest_hash: manifest.map(manifest_hash),
            guardrails_hash: config.guardrails.source_hash,
            quorum: config.quorum,
            max_ticks: config.max_ticks,
            s_ok: config.s_ok.clone(),
            injections: config.injections.clone(),
            predicates,
        }
    }

    pub fn trace(&self) -> Trace {
        Trace {
            header: Self::header(&self.config, Some(&self.manifest)),
            admission: self.admission.clone(),
            initial: Some(self.initial.clone()),
            ticks: self.records.clone(),
            verdict: self.verdict(),
            final_mu: self.mu(),
            ledger_root: self.ledger.last_root(),
        }
    }
}

/// Runs a job to completion. An admission rejection is not an error: it
/// yields a trace with no ticks and a ledger holding the rejection.
pub fn run_scenario(config: SimConfig) -> Result<ScenarioRun, SimError> {
    match Simulation::new(config.clone()) {
        Ok(mut sim) => {
            sim.run_to_end();
            Ok(ScenarioRun {
                trace: sim.trace(),
                ledger: sim.ledger.clone(),
            })
        }
        Err(SimError::Rejected { result, manifest }) => {
            let mut ledger = Ledger::new();
            let mut m = meta([
                ("verdict", "rejected".to_string()),
                ("job_id", config.job_id.clone()),
            ]);
            m.insert(
                "reasons".into(),
                result
                    .reasons
                    .iter()
                    .map(|r| r.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            );
            ledger
                .append(0, RecordKind::Admission, hash_of(&result), m)
                .expect("fresh ledger");
            ledger.commit(true).expect("fresh ledger");
            let trace = Trace {
                header: Simulation::header(&config, manifest.as_deref()),
                admission: result,
                initial: None,
                ticks: Vec::new(),
                verdict: Verdict::AdmissionRejected,
                final_mu: 0,
                ledger_root: ledger.last_root(),
            };
            Ok(ScenarioRun { trace, ledger })
        }
        Err(e) => Err(e),
    }
}
