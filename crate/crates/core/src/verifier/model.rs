//! Abstract transition relation over the synchronous FSM product.
//!
//! Metric dynamics are replaced by nondeterministic fire choices, bounded by
//! per-predicate budgets. Silence and delivery delays become "may stall"
//! choices. One abstract step mirrors one simulator tick: data plane, fires
//! and overrides, environment isolation, aggregator step, pending delivery.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::fsm::{
    aggregator_step, check_safety, finalize_guard, mu, AggregatorState, AggregatorView,
    CommandKind, ControlPhase, NodePhase, NodeState, SafeSet,
};

/// A deliberate defect in the transition table, used to show the checker is
/// not vacuous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Nodes may fall back from INF to PREF.
    InfToPref,
    /// MERGE→FINALIZE ignores predicates fired in the same tick.
    FinalizeIgnoresFires,
}

impl Mutation {
    pub const ALL: [Mutation; 2] = [Mutation::InfToPref, Mutation::FinalizeIgnoresFires];

    pub fn as_str(self) -> &'static str {
        match self {
            Mutation::InfToPref => "inf-to-pref",
            Mutation::FinalizeIgnoresFires => "finalize-ignores-fires",
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mutation::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown mutation {s:?} (expected inf-to-pref or finalize-ignores-fires)")
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct AbsNode {
    pub phase: NodePhase,
    pub isolated: bool,
    pub share_sent: bool,
}

impl AbsNode {
    pub const INITIAL: AbsNode = AbsNode {
        phase: NodePhase::Idle,
        isolated: false,
        share_sent: false,
    };

    fn state(self) -> NodeState {
        NodeState {
            phase: self.phase,
            isolated: self.isolated,
            bootstrap_pending: false,
        }
    }

    fn live(self) -> bool {
        !self.phase.is_terminal()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct AbstractWorld {
    pub nodes: Vec<AbsNode>,
    pub aggregator: AggregatorState,
    pub control: ControlPhase,
    /// Command kinds issued but not yet acknowledged by every recipient.
    pub pending: BTreeSet<CommandKind>,
    /// Which predicates fired in the step that produced this world.
    pub fired: Vec<bool>,
    pub budgets: Vec<u8>,
    pub overrides_left: u8,
}

impl AbstractWorld {
    pub fn initial(n_nodes: usize, fire_budgets: Vec<u8>, overrides: u8) -> Self {
        Self {
            nodes: vec![AbsNode::INITIAL; n_nodes],
            aggregator: AggregatorState::Wait,
            control: ControlPhase::Ready,
            pending: BTreeSet::new(),
            fired: vec![false; fire_budgets.len()],
            budgets: fire_budgets,
            overrides_left: overrides,
        }
    }

    pub fn mu(&self) -> u32 {
        mu(self.nodes.iter().map(|n| n.phase), self.aggregator)
    }

    pub fn any_fired(&self) -> bool {
        self.fired.iter().any(|f| *f)
    }

    pub fn is_safe(&self, s_ok: &SafeSet) -> bool {
        let nodes: Vec<NodeState> = self.nodes.iter().map(|n| n.state()).collect();
        check_safety(&nodes, self.aggregator, s_ok, self.any_fired())
    }

    pub fn is_terminal(&self) -> bool {
        self.aggregator.is_terminal() && self.nodes.iter().all(|n| !n.live())
    }

    pub fn observation(&self) -> Observation {
        Observation {
            nodes: self.nodes.clone(),
            aggregator: self.aggregator,
            fired: self.fired.clone(),
        }
    }
}

impl fmt::Display for AbstractWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes: Vec<String> = self
            .nodes
            .iter()
            .map(|n| {
                format!(
                    "{}{}{}",
                    n.phase,
                    if n.isolated { "/iso" } else { "" },
                    if n.share_sent { "+s" } else { "" }
                )
            })
            .collect();
        let pending: Vec<&str> = self.pending.iter().map(|k| k.as_str()).collect();
        let fired: Vec<String> = self
            .fired
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(|(i, _)| format!("p{}", i + 1))
            .collect();
        write!(
            f,
            "[{}] agg={} ctl={:?} pending={{{}}} fired={{{}}} mu={}",
            nodes.join(", "),
            self.aggregator,
            self.control,
            pending.join(","),
            fired.join(","),
            self.mu()
        )
    }
}

/// The observable part of a world, as recorded in a simulator trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub nodes: Vec<AbsNode>,
    pub aggregator: AggregatorState,
    pub fired: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Model {
    /// Command kind bound to each predicate, in predicate order.
    pub predicates: Vec<CommandKind>,
    pub quorum: usize,
    pub s_ok: SafeSet,
    pub mutation: Option<Mutation>,
}

/// Largest node and predicate counts the packed representation holds.
pub const MAX_NODES: usize = 8;
pub const MAX_PREDICATES: usize = 8;

const PEND_BOOTSTRAP: u8 = 1;
const PEND_ABORT: u8 = 2;
const PEND_ISOLATE: u8 = 4;

fn pending_bit(kind: CommandKind) -> u8 {
    match kind {
        CommandKind::Bootstrap => PEND_BOOTSTRAP,
        CommandKind::AbortJob => PEND_ABORT,
        CommandKind::IsolateParty => PEND_ISOLATE,
    }
}

/// Fixed-size copy of a world used on the exploration hot path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct Packed {
    nodes: [AbsNode; MAX_NODES],
    n_nodes: u8,
    aggregator: AggregatorState,
    pending: u8,
    fired: u8,
    budgets: [u8; MAX_PREDICATES],
    n_predicates: u8,
    overrides_left: u8,
}

impl Packed {
    pub(crate) fn pack(w: &AbstractWorld) -> Self {
        assert!(w.nodes.len() <= MAX_NODES && w.budgets.len() <= MAX_PREDICATES);
        let mut nodes = [AbsNode::INITIAL; MAX_NODES];
        nodes[..w.nodes.len()].copy_from_slice(&w.nodes);
        let mut budgets = [0; MAX_PREDICATES];
        budgets[..w.budgets.len()].copy_from_slice(&w.budgets);
        Self {
            nodes,
            n_nodes: w.nodes.len() as u8,
            aggregator: w.aggregator,
            pending: w.pending.iter().fold(0, |acc, k| acc | pending_bit(*k)),
            fired: w
                .fired
                .iter()
                .enumerate()
                .fold(0, |acc, (i, f)| acc | (u8::from(*f) << i)),
            budgets,
            n_predicates: w.budgets.len() as u8,
            overrides_left: w.overrides_left,
        }
    }

    pub(crate) fn unpack(&self) -> AbstractWorld {
        let pending: BTreeSet<CommandKind> = [
            CommandKind::Bootstrap,
            CommandKind::AbortJob,
            CommandKind::IsolateParty,
        ]
        .into_iter()
        .filter(|k| self.pending & pending_bit(*k) != 0)
        .collect();
        AbstractWorld {
            nodes: self.nodes().to_vec(),
            aggregator: self.aggregator,
            control: if pending.is_empty() {
                ControlPhase::Ready
            } else {
                ControlPhase::Dispatch
            },
            pending,
            fired: (0..self.n_predicates)
                .map(|i| self.fired & (1 << i) != 0)
                .collect(),
            budgets: self.budgets[..self.n_predicates as usize].to_vec(),
            overrides_left: self.overrides_left,
        }
    }

    pub(crate) fn nodes(&self) -> &[AbsNode] {
        &self.nodes[..self.n_nodes as usize]
    }

    fn states(&self) -> impl Iterator<Item = NodeState> + '_ {
        self.nodes().iter().map(|n| n.state())
    }

    pub(crate) fn mu(&self) -> u32 {
        mu(self.nodes().iter().map(|n| n.phase), self.aggregator)
    }

    pub(crate) fn is_safe(&self, s_ok: &SafeSet) -> bool {
        check_safety(
            &self.states().collect::<Vec<_>>(),
            self.aggregator,
            s_ok,
            self.fired != 0,
        )
    }

    pub(crate) fn is_terminal(&self) -> bool {
        self.aggregator.is_terminal() && self.nodes().iter().all(|n| !n.live())
    }

    fn any_live(&self) -> bool {
        self.nodes().iter().any(|n| n.live())
    }

    fn has(&self, bit: u8) -> bool {
        self.pending & bit != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PackedObservation {
    nodes: [AbsNode; MAX_NODES],
    aggregator: AggregatorState,
    fired: u8,
}

impl PackedObservation {
    pub(crate) fn pack(o: &Observation) -> Self {
        let mut nodes = [AbsNode::INITIAL; MAX_NODES];
        nodes[..o.nodes.len()].copy_from_slice(&o.nodes);
        Self {
            nodes,
            aggregator: o.aggregator,
            fired: o
                .fired
                .iter()
                .enumerate()
                .fold(0, |acc, (i, f)| acc | (u8::from(*f) << i)),
        }
    }

    fn matches(&self, p: &Packed) -> bool {
        p.nodes == self.nodes && p.aggregator == self.aggregator && p.fired == self.fired
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Partial {
    world: Packed,
    abort_commanded: bool,
}

/// Iterates the sub-masks of `mask`, including zero.
fn submasks(mask: u32) -> impl Iterator<Item = u32> {
    let mut next = Some(mask);
    std::iter::from_fn(move || {
        let cur = next?;
        next = if cur == 0 {
            None
        } else {
            Some((cur - 1) & mask)
        };
        Some(cur)
    })
}

fn dedup(items: &mut Vec<Partial>) {
    let mut seen = std::collections::HashSet::with_capacity(items.len());
    items.retain(|p| seen.insert(*p));
}

impl Model {
    fn data_plane_options(&self, node: AbsNode, agg: AggregatorState, out: &mut Vec<AbsNode>) {
        use NodePhase::*;
        out.clear();
        out.push(node);
        let with = |phase| AbsNode { phase, ..node };
        match node.phase {
            Idle => out.push(with(Pref)),
            Pref => out.push(with(Inf)),
            Inf => {
                if node.share_sent {
                    out.push(with(Postf));
                } else {
                    out.push(AbsNode {
                        share_sent: true,
                        ..node
                    });
                }
                if self.mutation == Some(Mutation::InfToPref) {
                    out.push(with(Pref));
                }
            }
            Postf if agg == AggregatorState::Finalize => out.push(with(Done)),
            Postf | Done | Aborted => {}
        }
    }

    /// Every world reachable in one step. With `target`, only successors
    /// matching that observation are kept.
    pub fn successors(
        &self,
        w: &AbstractWorld,
        target: Option<&Observation>,
    ) -> Vec<AbstractWorld> {
        let target = target.map(PackedObservation::pack);
        self.step(&Packed::pack(w), target.as_ref())
            .iter()
            .map(Packed::unpack)
            .collect()
    }

    pub(crate) fn step(&self, w: &Packed, target: Option<&PackedObservation>) -> Vec<Packed> {
        let agg_start = w.aggregator;
        let n = w.n_nodes as usize;
        let mut base = *w;
        base.fired = 0;

        // Data plane.
        let mut stage = vec![Partial {
            world: base,
            abort_commanded: false,
        }];
        let mut options = Vec::with_capacity(4);
        for i in 0..n {
            self.data_plane_options(w.nodes[i], agg_start, &mut options);
            let mut next = Vec::with_capacity(stage.len() * options.len());
            for opt in &options {
                if let Some(t) = target {
                    let goal = t.nodes[i];
                    let phase_ok =
                        opt.phase == goal.phase || (goal.phase == NodePhase::Aborted && opt.live());
                    if !phase_ok
                        || opt.share_sent != goal.share_sent
                        || (opt.isolated && !goal.isolated)
                    {
                        continue;
                    }
                }
                for p in &stage {
                    let mut q = *p;
                    q.world.nodes[i] = *opt;
                    next.push(q);
                }
            }
            stage = next;
        }

        // Predicate fires and operator overrides.
        let mut next = Vec::new();
        for p in &stage {
            let eligible = agg_start != AggregatorState::Finalize
                && p.world
                    .nodes()
                    .iter()
                    .any(|n| !n.isolated && matches!(n.phase, NodePhase::Inf | NodePhase::Postf));
            let armed: u32 = if eligible {
                (0..self.predicates.len())
                    .filter(|&k| p.world.budgets[k] > 0)
                    .fold(0, |acc, k| acc | (1 << k))
            } else {
                0
            };
            for chosen in submasks(armed) {
                if target.is_some_and(|t| u32::from(t.fired) != chosen) {
                    continue;
                }
                let mut q = *p;
                let mut kinds = [None; MAX_PREDICATES + 1];
                for (k, kind) in self.predicates.iter().enumerate() {
                    if chosen & (1 << k) != 0 {
                        q.world.budgets[k] -= 1;
                        q.world.fired |= 1 << k;
                        kinds[k] = Some(*kind);
                    }
                }
                self.issue(q, &kinds, &mut next);
                if q.world.overrides_left > 0 && !agg_start.is_terminal() {
                    const KINDS: [CommandKind; 3] = [
                        CommandKind::Bootstrap,
                        CommandKind::AbortJob,
                        CommandKind::IsolateParty,
                    ];
                    for set in 1u32..8 {
                        let cost = set.count_ones() as u8;
                        if cost > q.world.overrides_left {
                            continue;
                        }
                        let mut o = q;
                        o.world.overrides_left -= cost;
                        let mut ks = [None; MAX_PREDICATES + 3];
                        ks[..MAX_PREDICATES + 1].copy_from_slice(&kinds);
                        for (j, kind) in KINDS.iter().enumerate() {
                            if set & (1 << j) != 0 {
                                ks[MAX_PREDICATES + j] = Some(*kind);
                            }
                        }
                        self.issue(o, &ks, &mut next);
                    }
                }
            }
        }
        dedup(&mut next);
        let stage = next;

        // Environment isolation: liveness faults and escalated time-outs.
        let mut next = Vec::new();
        for p in &stage {
            let candidates: u32 = (0..n)
                .filter(|&i| !p.world.nodes[i].isolated && p.world.nodes[i].live())
                .fold(0, |acc, i| acc | (1 << i));
            for chosen in submasks(candidates) {
                if let Some(t) = target {
                    let wanted = (0..n)
                        .filter(|&i| t.nodes[i].isolated)
                        .fold(0u32, |acc, i| acc | (1 << i));
                    if chosen != wanted & candidates {
                        continue;
                    }
                }
                let mut q = *p;
                for i in 0..n {
                    if chosen & (1 << i) != 0 {
                        q.world.nodes[i].phase = NodePhase::Aborted;
                        q.world.nodes[i].isolated = true;
                    }
                }
                next.push(q);
            }
        }
        dedup(&mut next);
        let stage = next;

        // Aggregator step.
        let mut next = Vec::new();
        for p in &stage {
            let mut p = *p;
            let nodes: Vec<NodeState> = p.world.states().collect();
            let active = || p.world.nodes().iter().filter(|n| !n.isolated);
            let fired_for_guard =
                self.mutation != Some(Mutation::FinalizeIgnoresFires) && p.world.fired != 0;
            let view = AggregatorView {
                non_isolated: active().count(),
                quorum: self.quorum,
                shares_complete: active().all(|n| n.share_sent),
                finalize_guard: finalize_guard(&nodes, &self.s_ok, fired_for_guard),
                abort_commanded: p.abort_commanded,
            };
            let before = p.world.aggregator;
            let after = aggregator_step(before, &view);
            if after == AggregatorState::Finalize && before != after {
                // The guard also needs a frame from every node this tick.
                next.push(p);
            }
            p.world.aggregator = after;
            if after == AggregatorState::Aborted && before != after && p.world.any_live() {
                p.world.pending |= PEND_ABORT;
            }
            next.push(p);
        }
        dedup(&mut next);
        let stage = next;

        // Delivery of pending commands.
        let mut out: Vec<Packed> = Vec::new();
        for p in &stage {
            let w0 = p.world;
            let mut worlds: Vec<Packed> = Vec::with_capacity(8);
            if w0.has(PEND_ABORT) {
                let live: u32 = (0..n)
                    .filter(|&i| w0.nodes[i].live())
                    .fold(0, |acc, i| acc | (1 << i));
                for chosen in submasks(live) {
                    if let Some(t) = target {
                        let wanted = (0..n)
                            .filter(|&i| {
                                t.nodes[i].phase == NodePhase::Aborted && !t.nodes[i].isolated
                            })
                            .fold(0u32, |acc, i| acc | (1 << i));
                        if chosen != wanted & live {
                            continue;
                        }
                    }
                    let mut w = w0;
                    for i in 0..n {
                        if chosen & (1 << i) != 0 {
                            w.nodes[i].phase = NodePhase::Aborted;
                        }
                    }
                    if !w.any_live() {
                        w.pending &= !PEND_ABORT;
                    }
                    worlds.push(w);
                }
            } else {
                worlds.push(w0);
            }
            for bit in [PEND_BOOTSTRAP, PEND_ISOLATE] {
                for k in 0..worlds.len() {
                    if worlds[k].has(bit) {
                        let mut settled = worlds[k];
                        settled.pending &= !bit;
                        worlds.push(settled);
                    }
                }
            }
            out.extend(
                worlds
                    .into_iter()
                    .filter(|w| target.is_none_or(|t| t.matches(w))),
            );
        }
        let mut seen = std::collections::HashSet::with_capacity(out.len());
        out.retain(|w| seen.insert(*w));
        out
    }

    /// Applies the commands issued this tick. Bootstrap and isolate commands
    /// may be acknowledged at once or stay pending.
    fn issue(&self, mut p: Partial, kinds: &[Option<CommandKind>], out: &mut Vec<Partial>) {
        let any_live = p.world.any_live();
        let mut may_pend = 0u8;
        for kind in kinds.iter().flatten() {
            match kind {
                CommandKind::AbortJob => {
                    if !p.world.aggregator.is_terminal() {
                        p.abort_commanded = true;
                        if any_live {
                            p.world.pending |= PEND_ABORT;
                        }
                    }
                }
                CommandKind::Bootstrap | CommandKind::IsolateParty if any_live => {
                    may_pend |= pending_bit(*kind)
                }
                CommandKind::Bootstrap | CommandKind::IsolateParty => {}
            }
        }
        for extra in submasks(u32::from(may_pend)) {
            let mut q = p;
            q.world.pending |= extra as u8;
            out.push(q);
        }
    }
}
