use std::collections::BTreeMap;

use guardian_core::digest::Digest;
use guardian_core::fsm::{AggregatorState, NodePhase};
use guardian_core::simulator::{NodeView, Simulation, Verdict};
use guardian_core::telemetry::{AlignedSnapshot, MetricKey};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub id: String,
    pub state: NodePhase,
    pub isolated: bool,
    /// Non-null metrics from the node's frame this tick; empty when it sent none.
    pub metrics: BTreeMap<String, f64>,
}

/// Read-only projection of the live job published once per tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshotView {
    pub job_id: String,
    /// Last completed tick; `None` before the first one.
    pub tick: Option<u64>,
    pub nodes: Vec<NodeSnapshot>,
    pub aggregator: AggregatorState,
    pub mu: u32,
    pub fired: Vec<String>,
    pub ledger_root: Digest,
    pub finished: bool,
    pub verdict: Option<Verdict>,
}

fn project_nodes(nodes: &[NodeView], snapshot: Option<&AlignedSnapshot>) -> Vec<NodeSnapshot> {
    nodes
        .iter()
        .map(|n| {
            let frame = snapshot.and_then(|s| s.frames.get(&n.id));
            let metrics = MetricKey::ALL
                .iter()
                .filter_map(|k| {
                    frame
                        .and_then(|f| f.metric(*k))
                        .map(|v| (k.as_str().to_string(), v))
                })
                .collect();
            NodeSnapshot {
                id: n.id.clone(),
                state: n.phase,
                isolated: n.isolated,
                metrics,
            }
        })
        .collect()
}

impl StateSnapshotView {
    pub fn of(sim: &Simulation) -> Self {
        let finished = sim.is_finished();
        let common = |tick, nodes, aggregator, fired| StateSnapshotView {
            job_id: sim.config().job_id.clone(),
            tick,
            nodes,
            aggregator,
            mu: sim.mu(),
            fired,
            ledger_root: sim.ledger().last_root(),
            finished,
            verdict: finished.then(|| sim.verdict()),
        };
        match sim.last_record() {
            Some(r) => common(
                Some(r.tick),
                project_nodes(&r.nodes, Some(&r.snapshot)),
                r.aggregator,
                r.fired.iter().map(|f| f.predicate_id.clone()).collect(),
            ),
            None => {
                let init = sim.initial();
                common(
                    None,
                    project_nodes(&init.nodes, None),
                    init.aggregator,
                    Vec::new(),
                )
            }
        }
    }
}
