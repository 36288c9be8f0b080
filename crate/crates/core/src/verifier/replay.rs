//! Post-hoc checking of recorded traces. Ranks and the safety predicate are
//! recomputed from the recorded state names so that the simulator's own
//! bookkeeping is not trusted.

use std::collections::{BTreeSet, HashSet};

use super::model::{AbsNode, AbstractWorld, Model, Observation, Packed, PackedObservation};
use super::{CheckReport, Counterexample, Divergence, Liveness};
use crate::fsm::{AggregatorState, ControlPhase, NodePhase};
use crate::simulator::{NodeView, TickRecord, Trace, Verdict};

const NODE_RANKS: [(&str, u32); 6] = [
    ("IDLE", 3),
    ("PREF", 2),
    ("INF", 1),
    ("POSTF", 0),
    ("DONE", 0),
    ("ABORTED", 0),
];
const AGGREGATOR_RANKS: [(&str, u32); 4] =
    [("WAIT", 2), ("MERGE", 1), ("FINALIZE", 0), ("ABORTED", 0)];

fn lookup(table: &[(&str, u32)], name: &str) -> u32 {
    table
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, r)| *r)
        .unwrap_or_else(|| panic!("unranked state {name}"))
}

fn recompute_mu(nodes: &[NodeView], aggregator: AggregatorState) -> u32 {
    nodes
        .iter()
        .map(|n| lookup(&NODE_RANKS, &n.phase.to_string()))
        .sum::<u32>()
        + lookup(&AGGREGATOR_RANKS, &aggregator.to_string())
}

fn recompute_safety(trace: &Trace, tick: &TickRecord) -> bool {
    if tick.aggregator.to_string() != "FINALIZE" {
        return true;
    }
    let allowed: Vec<String> = trace
        .header
        .s_ok
        .0
        .iter()
        .map(|p| p.to_string())
        .chain(["DONE".to_string()])
        .collect();
    tick.fired.is_empty()
        && tick
            .nodes
            .iter()
            .filter(|n| !n.isolated)
            .all(|n| allowed.contains(&n.phase.to_string()))
}

fn abs_nodes(nodes: &[NodeView]) -> Vec<AbsNode> {
    nodes
        .iter()
        .map(|n| AbsNode {
            phase: n.phase,
            isolated: n.isolated,
            share_sent: n.share_sent,
        })
        .collect()
}

fn project(nodes: &[NodeView], aggregator: AggregatorState, fired: Vec<bool>) -> AbstractWorld {
    AbstractWorld {
        nodes: abs_nodes(nodes),
        aggregator,
        control: ControlPhase::Ready,
        pending: Default::default(),
        fired,
        budgets: Vec::new(),
        overrides_left: 0,
    }
}

fn fired_flags(trace: &Trace, tick: &TickRecord) -> Vec<bool> {
    trace
        .header
        .predicates
        .iter()
        .map(|p| tick.fired.iter().any(|f| f.predicate_id == p.id))
        .collect()
}

/// Replays μ, the safety predicate, and the abstract transition relation over
/// a recorded trace.
pub fn check_trace(trace: &Trace) -> CheckReport {
    let mut report = CheckReport {
        explored_states: 0,
        transitions: 0,
        complete: true,
        safety_violation_count: 0,
        safety_violations: Vec::new(),
        monotonicity_violation_count: 0,
        monotonicity_violations: Vec::new(),
        liveness: Liveness::Ok { steps_to_zero: 0 },
        max_mu: 0,
        divergences: Vec::new(),
    };
    let Some(initial) = &trace.initial else {
        return report;
    };
    let no_fires = vec![false; trace.header.predicates.len()];
    let mut path = vec![project(
        &initial.nodes,
        initial.aggregator,
        no_fires.clone(),
    )];
    let mut prev_mu = recompute_mu(&initial.nodes, initial.aggregator);
    if prev_mu != initial.mu {
        report.divergences.push(Divergence {
            tick: None,
            detail: format!(
                "initial mu recorded {} but recomputed {prev_mu}",
                initial.mu
            ),
        });
    }
    report.max_mu = prev_mu;
    report.explored_states = 1;
    let mut first_zero = (prev_mu == 0).then_some(0u32);

    for (step, tick) in trace.ticks.iter().enumerate() {
        let world = project(&tick.nodes, tick.aggregator, fired_flags(trace, tick));
        path.push(world);
        report.explored_states += 1;
        report.transitions += 1;

        let m = recompute_mu(&tick.nodes, tick.aggregator);
        report.max_mu = report.max_mu.max(m);
        if m != tick.mu {
            report.divergences.push(Divergence {
                tick: Some(tick.tick),
                detail: format!("mu recorded {} but recomputed {m}", tick.mu),
            });
        }
        if m > prev_mu {
            report.monotonicity_violation_count += 1;
            report.monotonicity_violations.push(Counterexample {
                description: format!("mu rises from {prev_mu} to {m} at tick {}", tick.tick),
                path: path.clone(),
            });
        }
        if m == 0 && first_zero.is_none() {
            first_zero = Some(step as u32 + 1);
        }
        prev_mu = m;

        let safe = recompute_safety(trace, tick);
        if safe != tick.safety_ok {
            report.divergences.push(Divergence {
                tick: Some(tick.tick),
                detail: format!("safety recorded {} but recomputed {safe}", tick.safety_ok),
            });
        }
        if !safe {
            report.safety_violation_count += 1;
            report.safety_violations.push(Counterexample {
                description: format!(
                    "FINALIZE with unsafe nodes or a fired predicate at tick {}",
                    tick.tick
                ),
                path: path.clone(),
            });
        }
    }

    if let Some(d) = replay_relation(trace) {
        report.divergences.push(d);
    }

    report.liveness = match (trace.verdict, first_zero) {
        (Verdict::Finalize | Verdict::Aborted, Some(steps)) if prev_mu == 0 => Liveness::Ok {
            steps_to_zero: steps,
        },
        _ => Liveness::Inconclusive {
            frontier: path.last().cloned().into_iter().collect(),
        },
    };
    report
}

/// Steps the set of abstract worlds consistent with the trace so far; the
/// trace leaves the relation when that set becomes empty.
fn replay_relation(trace: &Trace) -> Option<Divergence> {
    let initial = trace.initial.as_ref()?;
    let model = Model {
        predicates: trace.header.predicates.iter().map(|p| p.kind).collect(),
        quorum: trace.header.quorum,
        s_ok: trace.header.s_ok.clone(),
        mutation: None,
    };
    let budgets: Vec<u8> = trace
        .header
        .predicates
        .iter()
        .map(|p| {
            let n = trace
                .ticks
                .iter()
                .filter(|t| t.fired.iter().any(|f| f.predicate_id == p.id))
                .count();
            u8::try_from(n).unwrap_or(u8::MAX)
        })
        .collect();
    let overrides: usize = trace
        .ticks
        .iter()
        .map(|t| {
            t.overrides
                .iter()
                .map(|o| o.kind)
                .collect::<BTreeSet<_>>()
                .len()
        })
        .sum();
    let start = AbstractWorld::initial(
        initial.nodes.len(),
        budgets,
        u8::try_from(overrides).unwrap_or(u8::MAX),
    );
    if start.observation()
        != project(&initial.nodes, initial.aggregator, start.fired.clone()).observation()
    {
        return Some(Divergence {
            tick: None,
            detail: "initial state is not all IDLE with WAIT".into(),
        });
    }
    if initial.nodes.len() > super::model::MAX_NODES
        || model.predicates.len() > super::model::MAX_PREDICATES
    {
        return Some(Divergence {
            tick: None,
            detail: "trace is too large for the abstract model".into(),
        });
    }
    let mut candidates = vec![Packed::pack(&start)];
    for tick in &trace.ticks {
        let target = PackedObservation::pack(&Observation {
            nodes: abs_nodes(&tick.nodes),
            aggregator: tick.aggregator,
            fired: fired_flags(trace, tick),
        });
        let mut next = Vec::new();
        let mut seen = HashSet::new();
        for c in &candidates {
            for s in model.step(c, Some(&target)) {
                if seen.insert(s) {
                    next.push(s);
                }
            }
        }
        if next.is_empty() {
            return Some(Divergence {
                tick: Some(tick.tick),
                detail: format!(
                    "step to [{}] agg={} is outside the abstract relation",
                    tick.nodes
                        .iter()
                        .map(|n| phase_label(n.phase, n.isolated))
                        .collect::<Vec<_>>()
                        .join(", "),
                    tick.aggregator
                ),
            });
        }
        candidates = next;
    }
    None
}

fn phase_label(phase: NodePhase, isolated: bool) -> String {
    if isolated {
        format!("{phase}/iso")
    } else {
        phase.to_string()
    }
}

/// Parses a trace and checks it.
pub fn check_trace_json(bytes: &[u8]) -> Result<CheckReport, serde_json::Error> {
    Ok(check_trace(&Trace::from_json(bytes)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{run_scenario, Scenario, SimConfig};

    #[test]
    fn shipped_scenarios_replay_cleanly() {
        for s in [Scenario::A, Scenario::B, Scenario::C, Scenario::None] {
            let run = run_scenario(SimConfig::scenario(s, 3, 42)).unwrap();
            let r = check_trace(&run.trace);
            assert!(r.is_ok(), "{s}: {r}");
        }
    }

    #[test]
    fn edited_node_state_is_flagged() {
        let mut trace = run_scenario(SimConfig::scenario(Scenario::None, 3, 42))
            .unwrap()
            .trace;
        trace.ticks[4].nodes[0].phase = NodePhase::Idle;
        let r = check_trace(&trace);
        assert!(r.monotonicity_violation_count > 0);
        assert!(!r.divergences.is_empty());
    }

    #[test]
    fn rejected_trace_is_vacuously_ok() {
        let mut c = SimConfig::new(crate::ep::EP_MPC, crate::simulator::fhe_pipeline(), 3, 1);
        c.scenario = Scenario::None;
        let trace = run_scenario(c).unwrap().trace;
        let r = check_trace(&trace);
        assert!(r.is_ok());
        assert_eq!(r.explored_states, 0);
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(check_trace_json(b"{\"header\":").is_err());
    }
}
