use std::collections::{HashMap, VecDeque};

use super::model::{AbstractWorld, Model, Mutation, Packed};
use super::{CheckReport, Counterexample, Liveness};
use crate::fsm::{CommandKind, SafeSet};
use crate::simulator::DEFAULT_QUORUM;

/// Counterexample paths kept per property; totals are still counted.
const MAX_COUNTEREXAMPLES: usize = 8;

#[derive(Debug, Clone)]
pub struct ExploreConfig {
    pub n_nodes: usize,
    pub depth: u32,
    pub fire_budget: u8,
    pub override_budget: u8,
    pub predicates: Vec<CommandKind>,
    pub quorum: usize,
    pub s_ok: SafeSet,
    pub mutation: Option<Mutation>,
}

impl ExploreConfig {
    pub fn new(n_nodes: usize, depth: u32, fire_budget: u8) -> Self {
        Self {
            n_nodes,
            depth,
            fire_budget,
            override_budget: 0,
            predicates: vec![
                CommandKind::Bootstrap,
                CommandKind::AbortJob,
                CommandKind::IsolateParty,
            ],
            quorum: DEFAULT_QUORUM,
            s_ok: SafeSet::default(),
            mutation: None,
        }
    }

    pub fn with_mutation(mut self, mutation: Option<Mutation>) -> Self {
        self.mutation = mutation;
        self
    }
}

struct Graph {
    states: Vec<Packed>,
    index: HashMap<Packed, usize>,
    parent: Vec<Option<usize>>,
    depth: Vec<u32>,
    edges: Vec<Vec<usize>>,
    expanded: Vec<bool>,
}

impl Graph {
    fn path_to(&self, mut i: usize) -> Vec<AbstractWorld> {
        let mut path = vec![self.states[i].unpack()];
        while let Some(p) = self.parent[i] {
            path.push(self.states[p].unpack());
            i = p;
        }
        path.reverse();
        path
    }
}

/// Breadth-first reachability over the abstract relation from the initial
/// world (all IDLE, WAIT, READY, nothing fired).
pub fn explore(config: &ExploreConfig) -> CheckReport {
    assert!(
        (1..=4).contains(&config.n_nodes),
        "n_nodes must be in 1..=4"
    );
    assert!(config.depth >= 1, "depth bound must be positive");
    let model = Model {
        predicates: config.predicates.clone(),
        quorum: config.quorum,
        s_ok: config.s_ok.clone(),
        mutation: config.mutation,
    };
    let init = Packed::pack(&AbstractWorld::initial(
        config.n_nodes,
        vec![config.fire_budget; config.predicates.len()],
        config.override_budget,
    ));
    let mut g = Graph {
        states: vec![init],
        index: HashMap::from([(init, 0)]),
        parent: vec![None],
        depth: vec![0],
        edges: vec![Vec::new()],
        expanded: vec![false],
    };
    let mut report = CheckReport {
        explored_states: 0,
        transitions: 0,
        complete: true,
        safety_violation_count: 0,
        safety_violations: Vec::new(),
        monotonicity_violation_count: 0,
        monotonicity_violations: Vec::new(),
        liveness: Liveness::Ok { steps_to_zero: 0 },
        max_mu: g.states[0].mu(),
        divergences: Vec::new(),
    };
    let mut frontier = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        let world = g.states[i];
        if g.depth[i] >= config.depth {
            if !world.is_terminal() {
                frontier.push(world.unpack());
            }
            continue;
        }
        g.expanded[i] = true;
        let mu_here = world.mu();
        for succ in model.step(&world, None) {
            report.transitions += 1;
            if succ == world {
                continue;
            }
            let mu_next = succ.mu();
            let j = match g.index.get(&succ) {
                Some(&j) => j,
                None => {
                    let j = g.states.len();
                    g.index.insert(succ, j);
                    g.states.push(succ);
                    g.parent.push(Some(i));
                    g.depth.push(g.depth[i] + 1);
                    g.edges.push(Vec::new());
                    g.expanded.push(false);
                    report.max_mu = report.max_mu.max(mu_next);
                    if !succ.is_safe(&config.s_ok) {
                        report.safety_violation_count += 1;
                        if report.safety_violations.len() < MAX_COUNTEREXAMPLES {
                            report.safety_violations.push(Counterexample {
                                description:
                                    "FINALIZE while a predicate fired or a node is outside S_ok"
                                        .into(),
                                path: g.path_to(j),
                            });
                        }
                    }
                    queue.push_back(j);
                    j
                }
            };
            if mu_next > mu_here {
                report.monotonicity_violation_count += 1;
                if report.monotonicity_violations.len() < MAX_COUNTEREXAMPLES {
                    let mut path = g.path_to(i);
                    path.push(succ.unpack());
                    report.monotonicity_violations.push(Counterexample {
                        description: format!("mu rises from {mu_here} to {mu_next}"),
                        path,
                    });
                }
            }
            g.edges[i].push(j);
        }
    }
    report.explored_states = g.states.len();
    report.complete = frontier.is_empty();
    report.liveness = liveness(&g, frontier, config.depth);
    report
}

fn liveness(g: &Graph, frontier: Vec<AbstractWorld>, bound: u32) -> Liveness {
    if !frontier.is_empty() {
        return Liveness::Inconclusive { frontier };
    }
    let stuck: Vec<AbstractWorld> = (0..g.states.len())
        .filter(|&i| g.expanded[i] && g.edges[i].is_empty() && !g.states[i].is_terminal())
        .map(|i| g.states[i].unpack())
        .collect();
    if !stuck.is_empty() {
        return Liveness::StuckStates { states: stuck };
    }
    // Kahn's algorithm; states left over lie on or behind a cycle.
    let n = g.states.len();
    let mut indegree = vec![0usize; n];
    for targets in &g.edges {
        for &j in targets {
            indegree[j] += 1;
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    while let Some(i) = ready.pop() {
        order.push(i);
        for &j in &g.edges[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push(j);
            }
        }
    }
    if order.len() < n {
        let states = (0..n)
            .filter(|&i| indegree[i] > 0)
            .take(16)
            .map(|i| g.states[i].unpack())
            .collect();
        return Liveness::Cycle { states };
    }
    // Longest number of steps from each state until mu first reaches zero.
    let mut to_zero = vec![0u32; n];
    for &i in order.iter().rev() {
        if g.states[i].mu() > 0 {
            to_zero[i] = g.edges[i]
                .iter()
                .map(|&j| to_zero[j] + 1)
                .max()
                .unwrap_or(0);
        }
    }
    let steps = to_zero[0];
    if steps > bound {
        Liveness::BoundExceeded {
            steps_to_zero: steps,
            bound,
        }
    } else {
        Liveness::Ok {
            steps_to_zero: steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_aborts_on_quorum() {
        let r = explore(&ExploreConfig::new(1, 20, 1));
        assert!(r.is_ok(), "{r}");
        assert_eq!(r.max_mu, 5);
    }

    #[test]
    fn shallow_bound_is_inconclusive() {
        let r = explore(&ExploreConfig::new(2, 2, 1));
        assert!(!r.complete);
        assert!(matches!(r.liveness, Liveness::Inconclusive { .. }));
    }

    #[test]
    fn two_nodes_hold_all_properties() {
        let r = explore(&ExploreConfig::new(2, 60, 1));
        assert!(r.is_ok(), "{r}");
        assert_eq!(r.max_mu, 8);
    }

    #[test]
    fn inf_to_pref_breaks_monotonicity() {
        let r = explore(&ExploreConfig::new(2, 60, 1).with_mutation(Some(Mutation::InfToPref)));
        assert!(r.safety_violations.is_empty());
        let cx = &r.monotonicity_violations[0];
        let last = &cx.path[cx.path.len() - 1];
        assert!(last.mu() > cx.path[cx.path.len() - 2].mu());
    }

    #[test]
    fn finalize_ignoring_fires_breaks_safety() {
        let r = explore(
            &ExploreConfig::new(2, 60, 1).with_mutation(Some(Mutation::FinalizeIgnoresFires)),
        );
        let cx = &r.safety_violations[0];
        let last = cx.path.last().unwrap();
        assert_eq!(last.aggregator, crate::fsm::AggregatorState::Finalize);
        assert!(last.any_fired());
    }
}
