//! Explicit-state checking of the safety invariant, ranking-function
//! monotonicity, and bounded liveness, for small node counts and for
//! recorded simulator traces.

mod explore;
mod model;
mod replay;

use std::fmt;

use serde::Serialize;

pub use explore::{explore, ExploreConfig};
pub use model::{AbsNode, AbstractWorld, Model, Mutation, Observation};
pub use replay::{check_trace, check_trace_json};

/// A path from the initial world to the offending state or step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Counterexample {
    pub description: String,
    pub path: Vec<AbstractWorld>,
}

impl Counterexample {
    /// Number of transitions along the path.
    pub fn steps(&self) -> usize {
        self.path.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Liveness {
    /// Every path reaches mu = 0, the longest one in `steps_to_zero` steps.
    Ok {
        steps_to_zero: u32,
    },
    StuckStates {
        states: Vec<AbstractWorld>,
    },
    /// A progress cycle, i.e. a path that never terminates.
    Cycle {
        states: Vec<AbstractWorld>,
    },
    /// Some path needs more steps than the bound to reach mu = 0.
    BoundExceeded {
        steps_to_zero: u32,
        bound: u32,
    },
    /// The depth bound cut exploration short.
    Inconclusive {
        frontier: Vec<AbstractWorld>,
    },
}

impl Liveness {
    pub fn is_ok(&self) -> bool {
        matches!(self, Liveness::Ok { .. })
    }
}

/// A point where a recorded trace disagrees with an independent recomputation
/// or leaves the abstract transition relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub tick: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckReport {
    pub explored_states: usize,
    pub transitions: usize,
    /// Exploration covered every reachable state within the bound.
    pub complete: bool,
    pub safety_violation_count: usize,
    pub safety_violations: Vec<Counterexample>,
    pub monotonicity_violation_count: usize,
    pub monotonicity_violations: Vec<Counterexample>,
    pub liveness: Liveness,
    pub max_mu: u32,
    pub divergences: Vec<Divergence>,
}

impl CheckReport {
    pub fn is_ok(&self) -> bool {
        self.safety_violations.is_empty()
            && self.monotonicity_violations.is_empty()
            && self.divergences.is_empty()
            && self.liveness.is_ok()
    }
}

fn write_path(f: &mut fmt::Formatter<'_>, cx: &Counterexample) -> fmt::Result {
    writeln!(f, "  {} ({} steps)", cx.description, cx.steps())?;
    for (i, w) in cx.path.iter().enumerate() {
        writeln!(f, "    {i:>3}: {w}")?;
    }
    Ok(())
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "explored {} states, {} transitions ({})",
            self.explored_states,
            self.transitions,
            if self.complete {
                "complete"
            } else {
                "truncated"
            }
        )?;
        writeln!(f, "max mu: {}", self.max_mu)?;
        writeln!(f, "safety violations: {}", self.safety_violation_count)?;
        for cx in &self.safety_violations {
            write_path(f, cx)?;
        }
        writeln!(
            f,
            "monotonicity violations: {}",
            self.monotonicity_violation_count
        )?;
        for cx in &self.monotonicity_violations {
            write_path(f, cx)?;
        }
        match &self.liveness {
            Liveness::Ok { steps_to_zero } => {
                writeln!(f, "liveness: ok (mu = 0 within {steps_to_zero} steps)")?
            }
            Liveness::StuckStates { states } => {
                writeln!(f, "liveness: {} stuck states", states.len())?;
                for s in states {
                    writeln!(f, "    {s}")?;
                }
            }
            Liveness::Cycle { states } => {
                writeln!(
                    f,
                    "liveness: non-terminating cycle through {} states",
                    states.len()
                )?;
                for s in states {
                    writeln!(f, "    {s}")?;
                }
            }
            Liveness::BoundExceeded {
                steps_to_zero,
                bound,
            } => writeln!(
                f,
                "liveness: longest path to mu = 0 is {steps_to_zero} steps, bound {bound}"
            )?,
            Liveness::Inconclusive { frontier } => {
                writeln!(
                    f,
                    "liveness: inconclusive, {} frontier states at the depth bound",
                    frontier.len()
                )?;
                for s in frontier.iter().take(5) {
                    writeln!(f, "    {s}")?;
                }
            }
        }
        if !self.divergences.is_empty() {
            writeln!(f, "divergences: {}", self.divergences.len())?;
            for d in &self.divergences {
                match d.tick {
                    Some(t) => writeln!(f, "  tick {t}: {}", d.detail)?,
                    None => writeln!(f, "  {}", d.detail)?,
                }
            }
        }
        write!(f, "result: {}", if self.is_ok() { "PASS" } else { "FAIL" })
    }
}
