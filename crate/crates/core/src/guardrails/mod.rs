//! Guard-rail configuration, the Sentinel forecast, and action selection.

mod expr;
mod sentinel;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use expr::{parse_expr, BinOp, Expr, ExprError, MetricEnv, MetricSource, Ty, Value};
pub use sentinel::{forecast, select_actions, FiredAction, Forecast};

use crate::digest::{sha256, Digest};
use crate::fsm::{CommandKind, CommandTarget};
use crate::telemetry::{MetricFrame, MetricKey};

pub const DEFAULT_GUARDRAILS_YAML: &str = include_str!("../../assets/guardrails.yaml");
/// Default policy with p1 retargeted to every participant.
pub const SCENARIO_A_GUARDRAILS_YAML: &str =
    include_str!("../../assets/guardrails-scenario-a.yaml");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GuardrailError {
    #[error("guardrails YAML: {0}")]
    Yaml(String),
    #[error("predicate `{predicate}`: {source}")]
    Expr {
        predicate: String,
        #[source]
        source: ExprError,
    },
    #[error("duplicate predicate id `{0}`")]
    DuplicateId(String),
    #[error("predicate `{predicate}`: {message}")]
    Invalid { predicate: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredicateTarget {
    FiringNode,
    All,
    Aggregator,
}

impl fmt::Display for PredicateTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredicateTarget::FiringNode => "firing-node",
            PredicateTarget::All => "all",
            PredicateTarget::Aggregator => "aggregator",
        })
    }
}

impl PredicateTarget {
    pub fn resolve(self, firing_node: &str) -> CommandTarget {
        match self {
            PredicateTarget::FiringNode => CommandTarget::participant(firing_node),
            PredicateTarget::All => CommandTarget::All,
            PredicateTarget::Aggregator => CommandTarget::Aggregator,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub id: String,
    pub source: String,
    pub expr: Expr,
    pub action: CommandKind,
    pub target: PredicateTarget,
}

impl Predicate {
    /// Metric keys read through either `m` or `mhat`.
    pub fn referenced_keys(&self) -> BTreeSet<MetricKey> {
        self.expr.metrics().into_iter().map(|(_, k)| k).collect()
    }

    pub fn evaluate(&self, frame: &MetricFrame, node_forecast: &BTreeMap<MetricKey, f64>) -> bool {
        let env = |source: MetricSource, key: MetricKey| match source {
            MetricSource::Current => frame.metric(key),
            MetricSource::Forecast => node_forecast.get(&key).copied(),
        };
        self.expr.holds(&env)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuardrailConfig {
    pub version: u32,
    pub constants: BTreeMap<String, f64>,
    pub predicates: Vec<Predicate>,
    /// SHA-256 of the exact source text; pinned by the manifest.
    pub source_hash: Digest,
}

impl GuardrailConfig {
    pub fn predicate(&self, id: &str) -> Option<&Predicate> {
        self.predicates.iter().find(|p| p.id == id)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    version: u32,
    #[serde(default)]
    constants: BTreeMap<String, f64>,
    predicates: Vec<RawPredicate>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPredicate {
    id: String,
    expr: String,
    action: CommandKind,
    target: PredicateTarget,
}

pub fn guardrails_hash(text: &str) -> Digest {
    sha256(text.as_bytes())
}

pub fn parse_guardrails(text: &str) -> Result<GuardrailConfig, GuardrailError> {
    let raw: RawConfig =
        serde_yaml::from_str(text).map_err(|e| GuardrailError::Yaml(e.to_string()))?;
    let mut seen = BTreeSet::new();
    let mut predicates = Vec::with_capacity(raw.predicates.len());
    for p in raw.predicates {
        if !seen.insert(p.id.clone()) {
            return Err(GuardrailError::DuplicateId(p.id));
        }
        let expr = parse_expr(&p.expr, &raw.constants).map_err(|source| GuardrailError::Expr {
            predicate: p.id.clone(),
            source,
        })?;
        if p.action == CommandKind::IsolateParty && p.target != PredicateTarget::FiringNode {
            return Err(GuardrailError::Invalid {
                predicate: p.id,
                message: "A-ISOLATE_PARTY must target the firing node".into(),
            });
        }
        predicates.push(Predicate {
            id: p.id,
            source: p.expr,
            expr,
            action: p.action,
            target: p.target,
        });
    }
    Ok(GuardrailConfig {
        version: raw.version,
        constants: raw.constants,
        predicates,
        source_hash: guardrails_hash(text),
    })
}

pub fn default_guardrails() -> GuardrailConfig {
    parse_guardrails(DEFAULT_GUARDRAILS_YAML).expect("shipped guardrails parse")
}

pub fn scenario_a_guardrails() -> GuardrailConfig {
    parse_guardrails(SCENARIO_A_GUARDRAILS_YAML).expect("shipped guardrails parse")
}
