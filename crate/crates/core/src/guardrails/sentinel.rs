use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GuardrailConfig;
use crate::fsm::{CommandKind, CommandTarget};
use crate::manifest::Manifest;
use crate::telemetry::{AlignedSnapshot, MetricKey};

/// One-tick-ahead prediction m̂ per participant and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Forecast {
    pub tick: u64,
    pub values: BTreeMap<String, BTreeMap<MetricKey, f64>>,
}

impl Forecast {
    pub fn node(&self, node_id: &str) -> Option<&BTreeMap<MetricKey, f64>> {
        self.values.get(node_id)
    }
}

/// Linear extrapolation `2·curr − prev`, clamped at zero, with a zero-order
/// hold when there is no adjacent previous frame for the participant.
pub fn forecast(prev: Option<&AlignedSnapshot>, curr: &AlignedSnapshot) -> Forecast {
    let prev = prev.filter(|p| p.tick + 1 == curr.tick);
    let mut values = BTreeMap::new();
    for (node_id, frame) in &curr.frames {
        let before = prev.and_then(|p| p.frames.get(node_id));
        let mut per_key = BTreeMap::new();
        for key in MetricKey::ALL {
            let Some(c) = frame.metric(key) else { continue };
            let predicted = match before.and_then(|f| f.metric(key)) {
                Some(p) => (c + (c - p)).max(0.0),
                None => c,
            };
            per_key.insert(key, predicted);
        }
        values.insert(node_id.clone(), per_key);
    }
    Forecast {
        tick: curr.tick,
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiredAction {
    pub predicate_id: String,
    pub node_id: String,
    pub kind: CommandKind,
    pub target: CommandTarget,
    pub tick: u64,
}

/// Fired actions in (predicate config order, node id) order. Predicates not
/// enabled by the manifest are never evaluated.
pub fn select_actions(
    config: &GuardrailConfig,
    manifest: &Manifest,
    snapshot: &AlignedSnapshot,
    forecast: &Forecast,
) -> Vec<FiredAction> {
    let empty = BTreeMap::new();
    let mut fired = Vec::new();
    for predicate in config
        .predicates
        .iter()
        .filter(|p| manifest.predicates.contains(&p.id))
    {
        for (node_id, frame) in &snapshot.frames {
            let mhat = forecast.node(node_id).unwrap_or(&empty);
            if predicate.evaluate(frame, mhat) {
                fired.push(FiredAction {
                    predicate_id: predicate.id.clone(),
                    node_id: node_id.clone(),
                    kind: predicate.action,
                    target: predicate.target.resolve(node_id),
                    tick: snapshot.tick,
                });
            }
        }
    }
    fired
}
