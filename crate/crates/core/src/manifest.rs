//! Job manifests, EP descriptors, and fail-fast admission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes;
use crate::digest::{sha256, Digest};
use crate::ep::{Opcode, PluginDescriptor, EP_DP, EP_FHE, EP_MPC};
use crate::guardrails::GuardrailConfig;
use crate::telemetry::MetricKey;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("invalid manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpDescriptor {
    pub ep_id: String,
    pub implemented_ops: BTreeSet<Opcode>,
    pub metric_keys: BTreeSet<MetricKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct EpRegistry(pub Vec<EpDescriptor>);

impl EpRegistry {
    pub fn get(&self, ep_id: &str) -> Option<&EpDescriptor> {
        self.0.iter().find(|d| d.ep_id == ep_id)
    }

    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        let registry: EpRegistry = serde_json::from_str(text)?;
        let mut seen = BTreeSet::new();
        for d in &registry.0 {
            if !seen.insert(d.ep_id.as_str()) {
                return Err(ManifestError::BadConfig(format!(
                    "duplicate ep_id `{}`",
                    d.ep_id
                )));
            }
            if let Some(key) = d
                .metric_keys
                .iter()
                .find(|k| !k.is_nullable() && !is_latency_key(**k))
            {
                return Err(ManifestError::BadConfig(format!(
                    "`{}` declares unknown metric key {key}",
                    d.ep_id
                )));
            }
        }
        Ok(registry)
    }
}

fn is_latency_key(key: MetricKey) -> bool {
    matches!(key, MetricKey::LagMs | MetricKey::OpLatencyMs)
}

pub fn default_ep_registry() -> EpRegistry {
    use Opcode::*;
    let latency = [MetricKey::LagMs, MetricKey::OpLatencyMs];
    let keys = |extra: &[MetricKey]| extra.iter().chain(latency.iter()).copied().collect();
    EpRegistry(vec![
        EpDescriptor {
            ep_id: EP_FHE.into(),
            implemented_ops: [Load, Map, AggSum, AggCount, Send, Merge, Bootstrap, Release].into(),
            metric_keys: keys(&[MetricKey::NoiseBits, MetricKey::LevelsLeft]),
        },
        EpDescriptor {
            ep_id: EP_DP.into(),
            implemented_ops: [Load, Map, AggSum, AggCount, Send, Merge, AddNoise, Release].into(),
            metric_keys: keys(&[MetricKey::EpsilonSpent]),
        },
        EpDescriptor {
            ep_id: EP_MPC.into(),
            implemented_ops: [Load, AggSum, Send, VerifyShare, Merge, Release].into(),
            metric_keys: keys(&[MetricKey::ShareAuthFail]),
        },
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPlugin {
    pub name: String,
    pub dsl_ops: BTreeSet<Opcode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub job_id: String,
    pub plugin: ManifestPlugin,
    pub execution_provider: String,
    pub predicates: Vec<String>,
    pub metric_keys: BTreeSet<MetricKey>,
    pub n_nodes: u32,
    pub guardrails_hash: Digest,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn manifest_hash(manifest: &Manifest) -> Digest {
    sha256(&to_canonical_bytes(manifest).expect("manifest serializes"))
}

pub fn compile_manifest(
    job_id: &str,
    plugin: &PluginDescriptor,
    ep_id: &str,
    registry: &EpRegistry,
    config: &GuardrailConfig,
    n_nodes: u32,
) -> Result<Manifest, ManifestError> {
    let descriptor = registry
        .get(ep_id)
        .ok_or_else(|| ManifestError::BadConfig(format!("unknown execution provider `{ep_id}`")))?;
    if plugin.dsl_ops.is_empty() {
        return Err(ManifestError::BadConfig("plugin has no opcodes".into()));
    }
    if n_nodes < 2 {
        return Err(ManifestError::BadConfig(format!(
            "n_nodes must be at least 2, got {n_nodes}"
        )));
    }
    let predicates = config
        .predicates
        .iter()
        .filter(|p| !plugin.disabled_predicates.contains(&p.id))
        .filter(|p| p.referenced_keys().is_subset(&descriptor.metric_keys))
        .map(|p| p.id.clone())
        .collect();
    Ok(Manifest {
        manifest_version: MANIFEST_VERSION,
        job_id: job_id.to_string(),
        plugin: ManifestPlugin {
            name: plugin.name.clone(),
            dsl_ops: plugin.opcode_set(),
        },
        execution_provider: ep_id.to_string(),
        predicates,
        metric_keys: descriptor.metric_keys.clone(),
        n_nodes,
        guardrails_hash: config.source_hash,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AdmissionReason {
    MissingOpcode {
        op: Opcode,
    },
    UnboundMetric {
        predicate_id: String,
        key: MetricKey,
    },
    UnknownEp {
        ep_id: String,
    },
    BadConfig {
        detail: String,
    },
}

impl fmt::Display for AdmissionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdmissionReason::MissingOpcode { op } => write!(f, "missing-opcode({op})"),
            AdmissionReason::UnboundMetric { predicate_id, key } => {
                write!(f, "unbound-metric({predicate_id}, {key})")
            }
            AdmissionReason::UnknownEp { ep_id } => write!(f, "unknown-ep({ep_id})"),
            AdmissionReason::BadConfig { detail } => write!(f, "bad-config({detail})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdmissionVerdict {
    Admitted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionResult {
    pub verdict: AdmissionVerdict,
    pub reasons: Vec<AdmissionReason>,
}

impl AdmissionResult {
    fn from_reasons(reasons: Vec<AdmissionReason>) -> Self {
        let verdict = if reasons.is_empty() {
            AdmissionVerdict::Admitted
        } else {
            AdmissionVerdict::Rejected
        };
        Self { verdict, reasons }
    }

    pub fn is_admitted(&self) -> bool {
        self.verdict == AdmissionVerdict::Admitted
    }
}

/// Runs every admission check and reports all failures, not just the first.
pub fn admission_check(
    manifest: &Manifest,
    registry: &EpRegistry,
    config: &GuardrailConfig,
) -> AdmissionResult {
    let mut reasons = Vec::new();
    if manifest.plugin.dsl_ops.is_empty() {
        reasons.push(AdmissionReason::BadConfig {
            detail: "plugin has no opcodes".into(),
        });
    }
    if manifest.n_nodes < 2 {
        reasons.push(AdmissionReason::BadConfig {
            detail: format!("n_nodes {} below 2", manifest.n_nodes),
        });
    }
    let mut seen = BTreeSet::new();
    for id in &manifest.predicates {
        if !seen.insert(id) {
            reasons.push(AdmissionReason::BadConfig {
                detail: format!("predicate `{id}` listed twice"),
            });
        }
    }
    if manifest.guardrails_hash != config.source_hash {
        reasons.push(AdmissionReason::BadConfig {
            detail: "guardrails hash mismatch".into(),
        });
    }

    let Some(descriptor) = registry.get(&manifest.execution_provider) else {
        reasons.push(AdmissionReason::UnknownEp {
            ep_id: manifest.execution_provider.clone(),
        });
        return AdmissionResult::from_reasons(reasons);
    };
    for op in manifest
        .plugin
        .dsl_ops
        .difference(&descriptor.implemented_ops)
    {
        reasons.push(AdmissionReason::MissingOpcode { op: *op });
    }
    let by_id: BTreeMap<&str, _> = config
        .predicates
        .iter()
        .map(|p| (p.id.as_str(), p))
        .collect();
    for id in &manifest.predicates {
        match by_id.get(id.as_str()) {
            None => reasons.push(AdmissionReason::BadConfig {
                detail: format!("predicate `{id}` not in guardrails"),
            }),
            Some(p) => {
                for key in p.referenced_keys().difference(&descriptor.metric_keys) {
                    reasons.push(AdmissionReason::UnboundMetric {
                        predicate_id: id.clone(),
                        key: *key,
                    });
                }
            }
        }
    }
    if manifest.metric_keys != descriptor.metric_keys {
        reasons.push(AdmissionReason::BadConfig {
            detail: "metric_keys differ from the EP descriptor".into(),
        });
    }
    AdmissionResult::from_reasons(reasons)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guardrails::{default_guardrails, parse_guardrails};

    fn demo() -> PluginDescriptor {
        use Opcode::*;
        PluginDescriptor::new("fed-aggregate", [Load, AggSum, Send, Merge, Release])
    }

    #[test]
    fn fhe_enables_only_p1() {
        let config = default_guardrails();
        let m = compile_manifest("j", &demo(), EP_FHE, &default_ep_registry(), &config, 3).unwrap();
        assert_eq!(m.predicates, vec!["p1"]);
        assert!(admission_check(&m, &default_ep_registry(), &config).is_admitted());
    }

    #[test]
    fn dp_enables_only_p2_and_mpc_only_p3() {
        let config = default_guardrails();
        let reg = default_ep_registry();
        assert_eq!(
            compile_manifest("j", &demo(), EP_DP, &reg, &config, 3)
                .unwrap()
                .predicates,
            vec!["p2"]
        );
        assert_eq!(
            compile_manifest("j", &demo(), EP_MPC, &reg, &config, 3)
                .unwrap()
                .predicates,
            vec!["p3"]
        );
    }

    #[test]
    fn explicit_disable_drops_predicate() {
        let mut plugin = demo();
        plugin.disabled_predicates.push("p1".into());
        let m = compile_manifest(
            "j",
            &plugin,
            EP_FHE,
            &default_ep_registry(),
            &default_guardrails(),
            3,
        )
        .unwrap();
        assert!(m.predicates.is_empty());
    }

    #[test]
    fn compile_rejects_empty_program_and_unknown_ep() {
        let reg = default_ep_registry();
        let config = default_guardrails();
        let empty = PluginDescriptor::new("x", []);
        assert!(matches!(
            compile_manifest("j", &empty, EP_FHE, &reg, &config, 3),
            Err(ManifestError::BadConfig(_))
        ));
        assert!(matches!(
            compile_manifest("j", &demo(), "mock-tee", &reg, &config, 3),
            Err(ManifestError::BadConfig(_))
        ));
    }

    #[test]
    fn forced_p1_under_dp_is_unbound() {
        let config = default_guardrails();
        let reg = default_ep_registry();
        let mut m = compile_manifest("j", &demo(), EP_DP, &reg, &config, 3).unwrap();
        m.predicates = vec!["p1".into(), "p2".into()];
        let r = admission_check(&m, &reg, &config);
        assert_eq!(r.verdict, AdmissionVerdict::Rejected);
        assert_eq!(
            r.reasons,
            vec![AdmissionReason::UnboundMetric {
                predicate_id: "p1".into(),
                key: MetricKey::NoiseBits
            }]
        );
    }

    #[test]
    fn bootstrap_under_dp_is_missing_opcode() {
        use Opcode::*;
        let config = default_guardrails();
        let reg = default_ep_registry();
        let plugin = PluginDescriptor::new("boot", [Load, Bootstrap, AggSum, Send, Merge, Release]);
        let m = compile_manifest("j", &plugin, EP_DP, &reg, &config, 3).unwrap();
        let r = admission_check(&m, &reg, &config);
        assert_eq!(
            r.reasons,
            vec![AdmissionReason::MissingOpcode { op: Bootstrap }]
        );
    }

    #[test]
    fn all_failures_are_reported() {
        use Opcode::*;
        let config = default_guardrails();
        let reg = default_ep_registry();
        let plugin = PluginDescriptor::new("boot", [Load, Bootstrap, Send, Merge, Release]);
        let mut m = compile_manifest("j", &plugin, EP_DP, &reg, &config, 3).unwrap();
        m.predicates.push("p1".into());
        m.guardrails_hash = Digest::ZERO;
        let r = admission_check(&m, &reg, &config);
        assert_eq!(r.reasons.len(), 3, "{:?}", r.reasons);
    }

    #[test]
    fn unknown_ep_is_rejected() {
        let config = default_guardrails();
        let reg = default_ep_registry();
        let mut m = compile_manifest("j", &demo(), EP_FHE, &reg, &config, 3).unwrap();
        m.execution_provider = "mock-tee".into();
        let r = admission_check(&m, &reg, &config);
        assert_eq!(
            r.reasons,
            vec![AdmissionReason::UnknownEp {
                ep_id: "mock-tee".into()
            }]
        );
    }

    #[test]
    fn hash_mismatch_is_bad_config() {
        let reg = default_ep_registry();
        let config = default_guardrails();
        let m = compile_manifest("j", &demo(), EP_FHE, &reg, &config, 3).unwrap();
        let other = parse_guardrails(&format!(
            "{}\n# edited\n",
            crate::guardrails::DEFAULT_GUARDRAILS_YAML
        ))
        .unwrap();
        let r = admission_check(&m, &reg, &other);
        assert!(matches!(
            r.reasons.as_slice(),
            [AdmissionReason::BadConfig { .. }]
        ));
    }

    #[test]
    fn manifest_json_shape() {
        let m = compile_manifest(
            "j",
            &demo(),
            EP_FHE,
            &default_ep_registry(),
            &default_guardrails(),
            3,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys.iter().copied().collect::<BTreeSet<_>>(),
            BTreeSet::from([
                "manifest_version",
                "job_id",
                "plugin",
                "execution_provider",
                "predicates",
                "metric_keys",
                "n_nodes",
                "guardrails_hash"
            ])
        );
        assert_eq!(
            v["plugin"].as_object().unwrap().keys().collect::<Vec<_>>(),
            vec!["dsl_ops", "name"]
        );
        assert_eq!(Manifest::from_json(&m.to_json_pretty()).unwrap(), m);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let reg = default_ep_registry();
        let config = default_guardrails();
        let a = compile_manifest("j", &demo(), EP_FHE, &reg, &config, 3).unwrap();
        assert_eq!(manifest_hash(&a), manifest_hash(&a.clone()));
        let mut b = a.clone();
        b.execution_provider = EP_DP.into();
        assert_ne!(manifest_hash(&a), manifest_hash(&b));
    }

    #[test]
    fn registry_rejects_duplicates() {
        let text = serde_json::to_string(&EpRegistry(vec![
            default_ep_registry().0[0].clone(),
            default_ep_registry().0[0].clone(),
        ]))
        .unwrap();
        assert!(EpRegistry::from_json(&text).is_err());
    }
}
