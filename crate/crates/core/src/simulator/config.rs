use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ep::{EpParams, PluginDescriptor, EP_DP, EP_FHE, EP_MPC};
use crate::fsm::SafeSet;
use crate::guardrails::{default_guardrails, scenario_a_guardrails, GuardrailConfig};
use crate::manifest::{default_ep_registry, EpRegistry};

pub const DEFAULT_MAX_TICKS: u64 = 200;
pub const DEFAULT_QUORUM: usize = 2;

pub const FHE_PIPELINE_JSON: &str = include_str!("../../assets/plugins/fhe-pipeline.json");
pub const DP_PIPELINE_JSON: &str = include_str!("../../assets/plugins/dp-pipeline.json");
pub const MPC_PIPELINE_JSON: &str = include_str!("../../assets/plugins/mpc-pipeline.json");
pub const FED_AGGREGATE_JSON: &str = include_str!("../../assets/plugins/fed-aggregate.json");

fn shipped_plugin(text: &str) -> PluginDescriptor {
    serde_json::from_str(text).expect("shipped plugin parses")
}

pub fn fhe_pipeline() -> PluginDescriptor {
    shipped_plugin(FHE_PIPELINE_JSON)
}

pub fn dp_pipeline() -> PluginDescriptor {
    shipped_plugin(DP_PIPELINE_JSON)
}

pub fn mpc_pipeline() -> PluginDescriptor {
    shipped_plugin(MPC_PIPELINE_JSON)
}

/// Backend-neutral federated aggregate; runs under every shipped EP.
pub fn fed_aggregate() -> PluginDescriptor {
    shipped_plugin(FED_AGGREGATE_JSON)
}

pub fn node_id(i: u32) -> String {
    format!("node-{i}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    A,
    B,
    C,
    #[serde(rename = "none")]
    None,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::A => "A",
            Scenario::B => "B",
            Scenario::C => "C",
            Scenario::None => "none",
        })
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Scenario::A),
            "B" | "b" => Ok(Scenario::B),
            "C" | "c" => Ok(Scenario::C),
            "none" => Ok(Scenario::None),
            other => Err(format!(
                "unknown scenario `{other}` (expected A, B, C or none)"
            )),
        }
    }
}

impl Scenario {
    pub fn default_ep(self) -> &'static str {
        match self {
            Scenario::A | Scenario::None => EP_FHE,
            Scenario::B => EP_DP,
            Scenario::C => EP_MPC,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    /// The node's next share proof fails verification.
    InvalidShare,
    /// The node is unreachable for the tick: no compute, no frame, no acks.
    Silence,
    ExtraDpSpend,
    NoiseDrain,
}

impl FaultKind {
    pub const ALL: [FaultKind; 4] = [
        FaultKind::InvalidShare,
        FaultKind::Silence,
        FaultKind::ExtraDpSpend,
        FaultKind::NoiseDrain,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FaultInjection {
    pub tick: u64,
    pub node_id: String,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultMagnitudes {
    pub noise_drain_bits: u64,
    pub extra_dp_spend: f64,
}

impl Default for FaultMagnitudes {
    fn default() -> Self {
        Self {
            noise_drain_bits: 21,
            extra_dp_spend: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid simulation config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_nodes: u32,
    pub seed: u64,
    pub job_id: String,
    pub ep_id: String,
    pub plugin: PluginDescriptor,
    pub guardrails: GuardrailConfig,
    pub scenario: Scenario,
    pub max_ticks: u64,
    pub injections: Vec<FaultInjection>,
    pub quorum: usize,
    pub s_ok: SafeSet,
    pub ep_params: EpParams,
    pub magnitudes: FaultMagnitudes,
    pub registry: EpRegistry,
}

impl SimConfig {
    pub fn new(ep_id: &str, plugin: PluginDescriptor, n_nodes: u32, seed: u64) -> Self {
        Self {
            n_nodes,
            seed,
            job_id: format!("job-{seed}"),
            ep_id: ep_id.to_string(),
            plugin,
            guardrails: default_guardrails(),
            scenario: Scenario::None,
            max_ticks: DEFAULT_MAX_TICKS,
            injections: Vec::new(),
            quorum: DEFAULT_QUORUM,
            s_ok: SafeSet::default(),
            ep_params: EpParams::default(),
            magnitudes: FaultMagnitudes::default(),
            registry: default_ep_registry(),
        }
    }

    /// Scenario presets: A drains node-1's noise budget at tick 5 (bootstrap
    /// broadcast to all); B overspends node-2's privacy budget at ticks 3-5;
    /// C makes the last node submit two invalid share proofs.
    pub fn scenario(scenario: Scenario, n_nodes: u32, seed: u64) -> Self {
        let inject = |tick, node: String, kind| FaultInjection {
            tick,
            node_id: node,
            kind,
        };
        match scenario {
            Scenario::A => Self {
                guardrails: scenario_a_guardrails(),
                scenario,
                injections: vec![inject(5, node_id(1), FaultKind::NoiseDrain)],
                ..Self::new(EP_FHE, fhe_pipeline(), n_nodes, seed)
            },
            Scenario::B => Self {
                scenario,
                injections: (3..=5)
                    .map(|t| inject(t, node_id(2.min(n_nodes)), FaultKind::ExtraDpSpend))
                    .collect(),
                ..Self::new(EP_DP, dp_pipeline(), n_nodes, seed)
            },
            Scenario::C => Self {
                scenario,
                injections: (2..=3)
                    .map(|t| inject(t, node_id(n_nodes), FaultKind::InvalidShare))
                    .collect(),
                ..Self::new(EP_MPC, mpc_pipeline(), n_nodes, seed)
            },
            Scenario::None => Self::new(EP_FHE, fed_aggregate(), n_nodes, seed),
        }
    }

    /// A randomized job: one of the three EPs with its pipeline plugin,
    /// 2 to 5 nodes, and up to five faults starting in the first 12 ticks.
    /// Faults favor the kind the chosen EP reacts to.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let (ep, plugin) = [
            (EP_FHE, fhe_pipeline()),
            (EP_DP, dp_pipeline()),
            (EP_MPC, mpc_pipeline()),
        ]
        .choose(&mut rng)
        .cloned()
        .unwrap();
        let n_nodes = rng.gen_range(2..=5);
        let faults = rng.gen_range(0..=5);
        let relevant = match ep {
            EP_FHE => FaultKind::NoiseDrain,
            EP_DP => FaultKind::ExtraDpSpend,
            _ => FaultKind::InvalidShare,
        };
        let mut injections = Vec::new();
        for _ in 0..faults {
            let tick = rng.gen_range(0..12);
            let node = node_id(rng.gen_range(1..=n_nodes));
            let roll = rng.gen_range(0..20);
            let kind = match roll {
                0..=11 => relevant,
                12..=16 => FaultKind::Silence,
                _ => *FaultKind::ALL.choose(&mut rng).unwrap(),
            };
            // A silence fault is an outage of one to four consecutive ticks.
            let span = if kind == FaultKind::Silence {
                rng.gen_range(1..=4)
            } else {
                1
            };
            for t in tick..tick + span {
                injections.push(FaultInjection {
                    tick: t,
                    node_id: node.clone(),
                    kind,
                });
            }
        }
        injections.sort();
        injections.dedup();
        Self {
            injections,
            ..Self::new(ep, plugin, n_nodes, seed)
        }
    }

    pub fn node_ids(&self) -> Vec<String> {
        (1..=self.n_nodes).map(node_id).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_ticks < 1 {
            return Err(ConfigError("max_ticks must be at least 1".into()));
        }
        if self.quorum < 1 {
            return Err(ConfigError("quorum must be at least 1".into()));
        }
        self.plugin
            .validate()
            .map_err(|e| ConfigError(format!("plugin `{}`: {e}", self.plugin.name)))?;
        let nodes: BTreeSet<String> = self.node_ids().into_iter().collect();
        for inj in &self.injections {
            if !nodes.contains(&inj.node_id) {
                return Err(ConfigError(format!(
                    "injection targets unknown node `{}`",
                    inj.node_id
                )));
            }
            if inj.tick >= self.max_ticks {
                return Err(ConfigError(format!(
                    "injection at tick {} is past max_ticks {}",
                    inj.tick, self.max_ticks
                )));
            }
        }
        Ok(())
    }
}
