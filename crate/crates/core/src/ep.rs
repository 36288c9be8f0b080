//! Mock Execution Providers.
//!
//! Payloads are not modeled; each provider only tracks the safety metric its
//! back-end is known for: the CKKS noise budget, the DP privacy accountant, or
//! MPC share-proof failures.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::manifest::{EpDescriptor, EpRegistry, Manifest};
use crate::telemetry::MetricKey;

pub const EP_FHE: &str = "mock-fhe-ckks";
pub const EP_DP: &str = "mock-dp";
pub const EP_MPC: &str = "mock-mpc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Opcode {
    Load,
    Map,
    AggSum,
    AggCount,
    Send,
    VerifyShare,
    Merge,
    Bootstrap,
    AddNoise,
    Release,
}

impl Opcode {
    pub const ALL: [Opcode; 10] = [
        Opcode::Load,
        Opcode::Map,
        Opcode::AggSum,
        Opcode::AggCount,
        Opcode::Send,
        Opcode::VerifyShare,
        Opcode::Merge,
        Opcode::Bootstrap,
        Opcode::AddNoise,
        Opcode::Release,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Opcode::Load => "LOAD",
            Opcode::Map => "MAP",
            Opcode::AggSum => "AGG_SUM",
            Opcode::AggCount => "AGG_COUNT",
            Opcode::Send => "SEND",
            Opcode::VerifyShare => "VERIFY_SHARE",
            Opcode::Merge => "MERGE",
            Opcode::Bootstrap => "BOOTSTRAP",
            Opcode::AddNoise => "ADD_NOISE",
            Opcode::Release => "RELEASE",
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EpError {
    #[error("plugin program is empty")]
    EmptyProgram,
    #[error("plugin program must contain SEND")]
    MissingSend,
    #[error("MERGE at position {0} precedes SEND")]
    MergeBeforeSend(usize),
    #[error("plugin program must end with RELEASE")]
    ReleaseNotLast,
    #[error("unknown execution provider `{0}`")]
    UnknownEp(String),
    #[error("execution provider `{ep}` does not implement {op}")]
    UnimplementedOpcode { ep: String, op: Opcode },
}

/// A plug-in as seen by the runtime: its opcodes in program order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginDescriptor {
    pub name: String,
    pub dsl_ops: Vec<Opcode>,
    /// Predicates this job opts out of even when their metrics are available.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disabled_predicates: Vec<String>,
}

impl PluginDescriptor {
    pub fn new(name: impl Into<String>, ops: impl IntoIterator<Item = Opcode>) -> Self {
        Self {
            name: name.into(),
            dsl_ops: ops.into_iter().collect(),
            disabled_predicates: Vec::new(),
        }
    }

    pub fn opcode_set(&self) -> BTreeSet<Opcode> {
        self.dsl_ops.iter().copied().collect()
    }

    pub fn validate(&self) -> Result<(), EpError> {
        let first_send = match self.dsl_ops.iter().position(|op| *op == Opcode::Send) {
            Some(pos) => pos,
            None if self.dsl_ops.is_empty() => return Err(EpError::EmptyProgram),
            None => return Err(EpError::MissingSend),
        };
        if let Some(pos) = self.dsl_ops.iter().position(|op| *op == Opcode::Merge) {
            if pos < first_send {
                return Err(EpError::MergeBeforeSend(pos));
            }
        }
        if self.dsl_ops.last() != Some(&Opcode::Release) {
            return Err(EpError::ReleaseNotLast);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FheParams {
    pub initial_noise: u64,
    pub initial_levels: u64,
    pub op_cost: u64,
}

impl Default for FheParams {
    fn default() -> Self {
        Self {
            initial_noise: 41,
            initial_levels: 5,
            op_cost: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub epsilon_step: f64,
}

impl Default for DpParams {
    fn default() -> Self {
        Self { epsilon_step: 0.08 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct EpParams {
    pub fhe: FheParams,
    pub dp: DpParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FheState {
    pub noise_bits: u64,
    pub levels_left: u64,
    pub initial_noise: u64,
    pub initial_levels: u64,
    pub op_cost: u64,
}

impl FheState {
    fn bootstrap(&mut self) {
        self.noise_bits = self.initial_noise;
        self.levels_left = self.initial_levels;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpState {
    pub epsilon_spent: f64,
    pub epsilon_step: f64,
}

/// Share-proof failures attributed to one party by the Aggregator's verifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpcState {
    pub share_auth_fail: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum EpState {
    Fhe(FheState),
    Dp(DpState),
    Mpc(MpcState),
}

/// Injected misbehavior waiting to be consumed by the next applicable opcode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FaultFlags {
    pub invalid_shares: u32,
}

/// Back-end metric values as they appear in a frame; `None` means null.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EmittedMetrics {
    pub noise_bits: Option<u64>,
    pub levels_left: Option<u64>,
    pub epsilon_spent: Option<f64>,
    pub share_auth_fail: Option<u64>,
}

impl EmittedMetrics {
    pub fn keys(&self) -> BTreeSet<MetricKey> {
        let mut keys = BTreeSet::from([MetricKey::LagMs, MetricKey::OpLatencyMs]);
        if self.noise_bits.is_some() {
            keys.insert(MetricKey::NoiseBits);
        }
        if self.levels_left.is_some() {
            keys.insert(MetricKey::LevelsLeft);
        }
        if self.epsilon_spent.is_some() {
            keys.insert(MetricKey::EpsilonSpent);
        }
        if self.share_auth_fail.is_some() {
            keys.insert(MetricKey::ShareAuthFail);
        }
        keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecOutcome {
    pub state: EpState,
    pub metrics: EmittedMetrics,
    /// False when the opcode must be retried (a rejected share proof).
    pub advance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Fhe,
    Dp,
    Mpc,
}

impl Backend {
    pub fn for_ep_id(ep_id: &str) -> Option<Self> {
        match ep_id {
            EP_FHE => Some(Backend::Fhe),
            EP_DP => Some(Backend::Dp),
            EP_MPC => Some(Backend::Mpc),
            _ => None,
        }
    }
}

/// A bound execution provider: descriptor plus back-end behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct EpInstance {
    pub descriptor: EpDescriptor,
    pub backend: Backend,
    pub params: EpParams,
}

/// Resolves the manifest's EP against the registry. Admission has already
/// checked opcode coverage, so failures here are contract violations.
pub fn bind_ep(
    manifest: &Manifest,
    registry: &EpRegistry,
    params: EpParams,
) -> Result<EpInstance, EpError> {
    let descriptor = registry
        .get(&manifest.execution_provider)
        .ok_or_else(|| EpError::UnknownEp(manifest.execution_provider.clone()))?;
    let backend = Backend::for_ep_id(&descriptor.ep_id)
        .ok_or_else(|| EpError::UnknownEp(descriptor.ep_id.clone()))?;
    if let Some(op) = manifest
        .plugin
        .dsl_ops
        .iter()
        .find(|op| !descriptor.implemented_ops.contains(op))
    {
        return Err(EpError::UnimplementedOpcode {
            ep: descriptor.ep_id.clone(),
            op: *op,
        });
    }
    Ok(EpInstance {
        descriptor: descriptor.clone(),
        backend,
        params,
    })
}

impl EpInstance {
    pub fn initial_state(&self) -> EpState {
        match self.backend {
            Backend::Fhe => {
                let p = self.params.fhe;
                EpState::Fhe(FheState {
                    noise_bits: p.initial_noise,
                    levels_left: p.initial_levels,
                    initial_noise: p.initial_noise,
                    initial_levels: p.initial_levels,
                    op_cost: p.op_cost,
                })
            }
            Backend::Dp => EpState::Dp(DpState {
                epsilon_spent: 0.0,
                epsilon_step: self.params.dp.epsilon_step,
            }),
            Backend::Mpc => EpState::Mpc(MpcState { share_auth_fail: 0 }),
        }
    }

    pub fn implements(&self, op: Opcode) -> bool {
        self.descriptor.implemented_ops.contains(&op)
    }

    /// Metrics for `state`, restricted to the descriptor's metric keys.
    pub fn metrics(&self, state: &EpState) -> EmittedMetrics {
        let keys = &self.descriptor.metric_keys;
        let keep_u = |k: MetricKey, v: u64| keys.contains(&k).then_some(v);
        match state {
            EpState::Fhe(s) => EmittedMetrics {
                noise_bits: keep_u(MetricKey::NoiseBits, s.noise_bits),
                levels_left: keep_u(MetricKey::LevelsLeft, s.levels_left),
                ..Default::default()
            },
            EpState::Dp(s) => EmittedMetrics {
                epsilon_spent: keys
                    .contains(&MetricKey::EpsilonSpent)
                    .then_some(s.epsilon_spent),
                ..Default::default()
            },
            EpState::Mpc(s) => EmittedMetrics {
                share_auth_fail: keep_u(MetricKey::ShareAuthFail, s.share_auth_fail),
                ..Default::default()
            },
        }
    }

    /// Restores a fresh noise budget (FHE only).
    pub fn bootstrap(&self, state: &EpState) -> EpState {
        let mut next = *state;
        if let EpState::Fhe(s) = &mut next {
            s.bootstrap();
        }
        next
    }
}

pub fn ep_execute(
    ep: &EpInstance,
    state: &EpState,
    op: Opcode,
    faults: &mut FaultFlags,
) -> Result<ExecOutcome, EpError> {
    if !ep.implements(op) {
        return Err(EpError::UnimplementedOpcode {
            ep: ep.descriptor.ep_id.clone(),
            op,
        });
    }
    let mut next = *state;
    let mut advance = true;
    match &mut next {
        EpState::Fhe(s) => match op {
            Opcode::Map => {
                s.noise_bits = s.noise_bits.saturating_sub(s.op_cost);
                s.levels_left = s.levels_left.saturating_sub(1);
            }
            Opcode::AggSum | Opcode::AggCount => {
                s.noise_bits = s.noise_bits.saturating_sub(s.op_cost)
            }
            Opcode::Bootstrap => s.bootstrap(),
            _ => {}
        },
        EpState::Dp(s) => {
            if matches!(op, Opcode::AddNoise | Opcode::Release) {
                s.epsilon_spent += s.epsilon_step;
            }
        }
        EpState::Mpc(s) => {
            if op == Opcode::VerifyShare && faults.invalid_shares > 0 {
                faults.invalid_shares -= 1;
                s.share_auth_fail += 1;
                advance = false;
            }
        }
    }
    Ok(ExecOutcome {
        state: next,
        metrics: ep.metrics(&next),
        advance,
    })
}

/// Immediate metric effect of a `noise-drain` (FHE) or `extra-dp-spend` (DP)
/// injection. Back-ends without the metric are unaffected.
pub fn apply_drain(state: &EpState, noise_bits: u64) -> EpState {
    let mut next = *state;
    if let EpState::Fhe(s) = &mut next {
        s.noise_bits = s.noise_bits.saturating_sub(noise_bits);
    }
    next
}

pub fn apply_extra_spend(state: &EpState, epsilon: f64) -> EpState {
    let mut next = *state;
    if let EpState::Dp(s) = &mut next {
        s.epsilon_spent += epsilon;
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::default_ep_registry;

    fn instance(ep_id: &str) -> EpInstance {
        let descriptor = default_ep_registry().get(ep_id).unwrap().clone();
        EpInstance {
            backend: Backend::for_ep_id(ep_id).unwrap(),
            descriptor,
            params: EpParams::default(),
        }
    }

    fn run(ep: &EpInstance, ops: &[Opcode], faults: &mut FaultFlags) -> (EpState, EmittedMetrics) {
        let mut state = ep.initial_state();
        let mut metrics = ep.metrics(&state);
        for op in ops {
            let out = ep_execute(ep, &state, *op, faults).unwrap();
            state = out.state;
            metrics = out.metrics;
        }
        (state, metrics)
    }

    #[test]
    fn fhe_three_aggregations_leave_29_bits() {
        let ep = instance(EP_FHE);
        let (_, m) = run(&ep, &[Opcode::AggSum; 3], &mut FaultFlags::default());
        assert_eq!(m.noise_bits, Some(41 - 3 * 4));
        assert_eq!(m.noise_bits, Some(29));
        assert_eq!(m.levels_left, Some(5));
    }

    #[test]
    fn fhe_map_consumes_a_level_and_bootstrap_restores() {
        let ep = instance(EP_FHE);
        let (_, m) = run(
            &ep,
            &[Opcode::Map, Opcode::Map, Opcode::AggSum],
            &mut FaultFlags::default(),
        );
        assert_eq!((m.noise_bits, m.levels_left), (Some(29), Some(3)));
        let (_, m) = run(
            &ep,
            &[Opcode::Map, Opcode::Map, Opcode::AggSum, Opcode::Bootstrap],
            &mut FaultFlags::default(),
        );
        assert_eq!((m.noise_bits, m.levels_left), (Some(41), Some(5)));
    }

    #[test]
    fn fhe_noise_floors_at_zero() {
        let ep = instance(EP_FHE);
        let (_, m) = run(&ep, &[Opcode::AggSum; 20], &mut FaultFlags::default());
        assert_eq!(m.noise_bits, Some(0));
    }

    #[test]
    fn dp_nine_noise_additions_spend_072() {
        let ep = instance(EP_DP);
        let (_, m) = run(&ep, &[Opcode::AddNoise; 9], &mut FaultFlags::default());
        let eps = m.epsilon_spent.unwrap();
        assert!((eps - 9.0 * 0.08).abs() < 1e-12);
        assert!((eps - 0.72).abs() < 1e-12);
        assert_eq!(m.noise_bits, None);
    }

    #[test]
    fn mpc_counts_injected_invalid_proofs() {
        let ep = instance(EP_MPC);
        let mut faults = FaultFlags { invalid_shares: 2 };
        let mut state = ep.initial_state();
        let first = ep_execute(&ep, &state, Opcode::VerifyShare, &mut faults).unwrap();
        assert!(!first.advance);
        state = first.state;
        let second = ep_execute(&ep, &state, Opcode::VerifyShare, &mut faults).unwrap();
        assert_eq!(second.metrics.share_auth_fail, Some(2));
        let third = ep_execute(&ep, &second.state, Opcode::VerifyShare, &mut faults).unwrap();
        assert!(third.advance);
        assert_eq!(third.metrics.share_auth_fail, Some(2));
    }

    #[test]
    fn emitted_keys_match_descriptor_for_every_opcode() {
        for ep_id in [EP_FHE, EP_DP, EP_MPC] {
            let ep = instance(ep_id);
            let mut state = ep.initial_state();
            for op in Opcode::ALL.into_iter().filter(|op| ep.implements(*op)) {
                let out =
                    ep_execute(&ep, &state, op, &mut FaultFlags { invalid_shares: 1 }).unwrap();
                assert_eq!(
                    out.metrics.keys(),
                    ep.descriptor.metric_keys,
                    "{ep_id} {op}"
                );
                state = out.state;
            }
        }
    }

    #[test]
    fn unimplemented_opcode_is_a_contract_violation() {
        let ep = instance(EP_DP);
        let err = ep_execute(
            &ep,
            &ep.initial_state(),
            Opcode::Bootstrap,
            &mut FaultFlags::default(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            EpError::UnimplementedOpcode {
                ep: EP_DP.into(),
                op: Opcode::Bootstrap
            }
        );
    }

    #[test]
    fn plugin_program_shape_is_checked() {
        use Opcode::*;
        assert_eq!(
            PluginDescriptor::new("p", []).validate(),
            Err(EpError::EmptyProgram)
        );
        assert_eq!(
            PluginDescriptor::new("p", [Load, Release]).validate(),
            Err(EpError::MissingSend)
        );
        assert_eq!(
            PluginDescriptor::new("p", [Merge, Send, Release]).validate(),
            Err(EpError::MergeBeforeSend(0))
        );
        assert_eq!(
            PluginDescriptor::new("p", [Send, Merge]).validate(),
            Err(EpError::ReleaseNotLast)
        );
        PluginDescriptor::new("p", [Load, AggSum, Send, Merge, Release])
            .validate()
            .unwrap();
    }

    #[test]
    fn opcode_wire_names() {
        assert_eq!(
            serde_json::to_string(&Opcode::VerifyShare).unwrap(),
            r#""VERIFY_SHARE""#
        );
        assert_eq!(
            serde_json::from_str::<Opcode>(r#""AGG_SUM""#).unwrap(),
            Opcode::AggSum
        );
    }
}
