//! Operator overrides: signed requests that enqueue one of the existing
//! A-command kinds for the next tick.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::signing_bytes;
use crate::crypto::{Identity, KeyRegistry, SignatureError};
use crate::fsm::{CommandKind, CommandTarget};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideRequest {
    pub operator_id: String,
    pub kind: CommandKind,
    pub target: CommandTarget,
    pub nonce: String,
    #[serde(default)]
    pub sig: String,
}

impl OverrideRequest {
    pub fn signed(
        operator: &Identity,
        kind: CommandKind,
        target: CommandTarget,
        nonce: impl Into<String>,
    ) -> Self {
        let mut req = OverrideRequest {
            operator_id: operator.id().to_string(),
            kind,
            target,
            nonce: nonce.into(),
            sig: String::new(),
        };
        req.sig = operator.sign(&req.signing_bytes());
        req
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        signing_bytes(self).expect("override requests serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverrideRejection {
    UnknownOperator,
    BadSignature,
    ReplayedNonce,
    JobTerminal,
    BadTarget,
}

impl fmt::Display for OverrideRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OverrideRejection::UnknownOperator => "unknown-operator",
            OverrideRejection::BadSignature => "bad-signature",
            OverrideRejection::ReplayedNonce => "replayed-nonce",
            OverrideRejection::JobTerminal => "job-terminal",
            OverrideRejection::BadTarget => "bad-target",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "kebab-case")]
pub enum OverrideOutcome {
    Accepted,
    /// Same nonce and identical request resubmitted; no second command.
    AcceptedDuplicate,
    Rejected(OverrideRejection),
}

impl OverrideOutcome {
    pub fn is_accepted(self) -> bool {
        matches!(
            self,
            OverrideOutcome::Accepted | OverrideOutcome::AcceptedDuplicate
        )
    }
}

/// Tracks override nonces for one job.
#[derive(Debug, Clone, Default)]
pub struct OverrideDesk {
    seen: BTreeMap<String, OverrideRequest>,
}

impl OverrideDesk {
    /// `known_target` reports whether a node id names a participant.
    pub fn check(
        &mut self,
        request: &OverrideRequest,
        operators: &KeyRegistry,
        job_terminal: bool,
        known_target: impl Fn(&str) -> bool,
    ) -> OverrideOutcome {
        match operators.verify(&request.operator_id, &request.signing_bytes(), &request.sig) {
            Ok(()) => {}
            Err(SignatureError::UnknownIdentity(_)) => {
                return OverrideOutcome::Rejected(OverrideRejection::UnknownOperator)
            }
            Err(_) => return OverrideOutcome::Rejected(OverrideRejection::BadSignature),
        }
        if let Some(previous) = self.seen.get(&request.nonce) {
            return if previous == request {
                OverrideOutcome::AcceptedDuplicate
            } else {
                OverrideOutcome::Rejected(OverrideRejection::ReplayedNonce)
            };
        }
        if job_terminal {
            return OverrideOutcome::Rejected(OverrideRejection::JobTerminal);
        }
        let target_ok = match (&request.kind, &request.target) {
            (CommandKind::IsolateParty, CommandTarget::Node(id)) => known_target(id),
            (CommandKind::IsolateParty, _) => false,
            (_, CommandTarget::Node(id)) => known_target(id),
            _ => true,
        };
        if !target_ok {
            return OverrideOutcome::Rejected(OverrideRejection::BadTarget);
        }
        self.seen.insert(request.nonce.clone(), request.clone());
        OverrideOutcome::Accepted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Identity, KeyRegistry) {
        let op = Identity::derive(7, "op-alice");
        let mut reg = KeyRegistry::default();
        reg.insert("op-alice", op.verifying_key());
        (op, reg)
    }

    #[test]
    fn accept_then_duplicate_then_replay() {
        let (op, reg) = setup();
        let mut desk = OverrideDesk::default();
        let req = OverrideRequest::signed(&op, CommandKind::AbortJob, CommandTarget::All, "n1");
        assert_eq!(
            desk.check(&req, &reg, false, |_| true),
            OverrideOutcome::Accepted
        );
        assert_eq!(
            desk.check(&req, &reg, false, |_| true),
            OverrideOutcome::AcceptedDuplicate
        );
        let other = OverrideRequest::signed(&op, CommandKind::Bootstrap, CommandTarget::All, "n1");
        assert_eq!(
            desk.check(&other, &reg, false, |_| true),
            OverrideOutcome::Rejected(OverrideRejection::ReplayedNonce)
        );
    }

    #[test]
    fn rejections() {
        let (op, reg) = setup();
        let mut desk = OverrideDesk::default();
        let mut req = OverrideRequest::signed(&op, CommandKind::AbortJob, CommandTarget::All, "n1");
        req.kind = CommandKind::Bootstrap;
        assert_eq!(
            desk.check(&req, &reg, false, |_| true),
            OverrideOutcome::Rejected(OverrideRejection::BadSignature)
        );
        let mallory = Identity::derive(7, "op-mallory");
        let req =
            OverrideRequest::signed(&mallory, CommandKind::AbortJob, CommandTarget::All, "n2");
        assert_eq!(
            desk.check(&req, &reg, false, |_| true),
            OverrideOutcome::Rejected(OverrideRejection::UnknownOperator)
        );
        let req = OverrideRequest::signed(&op, CommandKind::AbortJob, CommandTarget::All, "n3");
        assert_eq!(
            desk.check(&req, &reg, true, |_| true),
            OverrideOutcome::Rejected(OverrideRejection::JobTerminal)
        );
        let req = OverrideRequest::signed(&op, CommandKind::IsolateParty, CommandTarget::All, "n4");
        assert_eq!(
            desk.check(&req, &reg, false, |_| true),
            OverrideOutcome::Rejected(OverrideRejection::BadTarget)
        );
        let req = OverrideRequest::signed(
            &op,
            CommandKind::IsolateParty,
            CommandTarget::participant("node-9"),
            "n5",
        );
        assert_eq!(
            desk.check(&req, &reg, false, |id| id == "node-1"),
            OverrideOutcome::Rejected(OverrideRejection::BadTarget)
        );
    }

    #[test]
    fn outcome_wire_form() {
        assert_eq!(
            serde_json::to_string(&OverrideOutcome::Accepted).unwrap(),
            r#"{"status":"accepted"}"#
        );
        assert_eq!(
            serde_json::to_string(&OverrideOutcome::Rejected(OverrideRejection::BadSignature))
                .unwrap(),
            r#"{"status":"rejected","reason":"bad-signature"}"#
        );
    }
}
