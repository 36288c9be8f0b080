//! Ed25519 identities and the `ed25519:<hex>` signature string form shared by
//! frames, commands, acknowledgments and operator overrides.

use std::collections::BTreeMap;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};

use crate::digest::sha256;

pub const SIG_PREFIX: &str = "ed25519:";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SignatureError {
    #[error("no key registered for identity `{0}`")]
    UnknownIdentity(String),
    #[error("malformed signature string")]
    Malformed,
    #[error("signature does not verify")]
    Invalid,
    #[error("malformed public key: {0}")]
    BadPublicKey(String),
}

/// Secret signing key for one participant, operator, or the control plane.
#[derive(Clone)]
pub struct Identity {
    id: String,
    key: SigningKey,
}

impl std::fmt::Debug for Identity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Identity")
            .field("id", &self.id)
            .finish_non_exhaustive()
    }
}

impl Identity {
    pub fn from_secret(id: impl Into<String>, secret: [u8; 32]) -> Self {
        Self {
            id: id.into(),
            key: SigningKey::from_bytes(&secret),
        }
    }

    /// Deterministic key material for simulated parties: SHA-256 of a domain
    /// tag, the run seed and the identity name.
    pub fn derive(seed: u64, id: &str) -> Self {
        let mut material = b"guardian-fc/identity/v1/".to_vec();
        material.extend_from_slice(&seed.to_be_bytes());
        material.extend_from_slice(id.as_bytes());
        Self::from_secret(id, *sha256(&material).as_bytes())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    pub fn public_hex(&self) -> String {
        hex::encode(self.key.verifying_key().to_bytes())
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn sign(&self, message: &[u8]) -> String {
        let sig = self.key.sign(message);
        format!("{SIG_PREFIX}{}", hex::encode(sig.to_bytes()))
    }
}

/// Signing keys held by whoever produces signatures (the simulated data plane
/// holds one per participant).
#[derive(Debug, Clone, Default)]
pub struct Keyring {
    keys: BTreeMap<String, Identity>,
}

impl Keyring {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, identity: Identity) {
        self.keys.insert(identity.id.clone(), identity);
    }

    pub fn get(&self, id: &str) -> Result<&Identity, SignatureError> {
        self.keys
            .get(id)
            .ok_or_else(|| SignatureError::UnknownIdentity(id.to_string()))
    }

    pub fn registry(&self) -> KeyRegistry {
        let mut reg = KeyRegistry::default();
        for identity in self.keys.values() {
            reg.insert(identity.id.clone(), identity.verifying_key());
        }
        reg
    }
}

/// Public keys by identity. Serializes as `{id: hex-public-key}`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyRegistry {
    keys: BTreeMap<String, VerifyingKey>,
}

impl KeyRegistry {
    pub fn insert(&mut self, id: impl Into<String>, key: VerifyingKey) {
        self.keys.insert(id.into(), key);
    }

    pub fn insert_hex(
        &mut self,
        id: impl Into<String>,
        public_hex: &str,
    ) -> Result<(), SignatureError> {
        let bytes: [u8; 32] = hex::decode(public_hex)
            .map_err(|e| SignatureError::BadPublicKey(e.to_string()))?
            .try_into()
            .map_err(|_| SignatureError::BadPublicKey("expected 32 bytes".into()))?;
        let key = VerifyingKey::from_bytes(&bytes)
            .map_err(|e| SignatureError::BadPublicKey(e.to_string()))?;
        self.insert(id, key);
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.keys.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.keys.keys().map(String::as_str)
    }

    pub fn verify(&self, id: &str, message: &[u8], sig: &str) -> Result<(), SignatureError> {
        let key = self
            .keys
            .get(id)
            .ok_or_else(|| SignatureError::UnknownIdentity(id.to_string()))?;
        let sig = parse_signature(sig)?;
        key.verify_strict(message, &sig)
            .map_err(|_| SignatureError::Invalid)
    }
}

fn parse_signature(sig: &str) -> Result<Signature, SignatureError> {
    let hex_part = sig
        .strip_prefix(SIG_PREFIX)
        .ok_or(SignatureError::Malformed)?;
    if hex_part.bytes().any(|b| b.is_ascii_uppercase()) {
        return Err(SignatureError::Malformed);
    }
    let bytes: [u8; 64] = hex::decode(hex_part)
        .map_err(|_| SignatureError::Malformed)?
        .try_into()
        .map_err(|_| SignatureError::Malformed)?;
    Ok(Signature::from_bytes(&bytes))
}

/// One entry of an operator registry file (`operators.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorEntry {
    pub operator_id: String,
    pub public_key: String,
}

pub fn load_operator_registry(entries: &[OperatorEntry]) -> Result<KeyRegistry, SignatureError> {
    let mut reg = KeyRegistry::default();
    for e in entries {
        reg.insert_hex(e.operator_id.clone(), &e.public_key)?;
    }
    Ok(reg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_verify_round_trip() {
        let a = Identity::derive(1, "node-1");
        let mut reg = KeyRegistry::default();
        reg.insert("node-1", a.verifying_key());
        let sig = a.sign(b"hello");
        assert!(sig.starts_with(SIG_PREFIX));
        assert_eq!(sig.len(), SIG_PREFIX.len() + 128);
        reg.verify("node-1", b"hello", &sig).unwrap();
        assert_eq!(
            reg.verify("node-1", b"hellp", &sig),
            Err(SignatureError::Invalid)
        );
        assert!(matches!(
            reg.verify("node-2", b"hello", &sig),
            Err(SignatureError::UnknownIdentity(_))
        ));
        assert_eq!(
            reg.verify("node-1", b"hello", "rsa:00"),
            Err(SignatureError::Malformed)
        );
    }

    #[test]
    fn derived_keys_are_stable_and_distinct() {
        assert_eq!(
            Identity::derive(7, "x").public_hex(),
            Identity::derive(7, "x").public_hex()
        );
        assert_ne!(
            Identity::derive(7, "x").public_hex(),
            Identity::derive(8, "x").public_hex()
        );
        assert_ne!(
            Identity::derive(7, "x").public_hex(),
            Identity::derive(7, "y").public_hex()
        );
    }

    #[test]
    fn hex_registry_round_trip() {
        let op = Identity::derive(0, "alice");
        let reg = load_operator_registry(&[OperatorEntry {
            operator_id: "alice".into(),
            public_key: op.public_hex(),
        }])
        .unwrap();
        reg.verify("alice", b"m", &op.sign(b"m")).unwrap();
    }
}
