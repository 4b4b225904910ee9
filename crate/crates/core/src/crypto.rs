//! Pluggable authenticators: pairwise MACs for the echo variant's links,
//! signatures and hashes for the signature variant.
//!
//! Both built-in backends are deterministic keyed-hash constructions so that
//! simulation runs are bit-reproducible; the registry acts as the trusted
//! verifier. Digest width is fixed at 32 bytes across backends, keeping
//! message formats backend-independent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::model::{ClientId, ReplicaId, SystemConfig};

pub const DIGEST_LEN: usize = 32;
pub const SIG_LEN: usize = 64;

pub type Digest32 = [u8; DIGEST_LEN];

/// Collision-resistant 32-byte digest of a message.
pub fn digest(message: &[u8]) -> Digest32 {
    Sha256::digest(message).into()
}

/// A signing party: replica or client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartyId {
    Replica(ReplicaId),
    Client(ClientId),
}

impl PartyId {
    fn tag_bytes(&self) -> [u8; 5] {
        let mut out = [0u8; 5];
        match self {
            PartyId::Replica(r) => {
                out[0] = 1;
                out[1..].copy_from_slice(&r.0.to_le_bytes());
            }
            PartyId::Client(c) => {
                out[0] = 2;
                out[1..].copy_from_slice(&c.0.to_le_bytes());
            }
        }
        out
    }
}

/// Signature over a message, attributable to its signer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub signer: PartyId,
    #[serde(with = "serde_bytes64")]
    pub bytes: [u8; SIG_LEN],
}

/// Authenticator for one message on one replica-pair link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacTag(pub Digest32);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("no key registered for {0:?}")]
    UnknownSigner(PartyId),
    #[error("no pairwise key for ({0}, {1})")]
    UnknownPair(ReplicaId, ReplicaId),
}

/// Which construction backs signatures. MACs are always keyed digests.
///
/// The two hash backends are deterministic stand-ins that keep simulation
/// runs fast and bit-reproducible; `EcdsaP256` is real public-key crypto for
/// integration tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CryptoBackend {
    /// Single-pass keyed digest.
    #[default]
    SimKeyed,
    /// Two-pass construction with inner/outer pads.
    PadHash,
    /// ECDSA on the NIST P-256 curve (deterministic nonces).
    EcdsaP256,
}

/// Holds every configured party's key material. Immutable after setup;
/// verification is stateless and callable concurrently.
#[derive(Debug, Clone)]
pub struct KeyRegistry {
    backend: CryptoBackend,
    secrets: BTreeMap<PartyId, Digest32>,
    pair_keys: BTreeMap<(ReplicaId, ReplicaId), Digest32>,
    ecdsa: BTreeMap<PartyId, (p256::ecdsa::SigningKey, p256::ecdsa::VerifyingKey)>,
}

fn derive(master: &[u8], tag: &str, extra: &[u8]) -> Digest32 {
    let mut h = Sha256::new();
    h.update(master);
    h.update(tag.as_bytes());
    h.update(extra);
    h.finalize().into()
}

/// Deterministic P-256 key from a derived secret: rehash until the bytes
/// form a valid scalar.
fn ecdsa_key_from(seed: Digest32) -> p256::ecdsa::SigningKey {
    let mut candidate = seed;
    loop {
        if let Ok(sk) = p256::ecdsa::SigningKey::from_bytes(&candidate.into()) {
            return sk;
        }
        candidate = digest(&candidate);
    }
}

impl KeyRegistry {
    /// Derives one key pair per replica and client plus symmetric pairwise
    /// MAC keys, all from `seed`.
    pub fn generate(cfg: &SystemConfig, seed: u64, backend: CryptoBackend) -> Self {
        let master = seed.to_le_bytes();
        let mut secrets = BTreeMap::new();
        let replicas = cfg.all_replicas();
        for r in &replicas {
            let p = PartyId::Replica(*r);
            secrets.insert(p, derive(&master, "party", &p.tag_bytes()));
        }
        for c in cfg.clients() {
            let p = PartyId::Client(c);
            secrets.insert(p, derive(&master, "party", &p.tag_bytes()));
        }
        let mut pair_keys = BTreeMap::new();
        for a in &replicas {
            for b in &replicas {
                if a.0 < b.0 {
                    let mut extra = Vec::with_capacity(8);
                    extra.extend_from_slice(&a.0.to_le_bytes());
                    extra.extend_from_slice(&b.0.to_le_bytes());
                    pair_keys.insert((*a, *b), derive(&master, "pair", &extra));
                }
            }
        }
        let mut reg = KeyRegistry {
            backend,
            secrets,
            pair_keys,
            ecdsa: BTreeMap::new(),
        };
        if backend == CryptoBackend::EcdsaP256 {
            let parties: Vec<PartyId> = reg.secrets.keys().copied().collect();
            for p in parties {
                reg.ensure_ecdsa(p);
            }
        }
        reg
    }

    fn ensure_ecdsa(&mut self, p: PartyId) {
        if self.ecdsa.contains_key(&p) {
            return;
        }
        if let Some(secret) = self.secrets.get(&p) {
            let sk = ecdsa_key_from(*secret);
            let vk = p256::ecdsa::VerifyingKey::from(&sk);
            self.ecdsa.insert(p, (sk, vk));
        }
    }

    /// Registers a party added after initial setup (a joining replica).
    pub fn register_replica(&mut self, seed: u64, r: ReplicaId) {
        let master = seed.to_le_bytes();
        let p = PartyId::Replica(r);
        self.secrets
            .entry(p)
            .or_insert_with(|| derive(&master, "party", &p.tag_bytes()));
        if self.backend == CryptoBackend::EcdsaP256 {
            self.ensure_ecdsa(p);
        }
        let existing: Vec<ReplicaId> = self
            .secrets
            .keys()
            .filter_map(|p| match p {
                PartyId::Replica(r) => Some(*r),
                _ => None,
            })
            .collect();
        for a in existing {
            if a != r {
                let (lo, hi) = if a.0 < r.0 { (a, r) } else { (r, a) };
                let mut extra = Vec::with_capacity(8);
                extra.extend_from_slice(&lo.0.to_le_bytes());
                extra.extend_from_slice(&hi.0.to_le_bytes());
                self.pair_keys
                    .entry((lo, hi))
                    .or_insert_with(|| derive(&master, "pair", &extra));
            }
        }
    }

    fn keyed(&self, key: &Digest32, domain: &str, message: &[u8]) -> Digest32 {
        match self.backend {
            // MACs stay keyed digests under every backend
            CryptoBackend::SimKeyed | CryptoBackend::EcdsaP256 => {
                let mut h = Sha256::new();
                h.update(key);
                h.update(domain.as_bytes());
                h.update(message);
                h.finalize().into()
            }
            CryptoBackend::PadHash => {
                let mut ipad = *key;
                let mut opad = *key;
                for b in ipad.iter_mut() {
                    *b ^= 0x36;
                }
                for b in opad.iter_mut() {
                    *b ^= 0x5c;
                }
                let mut inner = Sha256::new();
                inner.update(ipad);
                inner.update(domain.as_bytes());
                inner.update(message);
                let inner: Digest32 = inner.finalize().into();
                let mut outer = Sha256::new();
                outer.update(opad);
                outer.update(inner);
                outer.finalize().into()
            }
        }
    }

    pub fn sign(&self, signer: PartyId, message: &[u8]) -> Result<Signature, CryptoError> {
        if self.backend == CryptoBackend::EcdsaP256 {
            use p256::ecdsa::signature::Signer as _;
            let (sk, _) = self
                .ecdsa
                .get(&signer)
                .ok_or(CryptoError::UnknownSigner(signer))?;
            let sig: p256::ecdsa::Signature = sk.sign(message);
            let mut bytes = [0u8; SIG_LEN];
            bytes.copy_from_slice(&sig.to_bytes());
            return Ok(Signature { signer, bytes });
        }
        let key = self
            .secrets
            .get(&signer)
            .ok_or(CryptoError::UnknownSigner(signer))?;
        let a = self.keyed(key, "sig/a", message);
        let b = self.keyed(key, "sig/b", message);
        let mut bytes = [0u8; SIG_LEN];
        bytes[..32].copy_from_slice(&a);
        bytes[32..].copy_from_slice(&b);
        Ok(Signature { signer, bytes })
    }

    pub fn verify(&self, signer: PartyId, message: &[u8], sig: &Signature) -> bool {
        if sig.signer != signer {
            return false;
        }
        if self.backend == CryptoBackend::EcdsaP256 {
            use p256::ecdsa::signature::Verifier as _;
            let Some((_, vk)) = self.ecdsa.get(&signer) else {
                return false;
            };
            let Ok(parsed) = p256::ecdsa::Signature::from_slice(&sig.bytes) else {
                return false;
            };
            return vk.verify(message, &parsed).is_ok();
        }
        match self.sign(signer, message) {
            Ok(expected) => expected.bytes == sig.bytes,
            Err(_) => false,
        }
    }

    fn pair_key(&self, a: ReplicaId, b: ReplicaId) -> Result<&Digest32, CryptoError> {
        let k = if a.0 < b.0 { (a, b) } else { (b, a) };
        self.pair_keys.get(&k).ok_or(CryptoError::UnknownPair(a, b))
    }

    pub fn mac(
        &self,
        sender: ReplicaId,
        receiver: ReplicaId,
        message: &[u8],
    ) -> Result<MacTag, CryptoError> {
        let key = self.pair_key(sender, receiver)?;
        Ok(MacTag(self.keyed(key, "mac", message)))
    }

    pub fn verify_mac(
        &self,
        sender: ReplicaId,
        receiver: ReplicaId,
        message: &[u8],
        tag: &MacTag,
    ) -> bool {
        match self.mac(sender, receiver, message) {
            Ok(expected) => expected.0 == tag.0,
            Err(_) => false,
        }
    }
}

mod serde_bytes64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 64], s: S) -> Result<S::Ok, S::Error> {
        bytes.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 64], D::Error> {
        let v = Vec::<u8>::deserialize(d)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 64 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry(backend: CryptoBackend) -> KeyRegistry {
        let cfg = SystemConfig::single_shard(4, 1, 4, 100).unwrap();
        KeyRegistry::generate(&cfg, 7, backend)
    }

    #[test]
    fn sign_verify_round_trip() {
        for backend in [
            CryptoBackend::SimKeyed,
            CryptoBackend::PadHash,
            CryptoBackend::EcdsaP256,
        ] {
            let reg = registry(backend);
            let r1 = PartyId::Replica(ReplicaId(1));
            let r2 = PartyId::Replica(ReplicaId(2));
            let sig = reg.sign(r1, b"abc").unwrap();
            assert!(reg.verify(r1, b"abc", &sig));
            assert!(!reg.verify(r2, b"abc", &sig));
            assert!(!reg.verify(r1, b"abd", &sig));
        }
    }

    #[test]
    fn unknown_signer_rejected() {
        let reg = registry(CryptoBackend::SimKeyed);
        let ghost = PartyId::Replica(ReplicaId(99));
        assert!(matches!(
            reg.sign(ghost, b"x"),
            Err(CryptoError::UnknownSigner(_))
        ));
    }

    #[test]
    fn mac_round_trip_and_cross_pair() {
        let reg = registry(CryptoBackend::SimKeyed);
        let (r1, r2, r3) = (ReplicaId(1), ReplicaId(2), ReplicaId(3));
        let tag = reg.mac(r1, r2, b"m").unwrap();
        assert!(reg.verify_mac(r1, r2, b"m", &tag));
        assert!(reg.verify_mac(r2, r1, b"m", &tag)); // symmetric key
        assert!(!reg.verify_mac(r1, r3, b"m", &tag));
        assert!(!reg.verify_mac(r1, r2, b"other", &tag));
    }

    #[test]
    fn digest_is_deterministic_and_fixed_width() {
        assert_eq!(digest(b"x"), digest(b"x"));
        assert_eq!(digest(b"").len(), DIGEST_LEN);
    }

    #[test]
    fn digest_distinct_over_corpus() {
        let corpus: Vec<Vec<u8>> = (0u32..256)
            .map(|i| i.to_le_bytes().to_vec())
            .chain([b"".to_vec(), b"a".to_vec(), b"ab".to_vec()])
            .collect();
        let mut seen = std::collections::BTreeSet::new();
        for m in &corpus {
            assert!(seen.insert(digest(m)), "collision on {:?}", m);
        }
    }

    #[test]
    fn backends_disagree_but_both_verify() {
        let a = registry(CryptoBackend::SimKeyed);
        let b = registry(CryptoBackend::PadHash);
        let p = PartyId::Replica(ReplicaId(0));
        let sa = a.sign(p, b"m").unwrap();
        let sb = b.sign(p, b"m").unwrap();
        assert_ne!(sa.bytes, sb.bytes);
        assert!(a.verify(p, b"m", &sa));
        assert!(b.verify(p, b"m", &sb));
        assert!(!a.verify(p, b"m", &sb));
    }
}
