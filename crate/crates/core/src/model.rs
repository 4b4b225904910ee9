//! Domain types shared by every protocol layer: identifiers, payments,
//! exclusive per-client logs, account state and system configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::DependencyCertificate;

/// Identifies a client (account owner). Unique within a configuration and
/// mapped to exactly one representative replica.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct ClientId(pub u32);

/// Identifies a replica. Each replica is a member of exactly one shard.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct ReplicaId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Identifier of a payment: the spender together with the sequence number the
/// spender assigned. Within one correct replica's settled state each id maps
/// to at most one payment.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct PaymentId {
    pub spender: ClientId,
    pub seq: u64,
}

impl PaymentId {
    pub fn new(spender: ClientId, seq: u64) -> Self {
        PaymentId { spender, seq }
    }
}

impl fmt::Display for PaymentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.spender, self.seq)
    }
}

/// The signed 4-tuple a credit attests to: (spender, seq, beneficiary, amount).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PaymentTuple {
    pub id: PaymentId,
    pub beneficiary: ClientId,
    pub amount: u64,
}

/// A transfer record. `deps` carries dependency certificates accumulated by
/// the spender's representative; it is empty under the echo variant.
///
/// Self-payments (beneficiary == spender) are permitted and conserve funds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payment {
    pub id: PaymentId,
    pub beneficiary: ClientId,
    pub amount: u64,
    pub deps: Vec<DependencyCertificate>,
}

impl Payment {
    pub fn new(spender: ClientId, seq: u64, beneficiary: ClientId, amount: u64) -> Self {
        Payment {
            id: PaymentId::new(spender, seq),
            beneficiary,
            amount,
            deps: Vec::new(),
        }
    }

    pub fn tuple(&self) -> PaymentTuple {
        PaymentTuple {
            id: self.id,
            beneficiary: self.beneficiary,
            amount: self.amount,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("sequence gap: log has {expected} entries, payment carries seq {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("ownership: log belongs to {owner}, payment spender is {spender}")]
    WrongOwner { owner: ClientId, spender: ClientId },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("replica count {n} is not 3f+1 for f={f}")]
    NotThreeFPlusOne { n: u32, f: u32 },
    #[error("shards must not share replicas: {0}")]
    OverlappingShards(ReplicaId),
    #[error("client {0} has no representative")]
    MissingRepresentative(ClientId),
    #[error("client {0} has no initial balance entry")]
    MissingBalance(ClientId),
    #[error("representative {replica} of client {client} is not a member of any shard")]
    UnknownRepresentative { client: ClientId, replica: ReplicaId },
    #[error("shard {0} is empty")]
    EmptyShard(usize),
}

/// Append-only log of one client's outgoing payments; the replicated unit of
/// state. Entry `k` always carries sequence number `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct XLog {
    owner: ClientId,
    entries: Vec<Payment>,
}

impl XLog {
    pub fn new(owner: ClientId) -> Self {
        XLog {
            owner,
            entries: Vec::new(),
        }
    }

    pub fn owner(&self) -> ClientId {
        self.owner
    }

    pub fn entries(&self) -> &[Payment] {
        &self.entries
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends the next payment. Rejects non-contiguous sequence numbers and
    /// payments of another spender; prior entries never change.
    pub fn append(&mut self, p: Payment) -> Result<(), ModelError> {
        if p.id.spender != self.owner {
            return Err(ModelError::WrongOwner {
                owner: self.owner,
                spender: p.id.spender,
            });
        }
        if p.id.seq != self.len() {
            return Err(ModelError::SequenceGap {
                expected: self.len(),
                got: p.id.seq,
            });
        }
        self.entries.push(p);
        Ok(())
    }

    /// Rebuilds a log from entries already known to be contiguous.
    pub fn from_entries(owner: ClientId, entries: Vec<Payment>) -> Result<Self, ModelError> {
        let mut log = XLog::new(owner);
        for p in entries {
            log.append(p)?;
        }
        Ok(log)
    }
}

/// Per-client balance, next expected sequence number, and the set of
/// dependency tuples already credited (replay protection).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AccountState {
    pub balance: u64,
    pub next_seq: u64,
    pub used_deps: BTreeSet<PaymentId>,
}

impl AccountState {
    pub fn with_balance(balance: u64) -> Self {
        AccountState {
            balance,
            ..Default::default()
        }
    }
}

/// Size of the Byzantine quorum for a group of `n = 3f+1` replicas.
pub fn quorum_size(n: u32, f: u32) -> Result<u32, ConfigError> {
    if n != 3 * f + 1 {
        return Err(ConfigError::NotThreeFPlusOne { n, f });
    }
    Ok(2 * f + 1)
}

/// Number of distinct credit proofs that form a dependency certificate.
pub fn certificate_threshold(f: u32) -> u32 {
    f + 1
}

/// Largest tolerable fault count for a group of `n` replicas.
pub fn max_faults(n: u32) -> u32 {
    n.saturating_sub(1) / 3
}

/// Quorum for arbitrary group sizes (reconfigured views may not be exactly
/// 3f+1): smallest q with 2q - n >= f + 1. Equals 2f+1 when n == 3f+1.
pub fn byzantine_quorum(n: u32) -> u32 {
    let f = max_faults(n);
    (n + f + 2) / 2
}

/// Static system layout: the shard partition, per-shard fault bounds, the
/// client-to-representative map and opening balances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub shards: Vec<Vec<ReplicaId>>,
    pub fault_bounds: Vec<u32>,
    pub representative_of: BTreeMap<ClientId, ReplicaId>,
    pub initial_balances: BTreeMap<ClientId, u64>,
}

impl SystemConfig {
    /// One shard of `n = 3f+1` replicas r0..r{n-1}; clients round-robin over
    /// replicas as representatives, all with the same opening balance.
    pub fn single_shard(n: u32, f: u32, n_clients: u32, opening: u64) -> Result<Self, ConfigError> {
        quorum_size(n, f)?;
        let shard: Vec<ReplicaId> = (0..n).map(ReplicaId).collect();
        let mut representative_of = BTreeMap::new();
        let mut initial_balances = BTreeMap::new();
        for c in 0..n_clients {
            representative_of.insert(ClientId(c), ReplicaId(c % n));
            initial_balances.insert(ClientId(c), opening);
        }
        let cfg = SystemConfig {
            shards: vec![shard],
            fault_bounds: vec![f],
            representative_of,
            initial_balances,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `n_shards` disjoint shards of `m = 3f+1` replicas each. Clients are
    /// placed on shard `client_shard(c)` with representatives round-robin
    /// inside the shard.
    pub fn sharded(
        n_shards: u32,
        m: u32,
        f: u32,
        clients_per_shard: u32,
        opening: u64,
    ) -> Result<Self, ConfigError> {
        quorum_size(m, f)?;
        let mut shards = Vec::new();
        for s in 0..n_shards {
            shards.push((s * m..(s + 1) * m).map(ReplicaId).collect::<Vec<_>>());
        }
        let mut representative_of = BTreeMap::new();
        let mut initial_balances = BTreeMap::new();
        let mut next = 0u32;
        for s in 0..n_shards {
            for k in 0..clients_per_shard {
                let c = ClientId(next);
                next += 1;
                representative_of.insert(c, ReplicaId(s * m + (k % m)));
                initial_balances.insert(c, opening);
            }
        }
        let cfg = SystemConfig {
            shards,
            fault_bounds: vec![f; n_shards as usize],
            representative_of,
            initial_balances,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for (i, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(ConfigError::EmptyShard(i));
            }
            let f = self.fault_bounds[i];
            quorum_size(shard.len() as u32, f)?;
            for r in shard {
                if !seen.insert(*r) {
                    return Err(ConfigError::OverlappingShards(*r));
                }
            }
        }
        for (c, r) in &self.representative_of {
            if !self.shards.iter().any(|s| s.contains(r)) {
                return Err(ConfigError::UnknownRepresentative {
                    client: *c,
                    replica: *r,
                });
            }
            if !self.initial_balances.contains_key(c) {
                return Err(ConfigError::MissingBalance(*c));
            }
        }
        Ok(())
    }

    pub fn all_replicas(&self) -> Vec<ReplicaId> {
        let mut v: Vec<ReplicaId> = self.shards.iter().flatten().copied().collect();
        v.sort();
        v
    }

    pub fn representative(&self, c: ClientId) -> Result<ReplicaId, ConfigError> {
        self.representative_of
            .get(&c)
            .copied()
            .ok_or(ConfigError::MissingRepresentative(c))
    }

    pub fn shard_index_of_replica(&self, r: ReplicaId) -> Option<usize> {
        self.shards.iter().position(|s| s.contains(&r))
    }

    pub fn shard_index_of_client(&self, c: ClientId) -> Option<usize> {
        let rep = self.representative_of.get(&c)?;
        self.shard_index_of_replica(*rep)
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.representative_of.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quorum_sizes() {
        assert_eq!(quorum_size(4, 1).unwrap(), 3);
        assert_eq!(quorum_size(7, 2).unwrap(), 5);
        assert_eq!(quorum_size(100, 33).unwrap(), 67);
        assert!(quorum_size(5, 1).is_err());
        assert!(quorum_size(6, 2).is_err());
    }

    #[test]
    fn certificate_thresholds() {
        assert_eq!(certificate_threshold(1), 2);
        assert_eq!(certificate_threshold(2), 3);
        // a 52-replica shard tolerates f = 17
        assert_eq!(max_faults(52), 17);
        assert_eq!(certificate_threshold(17), 18);
    }

    #[test]
    fn general_quorum_matches_two_f_plus_one_at_three_f_plus_one() {
        for f in 0..30u32 {
            assert_eq!(byzantine_quorum(3 * f + 1), 2 * f + 1);
        }
        // post-join sizes that are not 3f+1
        assert_eq!(byzantine_quorum(5), 4);
        assert_eq!(byzantine_quorum(6), 4);
    }

    #[test]
    fn quorums_intersect_in_a_correct_replica() {
        for n in 1..60u32 {
            let q = byzantine_quorum(n);
            let f = max_faults(n);
            assert!(q <= n, "quorum {} exceeds group {}", q, n);
            assert!(2 * q >= n + f + 1, "n={} q={} f={}", n, q, f);
            // minimality
            if q > 0 {
                assert!(2 * (q - 1) < n + f + 1, "n={} q={} not minimal", n, q);
            }
        }
    }

    #[test]
    fn xlog_append_first_entry() {
        let bob = ClientId(1);
        let carol = ClientId(2);
        let mut log = XLog::new(bob);
        log.append(Payment::new(bob, 0, carol, 5)).unwrap();
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn xlog_append_fig_style_second_entry() {
        let bob = ClientId(1);
        let alice = ClientId(0);
        let mut log = XLog::new(bob);
        log.append(Payment::new(bob, 0, ClientId(2), 5)).unwrap();
        log.append(Payment::new(bob, 1, alice, 43)).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.entries()[1].amount, 43);
        assert_eq!(log.entries()[1].id.seq, 1);
    }

    #[test]
    fn xlog_rejects_gap_and_wrong_owner() {
        let bob = ClientId(1);
        let mut log = XLog::new(bob);
        log.append(Payment::new(bob, 0, ClientId(2), 5)).unwrap();
        let err = log.append(Payment::new(bob, 3, ClientId(2), 5)).unwrap_err();
        assert!(matches!(err, ModelError::SequenceGap { expected: 1, got: 3 }));
        let err = log
            .append(Payment::new(ClientId(9), 1, ClientId(2), 5))
            .unwrap_err();
        assert!(matches!(err, ModelError::WrongOwner { .. }));
    }

    #[test]
    fn config_checks_shape() {
        assert!(SystemConfig::single_shard(4, 1, 4, 100).is_ok());
        assert!(SystemConfig::single_shard(5, 1, 4, 100).is_err());
        let cfg = SystemConfig::sharded(2, 4, 1, 4, 100).unwrap();
        assert_eq!(cfg.all_replicas().len(), 8);
        assert_eq!(cfg.shard_index_of_client(ClientId(0)), Some(0));
        assert_eq!(cfg.shard_index_of_client(ClientId(4)), Some(1));
    }
}
