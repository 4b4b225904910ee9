//! Shard topology and routing: broadcasts stay inside the spender's shard,
//! credits may cross shards, and certificates are checked against the source
//! shard's membership.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::KeyRegistry;
use crate::engine::DependencyCertificate;
use crate::model::{ClientId, PaymentId, ReplicaId, SystemConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardTopology {
    shards: Vec<Vec<ReplicaId>>,
    fault_bounds: Vec<u32>,
    shard_of_replica: BTreeMap<ReplicaId, usize>,
    representative_of: BTreeMap<ClientId, ReplicaId>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
}

impl ShardTopology {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        let mut shard_of_replica = BTreeMap::new();
        for (i, shard) in cfg.shards.iter().enumerate() {
            for r in shard {
                shard_of_replica.insert(*r, i);
            }
        }
        ShardTopology {
            shards: cfg.shards.clone(),
            fault_bounds: cfg.fault_bounds.clone(),
            shard_of_replica,
            representative_of: cfg.representative_of.clone(),
        }
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn members(&self, shard: usize) -> &[ReplicaId] {
        &self.shards[shard]
    }

    pub fn fault_bound(&self, shard: usize) -> u32 {
        self.fault_bounds[shard]
    }

    pub fn representative(&self, c: ClientId) -> Option<ReplicaId> {
        self.representative_of.get(&c).copied()
    }

    pub fn shard_index_of_replica(&self, r: ReplicaId) -> Option<usize> {
        self.shard_of_replica.get(&r).copied()
    }

    pub fn shard_index_of_client(&self, c: ClientId) -> Option<usize> {
        let rep = self.representative_of.get(&c)?;
        self.shard_index_of_replica(*rep)
    }

    /// Broadcast target set of a payment: the spender's shard, regardless of
    /// where the beneficiary lives.
    pub fn route_broadcast(&self, spender: ClientId) -> Result<&[ReplicaId], RouteError> {
        let shard = self
            .shard_index_of_client(spender)
            .ok_or(RouteError::UnknownClient(spender))?;
        Ok(&self.shards[shard])
    }

    pub fn is_cross_shard(&self, spender: ClientId, beneficiary: ClientId) -> bool {
        match (
            self.shard_index_of_client(spender),
            self.shard_index_of_client(beneficiary),
        ) {
            (Some(a), Some(b)) => a != b,
            _ => false,
        }
    }

    /// Membership growth on view installation (single-shard systems).
    pub fn add_member(&mut self, shard: usize, r: ReplicaId) {
        if !self.shards[shard].contains(&r) {
            self.shards[shard].push(r);
            self.shards[shard].sort();
            self.shard_of_replica.insert(r, shard);
        }
    }
}

/// Certificate acceptance at a foreign shard: f+1 distinct signers, all of
/// them members of the spender's shard, all signatures valid.
pub fn verify_cross_shard_certificate(
    cert: &DependencyCertificate,
    topo: &ShardTopology,
    registry: &KeyRegistry,
) -> bool {
    cert.verify(topo, registry)
}

/// One replica-to-replica message as seen by the trace auditor.
#[derive(Debug, Clone)]
pub struct MsgView {
    pub kind: String,
    pub src: ReplicaId,
    pub dst: ReplicaId,
    pub payment: Option<PaymentId>,
}

/// Cross-shard footprint of one payment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossShardStat {
    pub messages: u64,
    pub kinds: BTreeSet<String>,
}

impl CrossShardStat {
    /// Distinct communication steps on the payment's cross-shard critical
    /// path (the credit unicast wave counts as one).
    pub fn rounds(&self) -> usize {
        self.kinds.len()
    }
}

const BRB_KINDS: [&str; 7] = [
    "PREPARE", "ECHO", "READY", "PULL", "PAYLOAD", "ACK", "COMMIT",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuditError {
    #[error("broadcast-layer message {kind} crossed shards ({src} -> {dst})")]
    BrbCrossedShards {
        kind: String,
        src: ReplicaId,
        dst: ReplicaId,
    },
}

/// Audits a message log: returns the per-payment cross-shard footprint and
/// rejects any broadcast-layer traffic that left its shard.
pub fn count_cross_shard_steps(
    msgs: impl IntoIterator<Item = MsgView>,
    topo: &ShardTopology,
) -> Result<BTreeMap<PaymentId, CrossShardStat>, AuditError> {
    let mut stats: BTreeMap<PaymentId, CrossShardStat> = BTreeMap::new();
    for m in msgs {
        let (a, b) = (
            topo.shard_index_of_replica(m.src),
            topo.shard_index_of_replica(m.dst),
        );
        let crossed = matches!((a, b), (Some(x), Some(y)) if x != y);
        if !crossed {
            continue;
        }
        if BRB_KINDS.contains(&m.kind.as_str()) {
            return Err(AuditError::BrbCrossedShards {
                kind: m.kind,
                src: m.src,
                dst: m.dst,
            });
        }
        if let Some(id) = m.payment {
            let s = stats.entry(id).or_default();
            s.messages += 1;
            s.kinds.insert(m.kind.clone());
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::CryptoBackend;
    use crate::engine::CreditBundle;
    use crate::model::PaymentTuple;

    fn two_shards() -> (SystemConfig, ShardTopology, KeyRegistry) {
        let cfg = SystemConfig::sharded(2, 4, 1, 4, 100).unwrap();
        let topo = ShardTopology::from_config(&cfg);
        let reg = KeyRegistry::generate(&cfg, 5, CryptoBackend::SimKeyed);
        (cfg, topo, reg)
    }

    #[test]
    fn broadcast_routes_to_spender_shard_only() {
        let (_, topo, _) = two_shards();
        // clients 0..3 on shard 0, 4..7 on shard 1
        let shard0: Vec<u32> = topo
            .route_broadcast(ClientId(0))
            .unwrap()
            .iter()
            .map(|r| r.0)
            .collect();
        assert_eq!(shard0, vec![0, 1, 2, 3]);
        // cross-shard beneficiary does not change the route
        assert!(topo.is_cross_shard(ClientId(0), ClientId(4)));
        let same = topo.route_broadcast(ClientId(0)).unwrap();
        assert_eq!(same, topo.members(0));
        assert!(topo.route_broadcast(ClientId(99)).is_err());
    }

    fn tuple() -> PaymentTuple {
        PaymentTuple {
            id: PaymentId::new(ClientId(0), 0),
            beneficiary: ClientId(4),
            amount: 9,
        }
    }

    #[test]
    fn cross_shard_certificate_checks_source_membership() {
        let (_, topo, reg) = two_shards();
        let t = tuple();
        let proof = |r: u32| CreditBundle::sign(ReplicaId(r), vec![t], &reg);
        // f+1 = 2 signers from the source shard (shard 0)
        let good = DependencyCertificate {
            tuple: t,
            proofs: vec![proof(0), proof(1)],
        };
        assert!(verify_cross_shard_certificate(&good, &topo, &reg));
        // one signer from the wrong shard
        let wrong_shard = DependencyCertificate {
            tuple: t,
            proofs: vec![proof(0), proof(5)],
        };
        assert!(!verify_cross_shard_certificate(&wrong_shard, &topo, &reg));
        // below threshold
        let thin = DependencyCertificate {
            tuple: t,
            proofs: vec![proof(0)],
        };
        assert!(!verify_cross_shard_certificate(&thin, &topo, &reg));
    }

    #[test]
    fn audit_counts_credit_wave_as_one_round() {
        let (_, topo, _) = two_shards();
        let id = PaymentId::new(ClientId(0), 0);
        // m = 4 credits from shard 0 to the beneficiary's rep on shard 1
        let msgs: Vec<MsgView> = (0..4u32)
            .map(|r| MsgView {
                kind: "CREDIT".into(),
                src: ReplicaId(r),
                dst: ReplicaId(4),
                payment: Some(id),
            })
            .collect();
        let stats = count_cross_shard_steps(msgs, &topo).unwrap();
        assert_eq!(stats[&id].messages, 4);
        assert_eq!(stats[&id].rounds(), 1);

        // intra-shard traffic contributes nothing
        let msgs = vec![MsgView {
            kind: "CREDIT".into(),
            src: ReplicaId(0),
            dst: ReplicaId(1),
            payment: Some(id),
        }];
        assert!(count_cross_shard_steps(msgs, &topo).unwrap().is_empty());

        // broadcast traffic crossing shards is a hard failure
        let msgs = vec![MsgView {
            kind: "PREPARE".into(),
            src: ReplicaId(0),
            dst: ReplicaId(4),
            payment: Some(id),
        }];
        assert!(count_cross_shard_steps(msgs, &topo).is_err());
    }
}
