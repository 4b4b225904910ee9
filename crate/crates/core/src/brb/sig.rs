//! Signature-based reliable broadcast with linear message count: Prepare,
//! signed Ack back to the broadcaster, Commit carrying the quorum
//! certificate. No totality; the payment layer compensates with credits.
//!
//! The same machinery broadcasts membership records during reconfiguration,
//! keyed by [`BrbKey::Install`].

use std::collections::BTreeMap;

use crate::brb::{BrbKey, BrbStep, Delivery, Evidence, Outbound};
use crate::crypto::{Digest32, KeyRegistry, PartyId, Signature};
use crate::messages::{Batch, CommitBody, CommitCertificate, PrepareBody, Record};
use crate::model::{byzantine_quorum, ClientId, Payment, ReplicaId};
use crate::wire;

#[derive(Debug, Clone)]
pub struct BroadcastState {
    pub body: CommitBody,
    pub digest: Digest32,
    pub acks: BTreeMap<ReplicaId, Signature>,
    pub committed: bool,
}

#[derive(Debug, Clone, Default)]
struct ReceiverState {
    acked: Option<(Digest32, Signature)>,
    delivered: bool,
}

/// Per-replica state of the signature broadcast layer.
#[derive(Debug, Clone)]
pub struct SigBrb {
    me: ReplicaId,
    members: Vec<ReplicaId>,
    broadcasts: BTreeMap<BrbKey, BroadcastState>,
    receivers: BTreeMap<BrbKey, ReceiverState>,
    delivered_prefix: BTreeMap<ClientId, u64>,
    gated: BTreeMap<ClientId, BTreeMap<u64, Payment>>,
    pub evidence: Vec<Evidence>,
}

/// Checks a commit certificate against a membership: quorum-many matching
/// acknowledgment signatures from distinct member replicas.
pub fn verify_certificate(
    cert: &CommitCertificate,
    members: &[ReplicaId],
    registry: &KeyRegistry,
) -> bool {
    let quorum = byzantine_quorum(members.len() as u32) as usize;
    let msg = wire::ack_sign_bytes(&cert.key, &cert.digest);
    let mut signers = std::collections::BTreeSet::new();
    for ack in &cert.acks {
        let PartyId::Replica(r) = ack.signer else {
            return false;
        };
        if !members.contains(&r) || !signers.insert(r) {
            return false;
        }
        if !registry.verify(ack.signer, &msg, ack) {
            return false;
        }
    }
    signers.len() >= quorum
}

impl SigBrb {
    pub fn new(me: ReplicaId, mut members: Vec<ReplicaId>) -> Self {
        members.sort();
        SigBrb {
            me,
            members,
            broadcasts: BTreeMap::new(),
            receivers: BTreeMap::new(),
            delivered_prefix: BTreeMap::new(),
            gated: BTreeMap::new(),
            evidence: Vec::new(),
        }
    }

    fn quorum(&self) -> usize {
        byzantine_quorum(self.members.len() as u32) as usize
    }

    pub fn members(&self) -> &[ReplicaId] {
        &self.members
    }

    pub fn set_members(&mut self, mut members: Vec<ReplicaId>) {
        members.sort();
        self.members = members;
    }

    pub fn delivered_prefix(&self, c: ClientId) -> u64 {
        self.delivered_prefix.get(&c).copied().unwrap_or(0)
    }

    pub fn has_delivered(&self, key: &BrbKey) -> bool {
        self.receivers
            .get(key)
            .map(|s| s.delivered)
            .unwrap_or(false)
    }

    pub fn is_committed(&self, key: &BrbKey) -> bool {
        self.broadcasts
            .get(key)
            .map(|s| s.committed)
            .unwrap_or(false)
    }

    /// Re-creates the Commit record of an already-committed own broadcast.
    pub fn commit_record(&self, key: &BrbKey) -> Option<Record> {
        let st = self.broadcasts.get(key)?;
        if !st.committed {
            return None;
        }
        Some(Record::Commit {
            body: st.body.clone(),
            cert: CommitCertificate {
                key: *key,
                digest: st.digest,
                acks: st.acks.values().copied().collect(),
            },
        })
    }

    /// Joiner-side adoption: marks the given sequence numbers of a client as
    /// already delivered and advances the FIFO prefix over the contiguous run.
    pub fn adopt_delivered(&mut self, c: ClientId, seqs: impl IntoIterator<Item = u64>) {
        let mut delivered: Vec<u64> = seqs.into_iter().collect();
        delivered.sort_unstable();
        delivered.dedup();
        for seq in &delivered {
            self.receivers
                .entry(BrbKey::Payment(crate::model::PaymentId::new(c, *seq)))
                .or_default()
                .delivered = true;
        }
        let prefix = self.delivered_prefix.entry(c).or_insert(0);
        for seq in delivered {
            if seq == *prefix {
                *prefix += 1;
            }
        }
    }

    /// Peers whose ack is still missing for an uncommitted broadcast.
    pub fn unacked_peers(&self, key: &BrbKey) -> Vec<ReplicaId> {
        match self.broadcasts.get(key) {
            Some(st) if !st.committed => self
                .members
                .iter()
                .copied()
                .filter(|r| *r != self.me && !st.acks.contains_key(r))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Broadcasts a payment batch: one signed Prepare per peer, and the
    /// broadcaster's own acknowledgment recorded locally.
    pub fn broadcast_batch(&mut self, batch: Batch, registry: &KeyRegistry) -> BrbStep {
        let body = PrepareBody::Batch(batch.clone());
        let sig = registry
            .sign(PartyId::Replica(self.me), &body.bytes())
            .expect("broadcaster key registered");
        let mut step = BrbStep::default();
        for dst in self.members.clone() {
            if dst != self.me {
                step.outbound.push(Outbound {
                    dst,
                    record: Record::Prepare {
                        origin: self.me,
                        body: body.clone(),
                        sig: Some(sig),
                    },
                });
            }
        }
        for p in batch.payments {
            step.merge(self.register_broadcast(CommitBody::Payment(p), registry));
        }
        step
    }

    /// Broadcasts a membership record through the same machinery.
    pub fn broadcast_install(
        &mut self,
        record: crate::reconfig::ViewRecord,
        registry: &KeyRegistry,
    ) -> BrbStep {
        let body = PrepareBody::Install(record.clone());
        let sig = registry
            .sign(PartyId::Replica(self.me), &body.bytes())
            .expect("broadcaster key registered");
        let mut step = BrbStep::default();
        for dst in self.members.clone() {
            if dst != self.me {
                step.outbound.push(Outbound {
                    dst,
                    record: Record::Prepare {
                        origin: self.me,
                        body: body.clone(),
                        sig: Some(sig),
                    },
                });
            }
        }
        step.merge(self.register_broadcast(CommitBody::Install(record), registry));
        step
    }

    fn register_broadcast(&mut self, body: CommitBody, registry: &KeyRegistry) -> BrbStep {
        let key = body.key();
        let digest = body.digest();
        let own_ack = registry
            .sign(
                PartyId::Replica(self.me),
                &wire::ack_sign_bytes(&key, &digest),
            )
            .expect("broadcaster key registered");
        let st = self.broadcasts.entry(key).or_insert_with(|| BroadcastState {
            body,
            digest,
            acks: BTreeMap::new(),
            committed: false,
        });
        st.acks.insert(self.me, own_ack);
        // a singleton group commits immediately
        self.try_commit(key)
    }

    /// A fresh payload is acknowledged back to the sender; a conflicting one
    /// is answered with silence and stored as evidence. Duplicate identical
    /// Prepares get the same ack again.
    pub fn on_prepare(
        &mut self,
        src: ReplicaId,
        body: &PrepareBody,
        sig: Option<&Signature>,
        registry: &KeyRegistry,
    ) -> BrbStep {
        match sig {
            Some(s) if registry.verify(PartyId::Replica(src), &body.bytes(), s) => {}
            _ => return BrbStep::default(),
        }
        let mut step = BrbStep::default();
        match body {
            PrepareBody::Batch(batch) => {
                for p in &batch.payments {
                    let key = BrbKey::Payment(p.id);
                    let digest = wire::payment_digest(p);
                    step.merge(self.ack_or_refuse(src, key, digest, registry));
                }
            }
            PrepareBody::Install(v) => {
                let key = BrbKey::Install(v.id);
                let digest = crate::crypto::digest(&wire::view_record_bytes(v));
                step.merge(self.ack_or_refuse(src, key, digest, registry));
            }
        }
        step
    }

    fn ack_or_refuse(
        &mut self,
        src: ReplicaId,
        key: BrbKey,
        digest: Digest32,
        registry: &KeyRegistry,
    ) -> BrbStep {
        let me = self.me;
        let st = self.receivers.entry(key).or_default();
        let sig = match &st.acked {
            None => {
                let sig = registry
                    .sign(PartyId::Replica(me), &wire::ack_sign_bytes(&key, &digest))
                    .expect("own key registered");
                st.acked = Some((digest, sig));
                sig
            }
            Some((d, sig)) if *d == digest => *sig,
            Some((d, _)) => {
                let first = *d;
                if let BrbKey::Payment(id) = key {
                    self.evidence.push(Evidence::ConflictingPrepare {
                        id,
                        first,
                        second: digest,
                    });
                }
                return BrbStep::default();
            }
        };
        let mut step = BrbStep::default();
        if src == self.me {
            return self.on_ack(key, digest, sig, registry);
        }
        step.outbound.push(Outbound {
            dst: src,
            record: Record::Ack { key, digest, sig },
        });
        step
    }

    /// Broadcaster side: count matching acknowledgments from distinct
    /// signers; at quorum assemble the certificate and Commit once.
    pub fn on_ack(
        &mut self,
        key: BrbKey,
        digest: Digest32,
        sig: Signature,
        registry: &KeyRegistry,
    ) -> BrbStep {
        let PartyId::Replica(signer) = sig.signer else {
            return BrbStep::default();
        };
        if !self.members.contains(&signer) {
            return BrbStep::default();
        }
        if !registry.verify(sig.signer, &wire::ack_sign_bytes(&key, &digest), &sig) {
            return BrbStep::default();
        }
        let Some(st) = self.broadcasts.get_mut(&key) else {
            return BrbStep::default();
        };
        if st.digest != digest || st.committed {
            return BrbStep::default();
        }
        st.acks.insert(signer, sig);
        self.try_commit(key)
    }

    fn try_commit(&mut self, key: BrbKey) -> BrbStep {
        let quorum = self.quorum();
        let me = self.me;
        let members = self.members.clone();
        let Some(st) = self.broadcasts.get_mut(&key) else {
            return BrbStep::default();
        };
        if st.committed || st.acks.len() < quorum {
            return BrbStep::default();
        }
        st.committed = true;
        let cert = CommitCertificate {
            key,
            digest: st.digest,
            acks: st.acks.values().copied().collect(),
        };
        let body = st.body.clone();
        let mut step = BrbStep::default();
        for dst in members {
            if dst != me {
                step.outbound.push(Outbound {
                    dst,
                    record: Record::Commit {
                        body: body.clone(),
                        cert: cert.clone(),
                    },
                });
            }
        }
        step.merge(self.deliver(body, cert));
        step
    }

    /// Receiver side: a correct commit message alone suffices for delivery.
    pub fn on_commit(
        &mut self,
        body: &CommitBody,
        cert: &CommitCertificate,
        registry: &KeyRegistry,
    ) -> BrbStep {
        if cert.key != body.key() || cert.digest != body.digest() {
            self.evidence.push(Evidence::BadCertificate { key: cert.key });
            return BrbStep::default();
        }
        if !verify_certificate(cert, &self.members, registry) {
            self.evidence.push(Evidence::BadCertificate { key: cert.key });
            return BrbStep::default();
        }
        self.deliver(body.clone(), cert.clone())
    }

    fn deliver(&mut self, body: CommitBody, cert: CommitCertificate) -> BrbStep {
        let key = body.key();
        let st = self.receivers.entry(key).or_default();
        if st.delivered {
            return BrbStep::default();
        }
        match body {
            CommitBody::Install(v) => {
                st.delivered = true;
                BrbStep {
                    outbound: Vec::new(),
                    delivered: vec![Delivery::Install(v, cert)],
                }
            }
            CommitBody::Payment(p) => {
                // FIFO gate: (s, n) waits for (s, n-1)
                self.gated.entry(p.id.spender).or_default().insert(p.id.seq, p.clone());
                self.drain_fifo(p.id.spender)
            }
        }
    }

    fn drain_fifo(&mut self, c: ClientId) -> BrbStep {
        let mut step = BrbStep::default();
        let gate = self.gated.entry(c).or_default();
        let prefix = self.delivered_prefix.entry(c).or_insert(0);
        while let Some(p) = gate.remove(&*prefix) {
            *prefix += 1;
            self.receivers
                .entry(BrbKey::Payment(p.id))
                .or_default()
                .delivered = true;
            step.delivered.push(Delivery::Payment(p));
        }
        step
    }

    #[cfg(test)]
    pub(crate) fn ack_count(&self, key: &BrbKey) -> usize {
        self.broadcasts.get(key).map(|s| s.acks.len()).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::CryptoBackend;
    use crate::model::{ClientId, PaymentId, SystemConfig};

    fn setup(n: u32, f: u32) -> (KeyRegistry, Vec<ReplicaId>) {
        let cfg = SystemConfig::single_shard(n, f, n, 100).unwrap();
        let reg = KeyRegistry::generate(&cfg, 11, CryptoBackend::SimKeyed);
        (reg, cfg.all_replicas())
    }

    fn pay(seq: u64) -> Payment {
        Payment::new(ClientId(1), seq, ClientId(2), 10)
    }

    fn batch(p: Payment) -> Batch {
        Batch {
            broadcaster: ReplicaId(0),
            payments: vec![p],
            sub_batches: vec![],
        }
    }

    fn count_kind(step: &BrbStep, kind: &str) -> usize {
        step.outbound
            .iter()
            .filter(|o| o.record.kind() == kind)
            .count()
    }

    fn prepare_of(step: &BrbStep) -> (PrepareBody, Signature) {
        step.outbound
            .iter()
            .find_map(|o| match &o.record {
                Record::Prepare { body, sig, .. } => Some((body.clone(), sig.unwrap())),
                _ => None,
            })
            .unwrap()
    }

    #[test]
    fn fresh_prepare_gets_one_ack_conflicting_gets_silence() {
        let (reg, members) = setup(4, 1);
        let mut bcaster = SigBrb::new(ReplicaId(0), members.clone());
        let step = bcaster.broadcast_batch(batch(pay(0)), &reg);
        assert_eq!(count_kind(&step, "PREPARE"), 3);
        let (body, sig) = prepare_of(&step);

        let mut q = SigBrb::new(ReplicaId(1), members.clone());
        let s = q.on_prepare(ReplicaId(0), &body, Some(&sig), &reg);
        assert_eq!(count_kind(&s, "ACK"), 1);

        // duplicate identical Prepare: the same ack again
        let s2 = q.on_prepare(ReplicaId(0), &body, Some(&sig), &reg);
        assert_eq!(count_kind(&s2, "ACK"), 1);
        assert_eq!(s.outbound[0].record, s2.outbound[0].record);

        // conflicting payload for the same id: nothing, evidence stored
        let mut p2 = pay(0);
        p2.amount = 99;
        let body2 = PrepareBody::Batch(batch(p2));
        let sig2 = reg
            .sign(PartyId::Replica(ReplicaId(0)), &body2.bytes())
            .unwrap();
        let s3 = q.on_prepare(ReplicaId(0), &body2, Some(&sig2), &reg);
        assert!(s3.outbound.is_empty());
        assert_eq!(q.evidence.len(), 1);
    }

    #[test]
    fn bad_prepare_signature_is_dropped() {
        let (reg, members) = setup(4, 1);
        let mut q = SigBrb::new(ReplicaId(1), members);
        let body = PrepareBody::Batch(batch(pay(0)));
        let sig = reg.sign(PartyId::Replica(ReplicaId(2)), &body.bytes()).unwrap();
        // claims origin r0 but signed by r2
        let s = q.on_prepare(ReplicaId(0), &body, Some(&sig), &reg);
        assert!(s.outbound.is_empty());
        let s = q.on_prepare(ReplicaId(0), &body, None, &reg);
        assert!(s.outbound.is_empty());
    }

    fn ack_from(
        reg: &KeyRegistry,
        r: ReplicaId,
        key: BrbKey,
        digest: Digest32,
    ) -> Signature {
        reg.sign(PartyId::Replica(r), &wire::ack_sign_bytes(&key, &digest))
            .unwrap()
    }

    #[test]
    fn commit_fires_at_quorum_with_distinct_signers() {
        let (reg, members) = setup(4, 1);
        let mut b = SigBrb::new(ReplicaId(0), members);
        let p = pay(0);
        let key = BrbKey::Payment(p.id);
        let digest = wire::payment_digest(&p);
        b.broadcast_batch(batch(p), &reg);
        assert_eq!(b.ack_count(&key), 1); // own ack

        let s = b.on_ack(key, digest, ack_from(&reg, ReplicaId(1), key, digest), &reg);
        assert!(s.outbound.is_empty());
        // duplicate signer makes no progress
        let s = b.on_ack(key, digest, ack_from(&reg, ReplicaId(1), key, digest), &reg);
        assert!(s.outbound.is_empty() && s.delivered.is_empty());
        assert_eq!(b.ack_count(&key), 2);

        // invalid signature ignored
        let mut bad = ack_from(&reg, ReplicaId(2), key, digest);
        bad.bytes[0] ^= 1;
        let s = b.on_ack(key, digest, bad, &reg);
        assert!(s.outbound.is_empty());

        let s = b.on_ack(key, digest, ack_from(&reg, ReplicaId(2), key, digest), &reg);
        assert_eq!(count_kind(&s, "COMMIT"), 3);
        assert_eq!(s.delivered.len(), 1); // broadcaster self-delivers
        assert!(b.is_committed(&key));

        // late ack after commit: no second commit
        let s = b.on_ack(key, digest, ack_from(&reg, ReplicaId(3), key, digest), &reg);
        assert!(s.outbound.is_empty());
    }

    #[test]
    fn commit_below_threshold_or_mangled_is_rejected() {
        let (reg, members) = setup(4, 1);
        let p = pay(0);
        let key = BrbKey::Payment(p.id);
        let digest = wire::payment_digest(&p);
        let body = CommitBody::Payment(p);
        let acks: Vec<Signature> = [0u32, 1]
            .iter()
            .map(|r| ack_from(&reg, ReplicaId(*r), key, digest))
            .collect();
        let cert = CommitCertificate { key, digest, acks };
        let mut q = SigBrb::new(ReplicaId(3), members.clone());
        let s = q.on_commit(&body, &cert, &reg);
        assert!(s.delivered.is_empty());
        assert_eq!(q.evidence.len(), 1);

        // duplicate signers padding the ack list must not count as quorum
        let dup = ack_from(&reg, ReplicaId(1), key, digest);
        let cert = CommitCertificate {
            key,
            digest,
            acks: vec![
                ack_from(&reg, ReplicaId(0), key, digest),
                dup,
                dup,
            ],
        };
        let s = q.on_commit(&body, &cert, &reg);
        assert!(s.delivered.is_empty());

        // a full quorum delivers
        let cert = CommitCertificate {
            key,
            digest,
            acks: (0..3)
                .map(|r| ack_from(&reg, ReplicaId(r), key, digest))
                .collect(),
        };
        let s = q.on_commit(&body, &cert, &reg);
        assert_eq!(s.delivered.len(), 1);
        // integrity: duplicate commit suppressed
        let s = q.on_commit(&body, &cert, &reg);
        assert!(s.delivered.is_empty());
    }

    #[test]
    fn fifo_delivery_across_out_of_order_commits() {
        let (reg, members) = setup(4, 1);
        let mut q = SigBrb::new(ReplicaId(3), members);
        let make_cert = |p: &Payment| {
            let key = BrbKey::Payment(p.id);
            let digest = wire::payment_digest(p);
            CommitCertificate {
                key,
                digest,
                acks: (0..3)
                    .map(|r| ack_from(&reg, ReplicaId(r), key, digest))
                    .collect(),
            }
        };
        let p0 = pay(0);
        let p1 = pay(1);
        let s = q.on_commit(&CommitBody::Payment(p1.clone()), &make_cert(&p1), &reg);
        assert!(s.delivered.is_empty());
        let s = q.on_commit(&CommitBody::Payment(p0.clone()), &make_cert(&p0), &reg);
        let seqs: Vec<u64> = s
            .delivered
            .iter()
            .map(|d| match d {
                Delivery::Payment(p) => p.id.seq,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(seqs, vec![0, 1]);
    }

    #[test]
    fn equivocating_broadcaster_commits_at_most_one_payload() {
        // N=4, f=1: byz broadcaster r0 crafts payloads A and B for one id and
        // may ack both itself; correct replicas ack their first-seen payload.
        // Enumerate every split of first-seen payloads over r1..r3: at most
        // one payload can ever reach 2f+1 = 3 distinct acks.
        let (reg, _members) = setup(4, 1);
        let a = pay(0);
        let mut b = pay(0);
        b.beneficiary = ClientId(3);
        let (ka, kb) = (BrbKey::Payment(a.id), BrbKey::Payment(b.id));
        let (da, db) = (wire::payment_digest(&a), wire::payment_digest(&b));
        for split in 0u32..8 {
            let mut acks_a = vec![ack_from(&reg, ReplicaId(0), ka, da)];
            let mut acks_b = vec![ack_from(&reg, ReplicaId(0), kb, db)];
            for r in 1..=3u32 {
                if split & (1 << (r - 1)) == 0 {
                    acks_a.push(ack_from(&reg, ReplicaId(r), ka, da));
                } else {
                    acks_b.push(ack_from(&reg, ReplicaId(r), kb, db));
                }
            }
            let committable =
                (acks_a.len() >= 3) as u32 + (acks_b.len() >= 3) as u32;
            assert!(committable <= 1, "split {:03b}", split);
        }
    }
}
