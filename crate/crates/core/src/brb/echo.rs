//! Bracha-style reliable broadcast with totality.
//!
//! Echo and Ready carry only the payload digest; the payload itself travels
//! in Prepare. A replica that reaches the Ready quorum without the payload
//! pulls it from any Echo/Ready sender of that digest.

use std::collections::{BTreeMap, BTreeSet};

use crate::brb::{BrbStep, Delivery, Evidence, Outbound};
use crate::crypto::Digest32;
use crate::messages::{Batch, PrepareBody, Record};
use crate::model::{byzantine_quorum, ClientId, Payment, PaymentId, ReplicaId};
use crate::wire;

#[derive(Debug, Clone, Default)]
struct PaymentState {
    /// Payload versions seen, by digest. The first Prepare fixes `accepted`.
    versions: BTreeMap<Digest32, Payment>,
    accepted: Option<Digest32>,
    echoed: bool,
    echo_senders: BTreeMap<Digest32, BTreeSet<ReplicaId>>,
    echo_counted: BTreeSet<ReplicaId>,
    ready_senders: BTreeMap<Digest32, BTreeSet<ReplicaId>>,
    ready_counted: BTreeSet<ReplicaId>,
    readied: Option<Digest32>,
    /// Digest that gathered a Ready quorum here.
    quorum_digest: Option<Digest32>,
    pulled: BTreeSet<ReplicaId>,
    /// Ready-complete with payload in hand; may still be FIFO-gated.
    complete: bool,
    delivered: bool,
}

/// Per-replica state of the echo broadcast layer.
#[derive(Debug, Clone)]
pub struct EchoBrb {
    me: ReplicaId,
    members: Vec<ReplicaId>,
    f: u32,
    states: BTreeMap<PaymentId, PaymentState>,
    delivered_prefix: BTreeMap<ClientId, u64>,
    gated: BTreeMap<ClientId, BTreeMap<u64, Payment>>,
    pub evidence: Vec<Evidence>,
}

impl EchoBrb {
    pub fn new(me: ReplicaId, mut members: Vec<ReplicaId>, f: u32) -> Self {
        members.sort();
        EchoBrb {
            me,
            members,
            f,
            states: BTreeMap::new(),
            delivered_prefix: BTreeMap::new(),
            gated: BTreeMap::new(),
            evidence: Vec::new(),
        }
    }

    fn quorum(&self) -> usize {
        byzantine_quorum(self.members.len() as u32) as usize
    }

    fn amplify(&self) -> usize {
        self.f as usize + 1
    }

    pub fn delivered_prefix(&self, c: ClientId) -> u64 {
        self.delivered_prefix.get(&c).copied().unwrap_or(0)
    }

    pub fn has_delivered(&self, id: PaymentId) -> bool {
        self.states.get(&id).map(|s| s.delivered).unwrap_or(false)
    }

    /// Sends Prepare to every member, self-delivery short-circuited locally.
    pub fn broadcast(&mut self, batch: Batch) -> BrbStep {
        let mut step = BrbStep::default();
        for dst in self.members.clone() {
            if dst != self.me {
                step.outbound.push(Outbound {
                    dst,
                    record: Record::Prepare {
                        origin: self.me,
                        body: PrepareBody::Batch(batch.clone()),
                        sig: None,
                    },
                });
            }
        }
        step.merge(self.on_prepare(self.me, &batch));
        step
    }

    /// First payload for a payment id triggers one Echo to all; a conflicting
    /// second payload is stored as evidence and never echoed.
    pub fn on_prepare(&mut self, _src: ReplicaId, batch: &Batch) -> BrbStep {
        let mut step = BrbStep::default();
        for p in batch.payments.clone() {
            step.merge(self.accept_payload(p));
        }
        step
    }

    fn accept_payload(&mut self, p: Payment) -> BrbStep {
        let d = wire::payment_digest(&p);
        let id = p.id;
        let st = self.states.entry(id).or_default();
        match st.accepted {
            None => {
                st.accepted = Some(d);
                st.versions.insert(d, p);
            }
            Some(first) if first != d => {
                self.evidence.push(Evidence::ConflictingPrepare {
                    id,
                    first,
                    second: d,
                });
                // keep the bytes: a conflicting version may still be the one
                // that gathers the quorum
                self.states.get_mut(&id).unwrap().versions.insert(d, p);
                return BrbStep::default();
            }
            Some(_) => return BrbStep::default(),
        }
        let st = self.states.get_mut(&id).unwrap();
        if st.echoed {
            return BrbStep::default();
        }
        st.echoed = true;
        self.emit_echo(id, d)
    }

    fn emit_echo(&mut self, id: PaymentId, d: Digest32) -> BrbStep {
        let mut step = BrbStep::default();
        for dst in self.members.clone() {
            if dst != self.me {
                step.outbound.push(Outbound {
                    dst,
                    record: Record::Echo { id, digest: d },
                });
            }
        }
        step.merge(self.on_echo(self.me, id, d));
        step
    }

    fn emit_ready(&mut self, id: PaymentId, d: Digest32) -> BrbStep {
        let st = self.states.entry(id).or_default();
        if st.readied.is_some() {
            return BrbStep::default();
        }
        st.readied = Some(d);
        let mut step = BrbStep::default();
        for dst in self.members.clone() {
            if dst != self.me {
                step.outbound.push(Outbound {
                    dst,
                    record: Record::Ready { id, digest: d },
                });
            }
        }
        step.merge(self.on_ready(self.me, id, d));
        step
    }

    pub fn on_echo(&mut self, src: ReplicaId, id: PaymentId, d: Digest32) -> BrbStep {
        let quorum = self.quorum();
        let st = self.states.entry(id).or_default();
        if !st.echo_counted.insert(src) {
            return BrbStep::default();
        }
        st.echo_senders.entry(d).or_default().insert(src);
        let reached = st.echo_senders[&d].len() >= quorum;
        let mut step = BrbStep::default();
        if reached {
            step.merge(self.emit_ready(id, d));
        }
        step.merge(self.pull_if_needed(id, d, src));
        step
    }

    pub fn on_ready(&mut self, src: ReplicaId, id: PaymentId, d: Digest32) -> BrbStep {
        let quorum = self.quorum();
        let amplify = self.amplify();
        let st = self.states.entry(id).or_default();
        if !st.ready_counted.insert(src) {
            return BrbStep::default();
        }
        st.ready_senders.entry(d).or_default().insert(src);
        let n = st.ready_senders[&d].len();
        let mut step = BrbStep::default();
        if n >= amplify {
            step.merge(self.emit_ready(id, d));
        }
        if n >= quorum {
            let st = self.states.get_mut(&id).unwrap();
            if st.quorum_digest.is_none() {
                st.quorum_digest = Some(d);
            }
            step.merge(self.try_complete(id));
        }
        step.merge(self.pull_if_needed(id, d, src));
        step
    }

    /// Retransmission request for a payload we are missing.
    pub fn on_pull(&mut self, src: ReplicaId, id: PaymentId) -> BrbStep {
        let mut step = BrbStep::default();
        if let Some(st) = self.states.get(&id) {
            let digest = st.quorum_digest.or(st.accepted);
            if let Some(d) = digest {
                if let Some(p) = st.versions.get(&d) {
                    step.outbound.push(Outbound {
                        dst: src,
                        record: Record::PayloadResp { payment: p.clone() },
                    });
                }
            }
        }
        step
    }

    pub fn on_payload(&mut self, _src: ReplicaId, p: Payment) -> BrbStep {
        let d = wire::payment_digest(&p);
        let id = p.id;
        let st = self.states.entry(id).or_default();
        if st.quorum_digest == Some(d) || st.accepted.is_none() {
            st.versions.insert(d, p);
        }
        self.try_complete(id)
    }

    /// After the Ready quorum is met without the payload, pull from every
    /// sender of the quorum digest seen so far (and any that arrive later).
    fn pull_if_needed(&mut self, id: PaymentId, d: Digest32, _latest: ReplicaId) -> BrbStep {
        let me = self.me;
        let mut step = BrbStep::default();
        let st = match self.states.get_mut(&id) {
            Some(s) => s,
            None => return step,
        };
        let Some(qd) = st.quorum_digest else {
            return step;
        };
        if qd != d || st.delivered || st.complete || st.versions.contains_key(&qd) {
            return step;
        }
        let mut targets: BTreeSet<ReplicaId> = BTreeSet::new();
        if let Some(s) = st.echo_senders.get(&qd) {
            targets.extend(s.iter().copied());
        }
        if let Some(s) = st.ready_senders.get(&qd) {
            targets.extend(s.iter().copied());
        }
        for t in targets {
            if t != me && st.pulled.insert(t) {
                step.outbound.push(Outbound {
                    dst: t,
                    record: Record::Pull { id },
                });
            }
        }
        step
    }

    /// Ready quorum plus payload in hand makes the payment complete; delivery
    /// still waits for the per-client FIFO prefix.
    fn try_complete(&mut self, id: PaymentId) -> BrbStep {
        let st = match self.states.get_mut(&id) {
            Some(s) => s,
            None => return BrbStep::default(),
        };
        if st.complete || st.delivered {
            return BrbStep::default();
        }
        let Some(qd) = st.quorum_digest else {
            return BrbStep::default();
        };
        let Some(p) = st.versions.get(&qd).cloned() else {
            return BrbStep::default();
        };
        st.complete = true;
        self.gated.entry(id.spender).or_default().insert(id.seq, p);
        self.drain_fifo(id.spender)
    }

    fn drain_fifo(&mut self, c: ClientId) -> BrbStep {
        let mut step = BrbStep::default();
        let gate = self.gated.entry(c).or_default();
        let prefix = self.delivered_prefix.entry(c).or_insert(0);
        while let Some(p) = gate.remove(&*prefix) {
            *prefix += 1;
            let st = self.states.entry(p.id).or_default();
            st.delivered = true;
            step.delivered.push(Delivery::Payment(p));
        }
        step
    }

    /// Membership update on view installation. Counters and digests persist:
    /// a replica never echoes two different payloads for one id, in any view.
    pub fn set_members(&mut self, mut members: Vec<ReplicaId>, f: u32) {
        members.sort();
        self.members = members;
        self.f = f;
    }

    #[cfg(test)]
    fn ready_count(&self, id: PaymentId, d: &Digest32) -> usize {
        self.states
            .get(&id)
            .and_then(|s| s.ready_senders.get(d))
            .map(|s| s.len())
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClientId;

    fn batch(p: Payment) -> Batch {
        Batch {
            broadcaster: ReplicaId(0),
            payments: vec![p],
            sub_batches: vec![],
        }
    }

    fn pay(seq: u64) -> Payment {
        Payment::new(ClientId(1), seq, ClientId(2), 10)
    }

    fn members(n: u32) -> Vec<ReplicaId> {
        (0..n).map(ReplicaId).collect()
    }

    fn count_kind(step: &BrbStep, kind: &str) -> usize {
        step.outbound
            .iter()
            .filter(|o| o.record.kind() == kind)
            .count()
    }

    #[test]
    fn broadcast_fans_out_prepare_once_per_peer() {
        let mut b = EchoBrb::new(ReplicaId(0), members(4), 1);
        let step = b.broadcast(batch(pay(0)));
        // 3 network Prepares + the local self-delivery already produced an Echo
        assert_eq!(count_kind(&step, "PREPARE"), 3);
        assert_eq!(count_kind(&step, "ECHO"), 3);
    }

    #[test]
    fn batch_of_many_is_still_one_prepare_per_peer() {
        let mut b = EchoBrb::new(ReplicaId(0), members(4), 1);
        let payments: Vec<Payment> = (0..256).map(pay).collect();
        let step = b.broadcast(Batch {
            broadcaster: ReplicaId(0),
            payments,
            sub_batches: vec![],
        });
        assert_eq!(count_kind(&step, "PREPARE"), 3);
    }

    #[test]
    fn duplicate_prepare_is_idempotent() {
        let mut b = EchoBrb::new(ReplicaId(1), members(4), 1);
        let p = pay(0);
        let s1 = b.on_prepare(ReplicaId(0), &batch(p.clone()));
        assert_eq!(count_kind(&s1, "ECHO"), 3);
        let s2 = b.on_prepare(ReplicaId(0), &batch(p));
        assert!(s2.outbound.is_empty());
    }

    #[test]
    fn conflicting_prepare_records_evidence_and_stays_silent() {
        let mut b = EchoBrb::new(ReplicaId(1), members(4), 1);
        let p = pay(0);
        let mut p2 = p.clone();
        p2.amount = 99;
        b.on_prepare(ReplicaId(0), &batch(p));
        let s = b.on_prepare(ReplicaId(0), &batch(p2));
        assert!(s.outbound.is_empty());
        assert_eq!(b.evidence.len(), 1);
    }

    #[test]
    fn ready_after_echo_quorum_and_after_f_plus_one_readys() {
        let p = pay(0);
        let d = wire::payment_digest(&p);

        // quorum of echoes
        let mut b = EchoBrb::new(ReplicaId(3), members(4), 1);
        b.on_echo(ReplicaId(0), p.id, d);
        let s = b.on_echo(ReplicaId(1), p.id, d);
        assert_eq!(count_kind(&s, "READY"), 0);
        let s = b.on_echo(ReplicaId(2), p.id, d);
        assert_eq!(count_kind(&s, "READY"), 3);

        // amplification from f+1 readys
        let mut b = EchoBrb::new(ReplicaId(3), members(4), 1);
        b.on_ready(ReplicaId(0), p.id, d);
        let s = b.on_ready(ReplicaId(1), p.id, d);
        assert_eq!(count_kind(&s, "READY"), 3);
        // both triggers fired: still exactly one Ready was emitted
        let s = b.on_echo(ReplicaId(0), p.id, d);
        assert_eq!(count_kind(&s, "READY"), 0);
    }

    #[test]
    fn delivery_needs_quorum_readys_payload_and_fifo_prefix() {
        let p0 = pay(0);
        let p1 = pay(1);
        let d0 = wire::payment_digest(&p0);
        let d1 = wire::payment_digest(&p1);
        let mut b = EchoBrb::new(ReplicaId(3), members(4), 1);
        b.on_prepare(ReplicaId(0), &batch(p0.clone()));
        b.on_prepare(ReplicaId(0), &batch(p1.clone()));

        // (s,1) completes first: delivery deferred until (s,0) delivers
        for r in 0..3 {
            b.on_ready(ReplicaId(r), p1.id, d1);
        }
        assert_eq!(b.ready_count(p1.id, &d1), 4); // incl. own amplified ready
        assert_eq!(b.delivered_prefix(ClientId(1)), 0);

        let mut delivered = Vec::new();
        for r in 0..3 {
            let s = b.on_ready(ReplicaId(r), p0.id, d0);
            delivered.extend(s.delivered);
        }
        let seqs: Vec<u64> = delivered
            .iter()
            .map(|d| match d {
                Delivery::Payment(p) => p.id.seq,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(seqs, vec![0, 1]);
        assert_eq!(b.delivered_prefix(ClientId(1)), 2);
    }

    #[test]
    fn missing_payload_is_pulled_from_ready_senders() {
        let p = pay(0);
        let d = wire::payment_digest(&p);
        let mut b = EchoBrb::new(ReplicaId(3), members(4), 1);
        // never saw the Prepare; quorum of readys arrives
        b.on_ready(ReplicaId(0), p.id, d);
        b.on_ready(ReplicaId(1), p.id, d);
        let s = b.on_ready(ReplicaId(2), p.id, d);
        assert!(count_kind(&s, "PULL") >= 2);
        assert!(s.delivered.is_empty());
        let s = b.on_payload(ReplicaId(0), p.clone());
        assert_eq!(s.delivered.len(), 1);
        // duplicate payload does not re-deliver
        let s = b.on_payload(ReplicaId(1), p);
        assert!(s.delivered.is_empty());
    }

    #[test]
    fn pull_responds_with_stored_version() {
        let p = pay(0);
        let mut holder = EchoBrb::new(ReplicaId(1), members(4), 1);
        holder.on_prepare(ReplicaId(0), &batch(p.clone()));
        let s = holder.on_pull(ReplicaId(3), p.id);
        assert_eq!(count_kind(&s, "PAYLOAD"), 1);
    }

    #[test]
    fn distinct_broadcasts_use_disjoint_message_sets() {
        let mut b = EchoBrb::new(ReplicaId(0), members(4), 1);
        let s1 = b.broadcast(batch(pay(0)));
        let s2 = b.broadcast(batch(pay(1)));
        let ids = |s: &BrbStep| {
            s.outbound
                .iter()
                .filter_map(|o| o.record.payment_id())
                .collect::<std::collections::BTreeSet<_>>()
        };
        assert!(ids(&s1).is_disjoint(&ids(&s2)));
    }
}
