//! Per-replica payment state machine: submission brokering, approval,
//! settlement, queueing, credit emission and dependency accumulation.
//!
//! Two variants share this engine. Under `Echo` a settle moves funds directly
//! (totality makes the same-replica deposit safe) and unfunded payments queue
//! until credits arrive. Under `Sig` approval checks only sequence
//! contiguity; incoming funds materialize exclusively through dependency
//! certificates attached to the spender's next outgoing payment, and every
//! settling replica unicasts a signed credit to the beneficiary's
//! representative.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::brb::Evidence;
use crate::crypto::{KeyRegistry, PartyId, Signature};
use crate::messages::{Batch, SignedSubmission};
use crate::model::{
    certificate_threshold, AccountState, ClientId, Payment, PaymentId, PaymentTuple, ReplicaId,
    XLog,
};
use crate::shard::ShardTopology;
use crate::wire;

/// Which protocol variant the engine runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Bracha-style broadcast, direct deposits, queue-until-funded.
    Echo,
    /// Signature broadcast, credits and dependency certificates.
    Sig,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Echo => "echo",
            Variant::Sig => "sig",
        }
    }
}

/// A settling replica's signed attestation covering one or more payment
/// tuples (one signature per sub-batch destination).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditBundle {
    pub signer: ReplicaId,
    pub tuples: Vec<PaymentTuple>,
    pub sig: Signature,
}

impl CreditBundle {
    pub fn sign(
        signer: ReplicaId,
        tuples: Vec<PaymentTuple>,
        registry: &KeyRegistry,
    ) -> CreditBundle {
        let sig = registry
            .sign(
                PartyId::Replica(signer),
                &wire::credit_sign_bytes(signer, &tuples),
            )
            .expect("settling replica holds a key");
        CreditBundle {
            signer,
            tuples,
            sig,
        }
    }

    pub fn verify(&self, registry: &KeyRegistry) -> bool {
        self.sig.signer == PartyId::Replica(self.signer)
            && registry.verify(
                self.sig.signer,
                &wire::credit_sign_bytes(self.signer, &self.tuples),
                &self.sig,
            )
    }

    pub fn covers(&self, t: &PaymentTuple) -> bool {
        self.tuples.contains(t)
    }
}

/// f+1 distinct-signer credit proofs for one payment tuple: transferable
/// evidence of incoming funds, verifiable against the source shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyCertificate {
    pub tuple: PaymentTuple,
    pub proofs: Vec<CreditBundle>,
}

impl DependencyCertificate {
    pub fn signers(&self) -> BTreeSet<ReplicaId> {
        self.proofs.iter().map(|p| p.signer).collect()
    }

    /// Valid iff at least f+1 distinct signers of the spender's shard signed
    /// bundles covering this exact tuple.
    pub fn verify(&self, topo: &ShardTopology, registry: &KeyRegistry) -> bool {
        let Some(shard) = topo.shard_index_of_client(self.tuple.id.spender) else {
            return false;
        };
        let threshold = certificate_threshold(topo.fault_bound(shard)) as usize;
        let mut signers = BTreeSet::new();
        for proof in &self.proofs {
            if !proof.covers(&self.tuple) {
                return false;
            }
            if topo.shard_index_of_replica(proof.signer) != Some(shard) {
                return false;
            }
            if !signers.insert(proof.signer) {
                return false;
            }
            if !proof.verify(registry) {
                return false;
            }
        }
        signers.len() >= threshold
    }
}

/// Accumulates credit proofs at a representative until certificates form.
#[derive(Debug, Clone, Default)]
pub struct DepAccumulator {
    /// Certificates not yet attached to an outgoing payment, per client.
    deps: BTreeMap<ClientId, Vec<DependencyCertificate>>,
    /// Proofs below the f+1 threshold, per payment tuple.
    partial: BTreeMap<PaymentTuple, BTreeMap<ReplicaId, CreditBundle>>,
    /// Tuples whose certificate already formed; late proofs are ignored.
    formed: BTreeSet<PaymentTuple>,
}

impl DepAccumulator {
    pub fn pending_certificates(&self, c: ClientId) -> &[DependencyCertificate] {
        self.deps.get(&c).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn pending_sum(&self, c: ClientId) -> u64 {
        self.pending_certificates(c)
            .iter()
            .map(|d| d.tuple.amount)
            .sum()
    }

    pub fn partial_tuples(&self) -> impl Iterator<Item = (&PaymentTuple, usize)> {
        self.partial.iter().map(|(t, m)| (t, m.len()))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubmitError {
    #[error("replica {me} does not represent client {client}")]
    WrongRepresentative { me: ReplicaId, client: ClientId },
    #[error("invalid client signature on submission {0}")]
    BadClientSignature(PaymentId),
    #[error("conflicting submission for {0}")]
    ConflictingSubmission(PaymentId),
    #[error("client {0} is not configured on this shard")]
    UnknownClient(ClientId),
}

/// Why a delivered payment is not (yet) settled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Approval {
    Approved,
    BlockedSeqGap,
    BlockedFunds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SettleEvent {
    pub tuple: PaymentTuple,
    pub conservation_ok: bool,
}

/// What one engine activation produced.
#[derive(Debug, Clone, Default)]
pub struct EngineEffects {
    pub settles: Vec<SettleEvent>,
    pub aborted: Vec<PaymentId>,
    pub credits: Vec<(ReplicaId, CreditBundle)>,
    /// Submissions entered the broadcast buffer; the node should arm a flush.
    pub buffer_grew: bool,
}

impl EngineEffects {
    fn merge(&mut self, other: EngineEffects) {
        self.settles.extend(other.settles);
        self.aborted.extend(other.aborted);
        self.credits.extend(other.credits);
        self.buffer_grew |= other.buffer_grew;
    }
}

/// Client-side submission: builds the signed payment and advances the
/// client's own sequence counter.
pub fn client_pay(
    client: ClientId,
    next_seq: &mut u64,
    beneficiary: ClientId,
    amount: u64,
    registry: &KeyRegistry,
) -> SignedSubmission {
    let payment = Payment::new(client, *next_seq, beneficiary, amount);
    *next_seq += 1;
    let client_sig = registry
        .sign(
            PartyId::Client(client),
            &wire::submission_sign_bytes(&payment.tuple()),
        )
        .expect("client key registered");
    SignedSubmission {
        payment,
        client_sig,
    }
}

#[derive(Debug, Clone)]
pub struct PaymentEngine {
    me: ReplicaId,
    variant: Variant,
    max_batch: usize,
    accounts: BTreeMap<ClientId, AccountState>,
    xlogs: BTreeMap<ClientId, XLog>,
    /// Delivered but not settled, per client ordered by seq.
    pending: BTreeMap<ClientId, BTreeMap<u64, Payment>>,
    /// Payments whose settle aborted on funds; their certificates are spent.
    dead_blocked: BTreeSet<PaymentId>,
    dep_acc: DepAccumulator,
    /// Payments dep-attached and awaiting the next batch flush.
    submit_buffer: Vec<Payment>,
    /// Sig variant: submissions held until the client's funds are provable.
    held: BTreeMap<ClientId, VecDeque<SignedSubmission>>,
    /// Sig variant, representative side: broadcast-but-unsettled bookkeeping
    /// (seq -> (amount, attached certificate sum)).
    in_flight: BTreeMap<ClientId, BTreeMap<u64, (u64, u64)>>,
    seen_submissions: BTreeMap<PaymentId, crate::crypto::Digest32>,
    rep_next_release: BTreeMap<ClientId, u64>,
    opening: BTreeMap<ClientId, u64>,
    pub evidence: Vec<Evidence>,
    // conservation bookkeeping
    initial_total: u64,
    bal_sum: u64,
    credits_issued: u64,
    credits_materialized: u64,
    // metrics
    pub max_queue_depth: usize,
    pub bad_credits: u64,
}

impl PaymentEngine {
    pub fn new(
        me: ReplicaId,
        variant: Variant,
        topo: &ShardTopology,
        balances: &BTreeMap<ClientId, u64>,
        max_batch: usize,
    ) -> Self {
        let my_shard = topo.shard_index_of_replica(me);
        let mut accounts = BTreeMap::new();
        let mut xlogs = BTreeMap::new();
        let mut opening = BTreeMap::new();
        let mut total = 0u64;
        for (c, b) in balances {
            if topo.shard_index_of_client(*c) == my_shard {
                accounts.insert(*c, AccountState::with_balance(*b));
                xlogs.insert(*c, XLog::new(*c));
                opening.insert(*c, *b);
                total += *b;
            }
        }
        PaymentEngine {
            me,
            variant,
            max_batch,
            accounts,
            xlogs,
            pending: BTreeMap::new(),
            dead_blocked: BTreeSet::new(),
            dep_acc: DepAccumulator::default(),
            submit_buffer: Vec::new(),
            held: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            seen_submissions: BTreeMap::new(),
            rep_next_release: BTreeMap::new(),
            opening,
            evidence: Vec::new(),
            initial_total: total,
            bal_sum: total,
            credits_issued: 0,
            credits_materialized: 0,
            max_queue_depth: 0,
            bad_credits: 0,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn account(&self, c: ClientId) -> Option<&AccountState> {
        self.accounts.get(&c)
    }

    pub fn xlog(&self, c: ClientId) -> Option<&XLog> {
        self.xlogs.get(&c)
    }

    pub fn accounts(&self) -> &BTreeMap<ClientId, AccountState> {
        &self.accounts
    }

    pub fn xlogs(&self) -> &BTreeMap<ClientId, XLog> {
        &self.xlogs
    }

    pub fn dep_accumulator(&self) -> &DepAccumulator {
        &self.dep_acc
    }

    pub fn pending_ids(&self) -> Vec<PaymentId> {
        self.pending
            .values()
            .flat_map(|m| m.values().map(|p| p.id))
            .collect()
    }

    pub fn pending_payments(&self) -> Vec<Payment> {
        self.pending
            .values()
            .flat_map(|m| m.values().cloned())
            .collect()
    }

    pub fn opening_balances(&self) -> &BTreeMap<ClientId, u64> {
        &self.opening
    }

    /// Left- and right-hand side of the variant's conservation equation.
    ///
    /// Echo: sum of balances stays the opening total. Sig: balances plus
    /// credits issued by local settles, minus certificate amounts already
    /// materialized locally, stays the opening total.
    pub fn conservation(&self) -> (u64, u64) {
        match self.variant {
            Variant::Echo => (self.bal_sum, self.initial_total),
            Variant::Sig => (
                self.bal_sum + self.credits_issued - self.credits_materialized,
                self.initial_total,
            ),
        }
    }

    /// Validates and queues a client submission at its representative.
    pub fn on_client_submit(
        &mut self,
        sub: SignedSubmission,
        topo: &ShardTopology,
        registry: &KeyRegistry,
    ) -> Result<EngineEffects, SubmitError> {
        let id = sub.payment.id;
        let client = id.spender;
        let Some(rep) = topo.representative(client) else {
            return Err(SubmitError::UnknownClient(client));
        };
        if rep != self.me {
            return Err(SubmitError::WrongRepresentative {
                me: self.me,
                client,
            });
        }
        if !registry.verify(
            PartyId::Client(client),
            &wire::submission_sign_bytes(&sub.payment.tuple()),
            &sub.client_sig,
        ) {
            return Err(SubmitError::BadClientSignature(id));
        }
        let digest = wire::payment_digest(&sub.payment);
        match self.seen_submissions.get(&id) {
            Some(d) if *d == digest => return Ok(EngineEffects::default()), // idempotent
            Some(_) => {
                self.evidence.push(Evidence::ConflictingSubmission { id });
                return Err(SubmitError::ConflictingSubmission(id));
            }
            None => {
                self.seen_submissions.insert(id, digest);
            }
        }
        match self.variant {
            Variant::Echo => {
                self.submit_buffer.push(sub.payment);
                Ok(EngineEffects {
                    buffer_grew: true,
                    ..Default::default()
                })
            }
            Variant::Sig => {
                self.held.entry(client).or_default().push_back(sub);
                Ok(self.release_held(client))
            }
        }
    }

    /// Provable funds of a client from this representative's viewpoint:
    /// settled balance, unattached certificates, and certificates already
    /// attached to broadcast-but-unsettled payments, minus the amounts those
    /// payments will withdraw.
    fn available(&self, c: ClientId) -> i128 {
        let bal = self.accounts.get(&c).map(|a| a.balance).unwrap_or(0) as i128;
        let unattached = self.dep_acc.pending_sum(c) as i128;
        let mut in_flight_credit = 0i128;
        let mut in_flight_debit = 0i128;
        if let Some(fl) = self.in_flight.get(&c) {
            for (amount, attached) in fl.values() {
                in_flight_debit += *amount as i128;
                in_flight_credit += *attached as i128;
            }
        }
        bal + unattached + in_flight_credit - in_flight_debit
    }

    /// Releases held submissions of `c` in seq order while funds are
    /// provable; each released payment absorbs every certificate accumulated
    /// so far and the accumulator is cleared.
    fn release_held(&mut self, c: ClientId) -> EngineEffects {
        let mut effects = EngineEffects::default();
        loop {
            let Some(queue) = self.held.get(&c) else { break };
            let Some(front) = queue.front() else { break };
            let next = *self
                .rep_next_release
                .entry(c)
                .or_insert_with(|| front.payment.id.seq);
            if front.payment.id.seq != next {
                break;
            }
            if self.available(c) < front.payment.amount as i128 {
                break;
            }
            let sub = self.held.get_mut(&c).unwrap().pop_front().unwrap();
            let mut payment = sub.payment;
            let attached: Vec<DependencyCertificate> =
                self.dep_acc.deps.remove(&c).unwrap_or_default();
            let attached_sum: u64 = attached.iter().map(|d| d.tuple.amount).sum();
            payment.deps = attached;
            self.in_flight
                .entry(c)
                .or_default()
                .insert(payment.id.seq, (payment.amount, attached_sum));
            self.rep_next_release.insert(c, payment.id.seq + 1);
            self.submit_buffer.push(payment);
            effects.buffer_grew = true;
        }
        effects
    }

    /// Count of submissions currently held for provable funds.
    pub fn held_count(&self) -> usize {
        self.held.values().map(|q| q.len()).sum()
    }

    pub fn buffered_count(&self) -> usize {
        self.submit_buffer.len()
    }

    /// Drains the submission buffer into broadcast batches of at most
    /// `max_batch` payments, sub-batched by the beneficiary's representative.
    pub fn make_batches(&mut self, topo: &ShardTopology) -> Vec<Batch> {
        let mut batches = Vec::new();
        while !self.submit_buffer.is_empty() {
            let take = self.max_batch.min(self.submit_buffer.len());
            let payments: Vec<Payment> = self.submit_buffer.drain(..take).collect();
            let mut groups: BTreeMap<ReplicaId, Vec<usize>> = BTreeMap::new();
            for (i, p) in payments.iter().enumerate() {
                if let Some(rep) = topo.representative(p.beneficiary) {
                    groups.entry(rep).or_default().push(i);
                }
            }
            batches.push(Batch {
                broadcaster: self.me,
                payments,
                sub_batches: groups.into_iter().collect(),
            });
        }
        batches
    }

    /// Approval status of a delivered payment, per variant.
    pub fn approve_status(&self, p: &Payment) -> Approval {
        let Some(acct) = self.accounts.get(&p.id.spender) else {
            return Approval::BlockedSeqGap;
        };
        if acct.next_seq != p.id.seq {
            return Approval::BlockedSeqGap;
        }
        match self.variant {
            Variant::Echo => {
                if acct.balance >= p.amount {
                    Approval::Approved
                } else {
                    Approval::BlockedFunds
                }
            }
            Variant::Sig => Approval::Approved,
        }
    }

    /// Delivery callback from the broadcast layer: queue the payment, then
    /// settle every queue head that approves, re-scanning in ascending client
    /// order after each settle.
    pub fn on_delivered(
        &mut self,
        p: Payment,
        topo: &ShardTopology,
        registry: &KeyRegistry,
    ) -> EngineEffects {
        self.pending.entry(p.id.spender).or_default().insert(p.id.seq, p);
        let depth: usize = self.pending.values().map(|m| m.len()).sum();
        self.max_queue_depth = self.max_queue_depth.max(depth);
        self.settle_pass(topo, registry)
    }

    fn settle_pass(&mut self, topo: &ShardTopology, registry: &KeyRegistry) -> EngineEffects {
        let mut effects = EngineEffects::default();
        // one signed credit bundle per destination representative per pass
        let mut credit_staging: BTreeMap<ReplicaId, Vec<PaymentTuple>> = BTreeMap::new();
        // after every settle, re-scan queue heads from the lowest client id
        loop {
            let next = self.pending.iter().find_map(|(_, q)| {
                q.values()
                    .next()
                    .filter(|p| {
                        !self.dead_blocked.contains(&p.id)
                            && self.approve_status(p) == Approval::Approved
                    })
                    .cloned()
            });
            let Some(head) = next else { break };
            let outcome = self.settle(head, topo, registry, &mut credit_staging);
            effects.merge(outcome);
        }
        for (dst, tuples) in credit_staging {
            let bundle = CreditBundle::sign(self.me, tuples, registry);
            effects.credits.push((dst, bundle));
        }
        // settles may have released held submissions' funding
        if self.variant == Variant::Sig {
            let clients: Vec<ClientId> = self.held.keys().copied().collect();
            for c in clients {
                let rel = self.release_held(c);
                effects.merge(rel);
            }
        }
        effects
    }

    fn settle(
        &mut self,
        p: Payment,
        topo: &ShardTopology,
        registry: &KeyRegistry,
        credit_staging: &mut BTreeMap<ReplicaId, Vec<PaymentTuple>>,
    ) -> EngineEffects {
        let mut effects = EngineEffects::default();
        let spender = p.id.spender;
        match self.variant {
            Variant::Echo => {
                debug_assert!(self.accounts.contains_key(&p.beneficiary));
                {
                    let acct = self.accounts.get_mut(&spender).unwrap();
                    acct.balance -= p.amount;
                    acct.next_seq += 1;
                }
                if let Some(b) = self.accounts.get_mut(&p.beneficiary) {
                    b.balance += p.amount;
                }
            }
            Variant::Sig => {
                // credit fresh, verifiable certificates exactly once
                let mut fresh = 0u64;
                let mut seen_here = BTreeSet::new();
                for cert in &p.deps {
                    let dep_id = cert.tuple.id;
                    if !seen_here.insert(dep_id) {
                        continue;
                    }
                    let acct = self.accounts.get(&spender).unwrap();
                    if acct.used_deps.contains(&dep_id) {
                        continue;
                    }
                    if !cert.verify(topo, registry) {
                        self.evidence.push(Evidence::BadCertificate {
                            key: crate::brb::BrbKey::Payment(dep_id),
                        });
                        continue;
                    }
                    self.accounts
                        .get_mut(&spender)
                        .unwrap()
                        .used_deps
                        .insert(dep_id);
                    fresh += cert.tuple.amount;
                }
                self.bal_sum += fresh;
                self.credits_materialized += fresh;
                let acct = self.accounts.get_mut(&spender).unwrap();
                acct.balance += fresh;
                if acct.balance < p.amount {
                    // faithful abort: the payment keeps its queue slot, the
                    // certificates stay consumed-and-credited
                    self.dead_blocked.insert(p.id);
                    effects.aborted.push(p.id);
                    return effects;
                }
                acct.balance -= p.amount;
                acct.next_seq += 1;
                self.bal_sum -= p.amount;
                self.credits_issued += p.amount;
                if let Some(rep) = topo.representative(p.beneficiary) {
                    credit_staging.entry(rep).or_default().push(p.tuple());
                }
            }
        }
        if let Some(q) = self.pending.get_mut(&spender) {
            q.remove(&p.id.seq);
        }
        if let Some(fl) = self.in_flight.get_mut(&spender) {
            fl.remove(&p.id.seq);
        }
        self.xlogs
            .get_mut(&spender)
            .expect("spender log exists on this shard")
            .append(p.clone())
            .expect("settle preserves seq contiguity");
        let (lhs, rhs) = self.conservation();
        effects.settles.push(SettleEvent {
            tuple: p.tuple(),
            conservation_ok: lhs == rhs,
        });
        effects
    }

    /// Credit proof handling at the beneficiary's representative: proofs
    /// accumulate per tuple and become a certificate at exactly f+1 distinct
    /// signers (f of the source shard).
    pub fn on_credit(
        &mut self,
        bundle: CreditBundle,
        topo: &ShardTopology,
        registry: &KeyRegistry,
    ) -> EngineEffects {
        let mut effects = EngineEffects::default();
        if !bundle.verify(registry) {
            self.bad_credits += 1;
            self.evidence.push(Evidence::BadCredit {
                signer: bundle.signer,
            });
            return effects;
        }
        let signer_shard = topo.shard_index_of_replica(bundle.signer);
        for tuple in bundle.tuples.clone() {
            if topo.representative(tuple.beneficiary) != Some(self.me) {
                continue;
            }
            let Some(source_shard) = topo.shard_index_of_client(tuple.id.spender) else {
                continue;
            };
            if signer_shard != Some(source_shard) {
                self.bad_credits += 1;
                self.evidence.push(Evidence::BadCredit {
                    signer: bundle.signer,
                });
                continue;
            }
            if self.dep_acc.formed.contains(&tuple) {
                continue;
            }
            let slot = self.dep_acc.partial.entry(tuple).or_default();
            slot.insert(bundle.signer, bundle.clone());
            let threshold = certificate_threshold(topo.fault_bound(source_shard)) as usize;
            if slot.len() >= threshold {
                let proofs: Vec<CreditBundle> = slot.values().cloned().collect();
                self.dep_acc.partial.remove(&tuple);
                self.dep_acc.formed.insert(tuple);
                self.dep_acc
                    .deps
                    .entry(tuple.beneficiary)
                    .or_default()
                    .push(DependencyCertificate { tuple, proofs });
                effects.merge(self.release_held(tuple.beneficiary));
            }
        }
        effects
    }

    pub fn balance_reply(&self, c: ClientId) -> Option<(u64, u64)> {
        self.accounts.get(&c).map(|a| (a.balance, a.next_seq))
    }

    /// Joiner-side state adoption: replaces accounts, logs and queues with
    /// the merged transfer result.
    pub fn adopt(
        &mut self,
        accounts: BTreeMap<ClientId, AccountState>,
        xlogs: BTreeMap<ClientId, XLog>,
        pending: Vec<Payment>,
    ) {
        self.bal_sum = accounts.values().map(|a| a.balance).sum();
        self.credits_materialized = 0;
        self.credits_issued = 0;
        // rebuild the sig-variant conservation ledger from the adopted logs
        for log in xlogs.values() {
            for p in log.entries() {
                self.credits_issued += p.amount;
            }
        }
        for acct in accounts.values() {
            // every used dep was materialized exactly once
            for dep in &acct.used_deps {
                if let Some(amount) = find_dep_amount(&xlogs, dep) {
                    self.credits_materialized += amount;
                }
            }
        }
        self.accounts = accounts;
        self.xlogs = xlogs;
        self.pending.clear();
        for p in pending {
            self.pending.entry(p.id.spender).or_default().insert(p.id.seq, p);
        }
    }
}

fn find_dep_amount(xlogs: &BTreeMap<ClientId, XLog>, dep: &PaymentId) -> Option<u64> {
    for log in xlogs.values() {
        for p in log.entries() {
            for cert in &p.deps {
                if cert.tuple.id == *dep {
                    return Some(cert.tuple.amount);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::CryptoBackend;
    use crate::model::SystemConfig;

    fn setup(variant: Variant) -> (PaymentEngine, ShardTopology, KeyRegistry, SystemConfig) {
        let cfg = SystemConfig::single_shard(4, 1, 4, 50).unwrap();
        let topo = ShardTopology::from_config(&cfg);
        let reg = KeyRegistry::generate(&cfg, 3, CryptoBackend::SimKeyed);
        let eng = PaymentEngine::new(ReplicaId(0), variant, &topo, &cfg.initial_balances, 256);
        (eng, topo, reg, cfg)
    }

    fn submission(
        reg: &KeyRegistry,
        client: u32,
        seq: u64,
        to: u32,
        amount: u64,
    ) -> SignedSubmission {
        let mut n = seq;
        client_pay(ClientId(client), &mut n, ClientId(to), amount, reg)
    }

    #[test]
    fn client_pay_assigns_sequential_numbers() {
        let (_, _, reg, _) = setup(Variant::Echo);
        let mut my_sn = 0;
        let a = client_pay(ClientId(0), &mut my_sn, ClientId(1), 10, &reg);
        let b = client_pay(ClientId(0), &mut my_sn, ClientId(2), 5, &reg);
        assert_eq!(a.payment.id, PaymentId::new(ClientId(0), 0));
        assert_eq!(b.payment.id, PaymentId::new(ClientId(0), 1));
        assert_eq!(my_sn, 2);
    }

    #[test]
    fn submit_validates_representative_and_signature() {
        let (mut eng, topo, reg, _) = setup(Variant::Echo);
        // client 1's representative is r1, not r0
        let sub = submission(&reg, 1, 0, 2, 10);
        assert!(matches!(
            eng.on_client_submit(sub, &topo, &reg),
            Err(SubmitError::WrongRepresentative { .. })
        ));
        // tampered signature
        let mut sub = submission(&reg, 0, 0, 2, 10);
        sub.client_sig.bytes[0] ^= 1;
        assert!(matches!(
            eng.on_client_submit(sub, &topo, &reg),
            Err(SubmitError::BadClientSignature(_))
        ));
        // fresh valid submission buffers
        let sub = submission(&reg, 0, 0, 2, 10);
        let fx = eng.on_client_submit(sub, &topo, &reg).unwrap();
        assert!(fx.buffer_grew);
        assert_eq!(eng.buffered_count(), 1);
    }

    #[test]
    fn conflicting_resubmission_is_rejected_with_evidence() {
        let (mut eng, topo, reg, _) = setup(Variant::Echo);
        let sub = submission(&reg, 0, 0, 2, 10);
        eng.on_client_submit(sub.clone(), &topo, &reg).unwrap();
        // identical duplicate: idempotent
        assert!(eng.on_client_submit(sub, &topo, &reg).is_ok());
        // same seq, different payload
        let sub2 = submission(&reg, 0, 0, 3, 10);
        assert!(matches!(
            eng.on_client_submit(sub2, &topo, &reg),
            Err(SubmitError::ConflictingSubmission(_))
        ));
        assert_eq!(eng.evidence.len(), 1);
    }

    #[test]
    fn echo_settle_moves_funds_and_appends_log() {
        let (mut eng, topo, reg, _) = setup(Variant::Echo);
        // Bob(c1) has 50; first a payment of 5 to c2, then 43 to Alice(c0)
        let fx = eng.on_delivered(Payment::new(ClientId(1), 0, ClientId(2), 5), &topo, &reg);
        assert_eq!(fx.settles.len(), 1);
        let fx = eng.on_delivered(Payment::new(ClientId(1), 1, ClientId(0), 43), &topo, &reg);
        assert_eq!(fx.settles.len(), 1);
        assert!(fx.settles[0].conservation_ok);
        let bob = eng.account(ClientId(1)).unwrap();
        assert_eq!(bob.balance, 2); // 50 - 5 - 43
        assert_eq!(bob.next_seq, 2);
        assert_eq!(eng.account(ClientId(0)).unwrap().balance, 50 + 43);
        assert_eq!(eng.xlog(ClientId(1)).unwrap().len(), 2);
        assert_eq!(eng.xlog(ClientId(1)).unwrap().entries()[1].amount, 43);
    }

    #[test]
    fn echo_blocks_on_seq_gap_until_predecessor_delivers() {
        let (mut eng, topo, reg, _) = setup(Variant::Echo);
        let fx = eng.on_delivered(Payment::new(ClientId(1), 1, ClientId(2), 5), &topo, &reg);
        assert!(fx.settles.is_empty());
        assert_eq!(
            eng.approve_status(&Payment::new(ClientId(1), 1, ClientId(2), 5)),
            Approval::BlockedSeqGap
        );
        let fx = eng.on_delivered(Payment::new(ClientId(1), 0, ClientId(3), 1), &topo, &reg);
        // both settle, in seq order
        assert_eq!(fx.settles.len(), 2);
        assert_eq!(fx.settles[0].tuple.id.seq, 0);
        assert_eq!(fx.settles[1].tuple.id.seq, 1);
    }

    #[test]
    fn echo_queues_unfunded_until_credit_arrives() {
        let (mut eng, topo, reg, _) = setup(Variant::Echo);
        // c1 holds 50, tries to pay 60
        let fx = eng.on_delivered(Payment::new(ClientId(1), 0, ClientId(2), 60), &topo, &reg);
        assert!(fx.settles.is_empty());
        assert_eq!(
            eng.approve_status(&Payment::new(ClientId(1), 0, ClientId(2), 60)),
            Approval::BlockedFunds
        );
        // an incoming settle credits c1 and unblocks the queue head
        let fx = eng.on_delivered(Payment::new(ClientId(0), 0, ClientId(1), 20), &topo, &reg);
        assert_eq!(fx.settles.len(), 2);
        assert_eq!(eng.account(ClientId(1)).unwrap().balance, 10);
    }

    fn certificate_for(
        topo: &ShardTopology,
        reg: &KeyRegistry,
        tuple: PaymentTuple,
        signers: &[u32],
    ) -> DependencyCertificate {
        let proofs = signers
            .iter()
            .map(|r| CreditBundle::sign(ReplicaId(*r), vec![tuple], reg))
            .collect();
        let cert = DependencyCertificate { tuple, proofs };
        assert!(cert.verify(topo, reg) || signers.len() < 2);
        cert
    }

    #[test]
    fn sig_settle_credits_certificates_then_withdraws() {
        let (mut eng, topo, reg, cfg) = setup(Variant::Sig);
        // drain c1's opening balance so the certificate is the only funding
        let _ = cfg;
        let drain = Payment::new(ClientId(1), 0, ClientId(2), 50);
        eng.on_delivered(drain, &topo, &reg);
        assert_eq!(eng.account(ClientId(1)).unwrap().balance, 0);

        let incoming = PaymentTuple {
            id: PaymentId::new(ClientId(0), 0),
            beneficiary: ClientId(1),
            amount: 10,
        };
        let cert = certificate_for(&topo, &reg, incoming, &[0, 1]);
        let mut p = Payment::new(ClientId(1), 1, ClientId(2), 8);
        p.deps = vec![cert];
        let fx = eng.on_delivered(p, &topo, &reg);
        assert_eq!(fx.settles.len(), 1);
        assert!(fx.settles[0].conservation_ok);
        assert_eq!(eng.account(ClientId(1)).unwrap().balance, 2); // 0 + 10 - 8
        // credit unicast toward the beneficiary's representative (r2)
        assert_eq!(fx.credits.len(), 1);
        assert_eq!(fx.credits[0].0, ReplicaId(2));
        assert!(fx.credits[0].1.verify(&reg));
    }

    #[test]
    fn sig_replayed_certificate_contributes_nothing() {
        let (mut eng, topo, reg, _) = setup(Variant::Sig);
        let incoming = PaymentTuple {
            id: PaymentId::new(ClientId(0), 0),
            beneficiary: ClientId(1),
            amount: 10,
        };
        let cert = certificate_for(&topo, &reg, incoming, &[0, 1]);
        let mut p0 = Payment::new(ClientId(1), 0, ClientId(2), 5);
        p0.deps = vec![cert.clone()];
        eng.on_delivered(p0, &topo, &reg);
        assert_eq!(eng.account(ClientId(1)).unwrap().balance, 55);

        let mut p1 = Payment::new(ClientId(1), 1, ClientId(2), 5);
        p1.deps = vec![cert]; // replay
        let fx = eng.on_delivered(p1, &topo, &reg);
        assert_eq!(fx.settles.len(), 1);
        assert!(fx.settles[0].conservation_ok);
        assert_eq!(eng.account(ClientId(1)).unwrap().balance, 50); // no double credit
    }

    #[test]
    fn sig_settle_abort_keeps_certificates_credited() {
        let (mut eng, topo, reg, _) = setup(Variant::Sig);
        // spend down to zero, then a payment beyond provable funds arrives
        eng.on_delivered(Payment::new(ClientId(1), 0, ClientId(2), 50), &topo, &reg);
        let fx = eng.on_delivered(Payment::new(ClientId(1), 1, ClientId(2), 30), &topo, &reg);
        assert_eq!(fx.aborted, vec![PaymentId::new(ClientId(1), 1)]);
        let (lhs, rhs) = eng.conservation();
        assert_eq!(lhs, rhs);
        // seq never advanced, log never grew
        assert_eq!(eng.account(ClientId(1)).unwrap().next_seq, 1);
        assert_eq!(eng.xlog(ClientId(1)).unwrap().len(), 1);
    }

    #[test]
    fn credit_threshold_forms_certificate_exactly_once() {
        let (mut eng, topo, reg, _) = setup(Variant::Sig);
        // engine is r0 = representative of c0
        let tuple = PaymentTuple {
            id: PaymentId::new(ClientId(1), 0),
            beneficiary: ClientId(0),
            amount: 10,
        };
        let fx = eng.on_credit(CreditBundle::sign(ReplicaId(1), vec![tuple], &reg), &topo, &reg);
        assert!(fx.settles.is_empty());
        assert_eq!(eng.dep_acc.pending_certificates(ClientId(0)).len(), 0);
        // duplicate proof from the same signer makes no progress
        eng.on_credit(CreditBundle::sign(ReplicaId(1), vec![tuple], &reg), &topo, &reg);
        assert_eq!(eng.dep_acc.pending_certificates(ClientId(0)).len(), 0);
        // second distinct signer reaches f+1 = 2
        eng.on_credit(CreditBundle::sign(ReplicaId(2), vec![tuple], &reg), &topo, &reg);
        let certs = eng.dep_acc.pending_certificates(ClientId(0));
        assert_eq!(certs.len(), 1);
        assert!(certs[0].verify(&topo, &reg));
        // late proofs for a formed tuple are ignored
        eng.on_credit(CreditBundle::sign(ReplicaId(3), vec![tuple], &reg), &topo, &reg);
        assert_eq!(eng.dep_acc.pending_certificates(ClientId(0)).len(), 1);
    }

    #[test]
    fn mismatched_or_invalid_proofs_never_form_a_certificate() {
        let (mut eng, topo, reg, _) = setup(Variant::Sig);
        let tuple = PaymentTuple {
            id: PaymentId::new(ClientId(1), 0),
            beneficiary: ClientId(0),
            amount: 10,
        };
        let mut other = tuple;
        other.amount = 11;
        eng.on_credit(CreditBundle::sign(ReplicaId(1), vec![tuple], &reg), &topo, &reg);
        eng.on_credit(CreditBundle::sign(ReplicaId(2), vec![other], &reg), &topo, &reg);
        assert!(eng.dep_acc.pending_certificates(ClientId(0)).is_empty());
        // a tampered signature is dropped outright
        let mut bad = CreditBundle::sign(ReplicaId(3), vec![tuple], &reg);
        bad.sig.bytes[0] ^= 1;
        eng.on_credit(bad, &topo, &reg);
        assert_eq!(eng.bad_credits, 1);
        assert!(eng.dep_acc.pending_certificates(ClientId(0)).is_empty());
    }

    #[test]
    fn sig_representative_attaches_and_clears_accumulated_deps() {
        let (mut eng, topo, reg, _) = setup(Variant::Sig);
        let tuple = PaymentTuple {
            id: PaymentId::new(ClientId(1), 0),
            beneficiary: ClientId(0),
            amount: 10,
        };
        eng.on_credit(CreditBundle::sign(ReplicaId(1), vec![tuple], &reg), &topo, &reg);
        eng.on_credit(CreditBundle::sign(ReplicaId(2), vec![tuple], &reg), &topo, &reg);
        assert_eq!(eng.dep_acc.pending_sum(ClientId(0)), 10);

        let sub = submission(&reg, 0, 0, 2, 30);
        eng.on_client_submit(sub, &topo, &reg).unwrap();
        let batches = eng.make_batches(&topo);
        assert_eq!(batches.len(), 1);
        let p = &batches[0].payments[0];
        assert_eq!(p.deps.len(), 1);
        assert_eq!(p.deps[0].tuple, tuple);
        // accumulator cleared after attaching
        assert_eq!(eng.dep_acc.pending_sum(ClientId(0)), 0);
    }

    #[test]
    fn sig_holds_unfundable_submission_until_certificate_forms() {
        let (mut eng, topo, reg, _) = setup(Variant::Sig);
        // c0 has 50; asks to pay 60: held
        let sub = submission(&reg, 0, 0, 2, 60);
        let fx = eng.on_client_submit(sub, &topo, &reg).unwrap();
        assert!(!fx.buffer_grew);
        assert_eq!(eng.held_count(), 1);
        // a 20-unit incoming certificate makes 70 provable
        let tuple = PaymentTuple {
            id: PaymentId::new(ClientId(1), 0),
            beneficiary: ClientId(0),
            amount: 20,
        };
        eng.on_credit(CreditBundle::sign(ReplicaId(1), vec![tuple], &reg), &topo, &reg);
        let fx = eng.on_credit(CreditBundle::sign(ReplicaId(2), vec![tuple], &reg), &topo, &reg);
        assert!(fx.buffer_grew);
        assert_eq!(eng.held_count(), 0);
        assert_eq!(eng.buffered_count(), 1);
    }

    #[test]
    fn batches_cap_at_max_and_group_sub_batches_by_representative() {
        let (mut eng, topo, reg, _) = setup(Variant::Echo);
        // 3 payments toward clients repped by two different replicas
        for (seq, to) in [(0u64, 1u32), (1, 5 % 4), (2, 2)] {
            let sub = submission(&reg, 0, seq, to, 1);
            eng.on_client_submit(sub, &topo, &reg).unwrap();
        }
        let batches = eng.make_batches(&topo);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].sub_batches.len(), 2);

        // 300 pending -> batches of 256 and 44
        let (mut eng, topo, reg, _) = setup(Variant::Echo);
        for seq in 0..300u64 {
            let sub = submission(&reg, 0, seq, 1, 1);
            eng.on_client_submit(sub, &topo, &reg).unwrap();
        }
        let batches = eng.make_batches(&topo);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].payments.len(), 256);
        assert_eq!(batches[1].payments.len(), 44);
        // batch signing is per batch: 2 batches, 2 broadcaster signatures

        // empty buffer -> no batch
        assert!(eng.make_batches(&topo).is_empty());
    }

    #[test]
    fn self_payment_conserves_funds() {
        let (mut eng, topo, reg, _) = setup(Variant::Echo);
        let fx = eng.on_delivered(Payment::new(ClientId(1), 0, ClientId(1), 30), &topo, &reg);
        assert_eq!(fx.settles.len(), 1);
        assert!(fx.settles[0].conservation_ok);
        assert_eq!(eng.account(ClientId(1)).unwrap().balance, 50);
    }
}
