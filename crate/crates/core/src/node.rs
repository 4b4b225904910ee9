//! The per-replica composite: one broadcast layer, one payment engine, view
//! management and reconfiguration, with all cross-replica interaction
//! expressed as envelopes in and envelopes out.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::brb::echo::EchoBrb;
use crate::brb::sig::{verify_certificate, SigBrb};
use crate::brb::{BrbKey, BrbStep, Delivery};
use crate::crypto::{Digest32, KeyRegistry, PartyId};
use crate::engine::{client_pay, PaymentEngine, Variant};
use crate::messages::{Batch, CommitCertificate, Envelope, PrepareBody, Record, SignedSubmission};
use crate::model::{
    byzantine_quorum, max_faults, ClientId, PaymentId, PaymentTuple, ReplicaId, SystemConfig,
};
use crate::reconfig::{merge_snapshots, StateSnapshot, View, ViewRecord};
use crate::shard::ShardTopology;
use crate::wire;

/// Participant address on the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pid {
    Replica(ReplicaId),
    Client(ClientId),
}

impl std::fmt::Display for Pid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pid::Replica(r) => write!(f, "{}", r),
            Pid::Client(c) => write!(f, "{}", c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimerKind {
    FlushBatches,
    Retransmit { batch: usize, attempt: u8 },
}

#[derive(Debug, Clone)]
pub enum NodeInput {
    Net { src: Pid, env: Envelope },
    Timer(TimerKind),
    /// A joining replica announces itself to the members it believes exist.
    StartJoin,
}

#[derive(Debug, Clone)]
pub enum Observation {
    Delivered {
        id: PaymentId,
        digest: Digest32,
    },
    Settled {
        tuple: PaymentTuple,
        conservation_ok: bool,
    },
    SettleAborted {
        id: PaymentId,
    },
    ViewInstalled {
        view: u64,
    },
    Paused {
        view: u64,
    },
    Resumed {
        view: u64,
    },
    JoinerActive {
        view: u64,
    },
}

#[derive(Debug, Default)]
pub struct StepOutput {
    pub sends: Vec<(Pid, Envelope)>,
    pub timers: Vec<(u64, TimerKind)>,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Active,
    Paused,
    Joining,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NodeCounters {
    pub auth_failures: u64,
    pub dropped_wrong_view: u64,
    pub rejected_submissions: u64,
    pub duplicate_joins: u64,
}

/// Snapshot of externally relevant replica state, for trace export and
/// equivalence checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaSnapshot {
    pub replica: ReplicaId,
    pub view: u64,
    pub balances: BTreeMap<ClientId, u64>,
    pub next_seqs: BTreeMap<ClientId, u64>,
    pub xlogs: BTreeMap<ClientId, Vec<PaymentTuple>>,
    pub pending: Vec<PaymentId>,
    /// Certificates formed at this representative, not yet attached.
    pub pending_certificates: BTreeMap<ClientId, Vec<PaymentTuple>>,
    /// Credit proofs still below threshold: tuple and proof count.
    pub partial_credits: Vec<(PaymentTuple, usize)>,
    pub evidence: u64,
    pub max_queue_depth: usize,
}

enum BrbLayer {
    Echo(EchoBrb),
    Sig(SigBrb),
}

pub struct ReplicaNode {
    pub id: ReplicaId,
    variant: Variant,
    seed: u64,
    view: View,
    topo: ShardTopology,
    my_shard: usize,
    registry: KeyRegistry,
    brb: BrbLayer,
    install_brb: SigBrb,
    engine: PaymentEngine,
    status: Status,
    batch_interval: u64,
    retransmit_interval: u64,
    flush_armed: bool,
    own_batches: Vec<Batch>,
    resume_acks: BTreeMap<u64, BTreeSet<ReplicaId>>,
    inflight_join: Option<ReplicaId>,
    queued_joins: VecDeque<ReplicaId>,
    last_install: Option<(ViewRecord, CommitCertificate)>,
    paused_submissions: Vec<SignedSubmission>,
    // joiner side
    expected_view: Option<ViewRecord>,
    snapshots: Vec<StateSnapshot>,
    joined: bool,
    pub counters: NodeCounters,
}

impl ReplicaNode {
    pub fn new(
        id: ReplicaId,
        variant: Variant,
        cfg: &SystemConfig,
        registry: KeyRegistry,
        seed: u64,
        batch_interval: u64,
        max_batch: usize,
    ) -> Self {
        let topo = ShardTopology::from_config(cfg);
        let my_shard = topo
            .shard_index_of_replica(id)
            .expect("replica is a shard member");
        let shard_members = topo.members(my_shard).to_vec();
        let f = topo.fault_bound(my_shard);
        let engine = PaymentEngine::new(id, variant, &topo, &cfg.initial_balances, max_batch);
        let brb = match variant {
            Variant::Echo => BrbLayer::Echo(EchoBrb::new(id, shard_members.clone(), f)),
            Variant::Sig => BrbLayer::Sig(SigBrb::new(id, shard_members.clone())),
        };
        ReplicaNode {
            id,
            variant,
            seed,
            view: View::initial(shard_members.clone()),
            topo,
            my_shard,
            registry,
            brb,
            install_brb: SigBrb::new(id, shard_members),
            engine,
            status: Status::Active,
            batch_interval,
            retransmit_interval: 1000,
            flush_armed: false,
            own_batches: Vec::new(),
            resume_acks: BTreeMap::new(),
            inflight_join: None,
            queued_joins: VecDeque::new(),
            last_install: None,
            paused_submissions: Vec::new(),
            expected_view: None,
            snapshots: Vec::new(),
            joined: false,
            counters: NodeCounters::default(),
        }
    }

    /// A replica outside the configuration, about to join. Reconfiguration is
    /// supported for single-shard signature-variant systems.
    pub fn new_joiner(
        id: ReplicaId,
        cfg: &SystemConfig,
        mut registry: KeyRegistry,
        seed: u64,
        batch_interval: u64,
        max_batch: usize,
    ) -> Self {
        assert_eq!(cfg.shards.len(), 1, "join supports single-shard systems");
        registry.register_replica(seed, id);
        let topo = ShardTopology::from_config(cfg);
        let engine = PaymentEngine::new(id, Variant::Sig, &topo, &cfg.initial_balances, max_batch);
        let members = topo.members(0).to_vec();
        ReplicaNode {
            id,
            variant: Variant::Sig,
            seed,
            view: View::initial(members.clone()),
            topo,
            my_shard: 0,
            registry,
            brb: BrbLayer::Sig(SigBrb::new(id, members.clone())),
            install_brb: SigBrb::new(id, members),
            engine,
            status: Status::Joining,
            batch_interval,
            retransmit_interval: 1000,
            flush_armed: false,
            own_batches: Vec::new(),
            resume_acks: BTreeMap::new(),
            inflight_join: None,
            queued_joins: VecDeque::new(),
            last_install: None,
            paused_submissions: Vec::new(),
            expected_view: None,
            snapshots: Vec::new(),
            joined: false,
            counters: NodeCounters::default(),
        }
    }

    pub fn view_id(&self) -> u64 {
        self.view.id
    }

    pub fn is_active(&self) -> bool {
        self.status == Status::Active
    }

    pub fn engine(&self) -> &PaymentEngine {
        &self.engine
    }

    pub fn topology(&self) -> &ShardTopology {
        &self.topo
    }

    pub fn snapshot_state(&self) -> ReplicaSnapshot {
        let mut pending_certificates = BTreeMap::new();
        let clients: Vec<ClientId> = self.engine.accounts().keys().copied().collect();
        for c in &clients {
            let certs: Vec<PaymentTuple> = self
                .engine
                .dep_accumulator()
                .pending_certificates(*c)
                .iter()
                .map(|d| d.tuple)
                .collect();
            if !certs.is_empty() {
                pending_certificates.insert(*c, certs);
            }
        }
        ReplicaSnapshot {
            replica: self.id,
            view: self.view.id,
            balances: self
                .engine
                .accounts()
                .iter()
                .map(|(c, a)| (*c, a.balance))
                .collect(),
            next_seqs: self
                .engine
                .accounts()
                .iter()
                .map(|(c, a)| (*c, a.next_seq))
                .collect(),
            xlogs: self
                .engine
                .xlogs()
                .iter()
                .map(|(c, l)| (*c, l.entries().iter().map(|p| p.tuple()).collect()))
                .collect(),
            pending: self.engine.pending_ids(),
            pending_certificates,
            partial_credits: self
                .engine
                .dep_accumulator()
                .partial_tuples()
                .map(|(t, n)| (*t, n))
                .collect(),
            evidence: (self.engine.evidence.len() + self.brb_evidence_len()) as u64,
            max_queue_depth: self.engine.max_queue_depth,
        }
    }

    fn brb_evidence_len(&self) -> usize {
        match &self.brb {
            BrbLayer::Echo(b) => b.evidence.len(),
            BrbLayer::Sig(b) => b.evidence.len(),
        }
    }

    pub fn conservation(&self) -> (u64, u64) {
        self.engine.conservation()
    }

    pub fn handle(&mut self, input: NodeInput, _now: u64) -> StepOutput {
        let mut out = StepOutput::default();
        match input {
            NodeInput::Net { src, env } => self.handle_envelope(src, env, &mut out),
            NodeInput::Timer(t) => self.handle_timer(t, &mut out),
            NodeInput::StartJoin => {
                let members = self.view.members.clone();
                for m in members {
                    if m != self.id {
                        self.queue_record(
                            Pid::Replica(m),
                            Record::JoinReq {
                                joiner: self.id,
                                view: self.view.id,
                            },
                            &mut out,
                        );
                    }
                }
            }
        }
        self.seal(out)
    }

    fn handle_envelope(&mut self, src: Pid, env: Envelope, out: &mut StepOutput) {
        if let Pid::Replica(r) = src {
            let bytes = env.auth_bytes(r, self.id);
            let ok = env
                .mac
                .as_ref()
                .map(|tag| self.registry.verify_mac(r, self.id, &bytes, tag))
                .unwrap_or(false);
            if !ok {
                self.counters.auth_failures += 1;
                return;
            }
        }
        for record in env.records.clone() {
            self.dispatch(src, env.view, record, out);
        }
    }

    fn dispatch(&mut self, src: Pid, view: u64, record: Record, out: &mut StepOutput) {
        match record {
            // reconfiguration records cross view boundaries by design
            Record::JoinReq { joiner, view } => self.on_join_req(joiner, view, out),
            Record::InstallForward { record, cert } => self.on_install_forward(record, cert, out),
            Record::Snapshot { snap } => self.on_snapshot(snap, out),
            Record::ResumeAck { view } => {
                if let Pid::Replica(r) = src {
                    if view >= self.view.id {
                        self.resume_acks.entry(view).or_default().insert(r);
                        self.maybe_resume(out);
                    }
                }
            }
            // install broadcast runs inside the current view
            Record::Prepare {
                origin,
                body: body @ PrepareBody::Install(_),
                sig,
            } => {
                if view != self.view.id {
                    self.counters.dropped_wrong_view += 1;
                    return;
                }
                let step = self
                    .install_brb
                    .on_prepare(origin, &body, sig.as_ref(), &self.registry);
                self.absorb_install_step(step, out);
            }
            Record::Ack {
                key: key @ BrbKey::Install(_),
                digest,
                sig,
            } => {
                let step = self.install_brb.on_ack(key, digest, sig, &self.registry);
                self.absorb_install_step(step, out);
            }
            Record::Commit {
                body: body @ crate::messages::CommitBody::Install(_),
                cert,
            } => {
                let step = self.install_brb.on_commit(&body, &cert, &self.registry);
                self.absorb_install_step(step, out);
            }
            // payment-layer records require a matching view and an active node
            other => {
                if view != self.view.id {
                    self.counters.dropped_wrong_view += 1;
                    return;
                }
                match self.status {
                    Status::Active => self.dispatch_payment(src, other, out),
                    Status::Paused => {
                        if let Record::Submit { sub } = other {
                            self.paused_submissions.push(sub);
                        } else {
                            self.counters.dropped_wrong_view += 1;
                        }
                    }
                    Status::Joining => {
                        self.counters.dropped_wrong_view += 1;
                    }
                }
            }
        }
    }

    fn dispatch_payment(&mut self, src: Pid, record: Record, out: &mut StepOutput) {
        match record {
            Record::Submit { sub } => self.on_submit(sub, out),
            Record::BalanceQuery { client } => {
                if let Some((balance, next_seq)) = self.engine.balance_reply(client) {
                    self.queue_record(
                        src,
                        Record::BalanceReply {
                            client,
                            balance,
                            next_seq,
                        },
                        out,
                    );
                }
            }
            Record::Credit { bundle } => {
                let fx = self.engine.on_credit(bundle, &self.topo, &self.registry);
                self.absorb_engine_effects(fx, out);
            }
            Record::Prepare { origin, body, sig } => match (&mut self.brb, body) {
                (BrbLayer::Echo(b), PrepareBody::Batch(batch)) => {
                    let step = b.on_prepare(origin, &batch);
                    self.absorb_brb_step(step, out);
                }
                (BrbLayer::Sig(b), body @ PrepareBody::Batch(_)) => {
                    let step = b.on_prepare(origin, &body, sig.as_ref(), &self.registry);
                    self.absorb_brb_step(step, out);
                }
                _ => {}
            },
            Record::Echo { id, digest } => {
                if let (BrbLayer::Echo(b), Pid::Replica(r)) = (&mut self.brb, src) {
                    let step = b.on_echo(r, id, digest);
                    self.absorb_brb_step(step, out);
                }
            }
            Record::Ready { id, digest } => {
                if let (BrbLayer::Echo(b), Pid::Replica(r)) = (&mut self.brb, src) {
                    let step = b.on_ready(r, id, digest);
                    self.absorb_brb_step(step, out);
                }
            }
            Record::Pull { id } => {
                if let (BrbLayer::Echo(b), Pid::Replica(r)) = (&mut self.brb, src) {
                    let step = b.on_pull(r, id);
                    self.absorb_brb_step(step, out);
                }
            }
            Record::PayloadResp { payment } => {
                if let (BrbLayer::Echo(b), Pid::Replica(r)) = (&mut self.brb, src) {
                    let step = b.on_payload(r, payment);
                    self.absorb_brb_step(step, out);
                }
            }
            Record::Ack { key, digest, sig } => {
                if let BrbLayer::Sig(b) = &mut self.brb {
                    let step = b.on_ack(key, digest, sig, &self.registry);
                    self.absorb_brb_step(step, out);
                }
            }
            Record::Commit { body, cert } => {
                if let BrbLayer::Sig(b) = &mut self.brb {
                    let step = b.on_commit(&body, &cert, &self.registry);
                    self.absorb_brb_step(step, out);
                }
            }
            Record::BalanceReply { .. }
            | Record::JoinReq { .. }
            | Record::Snapshot { .. }
            | Record::InstallForward { .. }
            | Record::ResumeAck { .. } => {}
        }
    }

    fn on_submit(&mut self, sub: SignedSubmission, out: &mut StepOutput) {
        match self.engine.on_client_submit(sub, &self.topo, &self.registry) {
            Ok(fx) => self.absorb_engine_effects(fx, out),
            Err(_) => self.counters.rejected_submissions += 1,
        }
    }

    fn handle_timer(&mut self, timer: TimerKind, out: &mut StepOutput) {
        match timer {
            TimerKind::FlushBatches => {
                self.flush_armed = false;
                if self.status == Status::Active {
                    self.flush_batches(out);
                }
            }
            TimerKind::Retransmit { batch, attempt } => {
                self.retransmit(batch, attempt, out);
            }
        }
    }

    fn flush_batches(&mut self, out: &mut StepOutput) {
        let batches = self.engine.make_batches(&self.topo);
        for batch in batches {
            let batch_index = self.own_batches.len();
            self.own_batches.push(batch.clone());
            match &mut self.brb {
                BrbLayer::Echo(b) => {
                    let step = b.broadcast(batch);
                    self.absorb_brb_step(step, out);
                }
                BrbLayer::Sig(b) => {
                    let step = b.broadcast_batch(batch, &self.registry);
                    self.absorb_brb_step(step, out);
                    out.timers.push((
                        self.retransmit_interval,
                        TimerKind::Retransmit {
                            batch: batch_index,
                            attempt: 1,
                        },
                    ));
                }
            }
        }
    }

    /// Liveness-only retry: re-Prepare a batch whose payments have not all
    /// committed, at most twice. Safety never depends on this timer.
    fn retransmit(&mut self, batch_index: usize, attempt: u8, out: &mut StepOutput) {
        if self.status != Status::Active {
            return;
        }
        let BrbLayer::Sig(b) = &self.brb else { return };
        let Some(batch) = self.own_batches.get(batch_index) else {
            return;
        };
        let mut missing: BTreeSet<ReplicaId> = BTreeSet::new();
        for p in &batch.payments {
            for r in b.unacked_peers(&BrbKey::Payment(p.id)) {
                missing.insert(r);
            }
        }
        if missing.is_empty() {
            return;
        }
        let body = PrepareBody::Batch(batch.clone());
        let sig = self
            .registry
            .sign(PartyId::Replica(self.id), &body.bytes())
            .expect("own key");
        for dst in missing {
            self.queue_record(
                Pid::Replica(dst),
                Record::Prepare {
                    origin: self.id,
                    body: body.clone(),
                    sig: Some(sig),
                },
                out,
            );
        }
        if attempt < 2 {
            out.timers.push((
                self.retransmit_interval * 2,
                TimerKind::Retransmit {
                    batch: batch_index,
                    attempt: attempt + 1,
                },
            ));
        }
    }

    fn absorb_brb_step(&mut self, step: BrbStep, out: &mut StepOutput) {
        for ob in step.outbound {
            self.queue_record(Pid::Replica(ob.dst), ob.record, out);
        }
        for d in step.delivered {
            match d {
                Delivery::Payment(p) => {
                    out.observations.push(Observation::Delivered {
                        id: p.id,
                        digest: wire::payment_digest(&p),
                    });
                    let fx = self.engine.on_delivered(p, &self.topo, &self.registry);
                    self.absorb_engine_effects(fx, out);
                }
                Delivery::Install(record, cert) => self.install_view(record, cert, out),
            }
        }
    }

    fn absorb_install_step(&mut self, step: BrbStep, out: &mut StepOutput) {
        for ob in step.outbound {
            self.queue_record(Pid::Replica(ob.dst), ob.record, out);
        }
        for d in step.delivered {
            if let Delivery::Install(record, cert) = d {
                self.install_view(record, cert, out);
            }
        }
    }

    fn absorb_engine_effects(&mut self, fx: crate::engine::EngineEffects, out: &mut StepOutput) {
        for s in &fx.settles {
            out.observations.push(Observation::Settled {
                tuple: s.tuple,
                conservation_ok: s.conservation_ok,
            });
        }
        for id in &fx.aborted {
            out.observations.push(Observation::SettleAborted { id: *id });
        }
        let mut self_credits = Vec::new();
        for (dst, bundle) in fx.credits {
            if dst == self.id {
                self_credits.push(bundle);
            } else {
                self.queue_record(Pid::Replica(dst), Record::Credit { bundle }, out);
            }
        }
        let mut buffer_grew = fx.buffer_grew;
        for bundle in self_credits {
            let fx2 = self.engine.on_credit(bundle, &self.topo, &self.registry);
            for s in &fx2.settles {
                out.observations.push(Observation::Settled {
                    tuple: s.tuple,
                    conservation_ok: s.conservation_ok,
                });
            }
            buffer_grew |= fx2.buffer_grew;
        }
        if buffer_grew && !self.flush_armed && self.status == Status::Active {
            self.flush_armed = true;
            out.timers.push((self.batch_interval, TimerKind::FlushBatches));
        }
    }

    // ---- reconfiguration ----

    fn on_join_req(&mut self, joiner: ReplicaId, their_view: u64, out: &mut StepOutput) {
        if self.view.members.contains(&joiner) {
            self.counters.duplicate_joins += 1;
            return;
        }
        if their_view < self.view.id {
            // answer a stale join with the newer view
            if let Some((record, cert)) = self.last_install.clone() {
                self.queue_record(
                    Pid::Replica(joiner),
                    Record::InstallForward { record, cert },
                    out,
                );
            }
            return;
        }
        if self.inflight_join.is_some() || self.status != Status::Active {
            if !self.queued_joins.contains(&joiner) {
                self.queued_joins.push_back(joiner);
            }
            return;
        }
        self.propose_join(joiner, out);
    }

    fn propose_join(&mut self, joiner: ReplicaId, out: &mut StepOutput) {
        self.inflight_join = Some(joiner);
        let record = ViewRecord::successor(&self.view, joiner);
        let step = self.install_brb.broadcast_install(record, &self.registry);
        self.absorb_install_step(step, out);
    }

    fn install_view(&mut self, record: ViewRecord, cert: CommitCertificate, out: &mut StepOutput) {
        if record.id != self.view.id + 1 {
            return;
        }
        let was_member = self.view.members.contains(&self.id);
        let newcomers: Vec<ReplicaId> = record
            .members
            .iter()
            .copied()
            .filter(|r| !self.view.members.contains(r))
            .collect();
        for r in &newcomers {
            self.registry.register_replica(self.seed, *r);
            self.topo.add_member(self.my_shard, *r);
        }
        self.view = View {
            id: record.id,
            members: record.members.clone(),
            installed_proof: Some(cert.clone()),
        };
        self.last_install = Some((record.clone(), cert));
        let shard_members = self.topo.members(self.my_shard).to_vec();
        let f = max_faults(shard_members.len() as u32);
        match &mut self.brb {
            BrbLayer::Echo(b) => b.set_members(shard_members.clone(), f),
            BrbLayer::Sig(b) => b.set_members(shard_members),
        }
        self.install_brb.set_members(record.members.clone());
        self.inflight_join = None;
        if self.status == Status::Active {
            self.status = Status::Paused;
            out.observations.push(Observation::Paused { view: record.id });
        }
        out.observations.push(Observation::ViewInstalled { view: record.id });

        if was_member {
            // help the joiner: proof of the new view, then the full state
            for j in &newcomers {
                if let Some((rec, crt)) = self.last_install.clone() {
                    self.queue_record(
                        Pid::Replica(*j),
                        Record::InstallForward {
                            record: rec,
                            cert: crt,
                        },
                        out,
                    );
                }
                let snap = self.build_snapshot(record.id);
                self.queue_record(Pid::Replica(*j), Record::Snapshot { snap }, out);
            }
            self.broadcast_resume_ack(out);
        }
        self.maybe_resume(out);
    }

    fn build_snapshot(&self, view: u64) -> StateSnapshot {
        let mut pending: BTreeMap<ClientId, Vec<crate::model::Payment>> = BTreeMap::new();
        for p in self.engine.pending_payments() {
            pending.entry(p.id.spender).or_default().push(p);
        }
        StateSnapshot {
            view,
            from: self.id,
            xlogs: self
                .engine
                .xlogs()
                .iter()
                .map(|(c, l)| (*c, l.entries().to_vec()))
                .collect(),
            pending,
        }
    }

    fn broadcast_resume_ack(&mut self, out: &mut StepOutput) {
        let view = self.view.id;
        self.resume_acks.entry(view).or_default().insert(self.id);
        for m in self.view.members.clone() {
            if m != self.id {
                self.queue_record(Pid::Replica(m), Record::ResumeAck { view }, out);
            }
        }
    }

    fn maybe_resume(&mut self, out: &mut StepOutput) {
        if self.status != Status::Paused {
            return;
        }
        let quorum = byzantine_quorum(self.view.members.len() as u32) as usize;
        let acks = self
            .resume_acks
            .get(&self.view.id)
            .map(|s| s.len())
            .unwrap_or(0);
        if acks < quorum {
            return;
        }
        self.status = Status::Active;
        out.observations.push(Observation::Resumed { view: self.view.id });
        if self.expected_view.is_some() && !self.joined {
            self.joined = true;
            out.observations.push(Observation::JoinerActive { view: self.view.id });
        }
        self.recover_in_flight(out);
        let subs = std::mem::take(&mut self.paused_submissions);
        for sub in subs {
            self.on_submit(sub, out);
        }
        if self.engine.buffered_count() > 0 && !self.flush_armed {
            self.flush_armed = true;
            out.timers.push((self.batch_interval, TimerKind::FlushBatches));
        }
        if let Some(j) = self.queued_joins.pop_front() {
            if !self.view.members.contains(&j) {
                self.propose_join(j, out);
            }
        }
    }

    /// After resuming in a new view, re-offer every own broadcast: committed
    /// payments as Commits (receivers deduplicate), uncommitted batches as
    /// fresh Prepares gathering acknowledgments under the new membership.
    fn recover_in_flight(&mut self, out: &mut StepOutput) {
        let BrbLayer::Sig(b) = &self.brb else { return };
        let mut commit_records = Vec::new();
        let mut reprepare: Vec<Batch> = Vec::new();
        for batch in &self.own_batches {
            let mut any_uncommitted = false;
            for p in &batch.payments {
                let key = BrbKey::Payment(p.id);
                if b.is_committed(&key) {
                    if let Some(rec) = b.commit_record(&key) {
                        commit_records.push(rec);
                    }
                } else {
                    any_uncommitted = true;
                }
            }
            if any_uncommitted {
                reprepare.push(batch.clone());
            }
        }
        let members = self.view.members.clone();
        for rec in commit_records {
            for dst in &members {
                if *dst != self.id {
                    self.queue_record(Pid::Replica(*dst), rec.clone(), out);
                }
            }
        }
        for batch in reprepare {
            let body = PrepareBody::Batch(batch);
            let sig = self
                .registry
                .sign(PartyId::Replica(self.id), &body.bytes())
                .expect("own key");
            for dst in &members {
                if *dst != self.id {
                    self.queue_record(
                        Pid::Replica(*dst),
                        Record::Prepare {
                            origin: self.id,
                            body: body.clone(),
                            sig: Some(sig),
                        },
                        out,
                    );
                }
            }
        }
    }

    // ---- joiner side ----

    fn on_install_forward(
        &mut self,
        record: ViewRecord,
        cert: CommitCertificate,
        out: &mut StepOutput,
    ) {
        if record.id <= self.view.id {
            return;
        }
        // the certificate was formed by the previous view's members
        let old_members: Vec<ReplicaId> = record
            .members
            .iter()
            .copied()
            .filter(|r| *r != self.id)
            .collect();
        let digest = crate::crypto::digest(&wire::view_record_bytes(&record));
        if cert.key != BrbKey::Install(record.id) || cert.digest != digest {
            return;
        }
        if !verify_certificate(&cert, &old_members, &self.registry) {
            return;
        }
        match self.status {
            Status::Joining => {
                self.expected_view = Some(record.clone());
                self.last_install = Some((record, cert));
                self.try_adopt(out);
            }
            _ => {
                // a lagging member catches up directly
                self.install_view(record, cert, out);
            }
        }
    }

    fn on_snapshot(&mut self, snap: StateSnapshot, out: &mut StepOutput) {
        if self.status != Status::Joining {
            return;
        }
        if self.snapshots.iter().any(|s| s.from == snap.from) {
            return;
        }
        self.snapshots.push(snap);
        self.try_adopt(out);
    }

    fn try_adopt(&mut self, out: &mut StepOutput) {
        let Some(record) = self.expected_view.clone() else {
            return;
        };
        let old_n = record.members.len() as u32 - 1;
        let f_old = max_faults(old_n);
        let need = byzantine_quorum(old_n) as usize;
        let usable: Vec<StateSnapshot> = self
            .snapshots
            .iter()
            .filter(|s| s.view == record.id)
            .cloned()
            .collect();
        if usable.len() < need {
            return;
        }
        let opening = self.opening_balances();
        let merged = merge_snapshots(&usable, f_old, &opening, self.variant);
        // adopt logs and queues; mark everything settled as delivered so
        // recommitted payments deduplicate
        if let BrbLayer::Sig(b) = &mut self.brb {
            for (c, log) in &merged.xlogs {
                let mut delivered: Vec<u64> = (0..log.len()).collect();
                for p in &merged.pending {
                    if p.id.spender == *c {
                        delivered.push(p.id.seq);
                    }
                }
                b.adopt_delivered(*c, delivered);
            }
        }
        self.engine.adopt(
            merged.accounts,
            merged.xlogs,
            merged.pending,
        );
        let cert = self.last_install.clone().map(|(_, c)| c);
        self.view = View {
            id: record.id,
            members: record.members.clone(),
            installed_proof: cert,
        };
        for r in &record.members {
            self.registry.register_replica(self.seed, *r);
            self.topo.add_member(self.my_shard, *r);
        }
        let shard_members = self.topo.members(self.my_shard).to_vec();
        if let BrbLayer::Sig(b) = &mut self.brb {
            b.set_members(shard_members);
        }
        self.install_brb.set_members(record.members.clone());
        self.status = Status::Paused;
        out.observations.push(Observation::ViewInstalled { view: record.id });
        self.broadcast_resume_ack(out);
        self.maybe_resume(out);
    }

    fn opening_balances(&self) -> BTreeMap<ClientId, u64> {
        self.engine.opening_balances().clone()
    }

    // ---- plumbing ----

    fn queue_record(&self, dst: Pid, record: Record, out: &mut StepOutput) {
        out.sends.push((
            dst,
            Envelope::new(self.view.id, vec![record]),
        ));
    }

    /// Coalesces queued records per (destination, view) and applies link MACs.
    fn seal(&mut self, out: StepOutput) -> StepOutput {
        let mut grouped: BTreeMap<(Pid, u64), Vec<Record>> = BTreeMap::new();
        let mut order: Vec<(Pid, u64)> = Vec::new();
        for (dst, env) in out.sends {
            let key = (dst, env.view);
            if !grouped.contains_key(&key) {
                order.push(key);
            }
            grouped.entry(key).or_default().extend(env.records);
        }
        let mut sends = Vec::new();
        for key in order {
            let records = grouped.remove(&key).unwrap();
            let (dst, view) = key;
            let mut env = Envelope::new(view, records);
            if let Pid::Replica(r) = dst {
                let bytes = env.auth_bytes(self.id, r);
                env.mac = self.registry.mac(self.id, r, &bytes).ok();
            }
            sends.push((dst, env));
        }
        StepOutput {
            sends,
            timers: out.timers,
            observations: out.observations,
        }
    }
}

/// Client-side helper building a signed submission envelope.
pub fn client_submit_envelope(
    client: ClientId,
    next_seq: &mut u64,
    beneficiary: ClientId,
    amount: u64,
    registry: &KeyRegistry,
) -> Envelope {
    let sub = client_pay(client, next_seq, beneficiary, amount, registry);
    Envelope::new(0, vec![Record::Submit { sub }])
}

/// Joiner activation milestone check used by tests.
pub fn joiner_became_active(obs: &[Observation]) -> bool {
    obs.iter()
        .any(|o| matches!(o, Observation::JoinerActive { .. }))
}

impl ReplicaNode {
    /// Uncommitted own broadcasts, surfaced as stalled metrics.
    pub fn stalled_own_broadcasts(&self) -> Vec<PaymentId> {
        let BrbLayer::Sig(b) = &self.brb else {
            return Vec::new();
        };
        let mut stalled = Vec::new();
        for batch in &self.own_batches {
            for p in &batch.payments {
                if !b.is_committed(&BrbKey::Payment(p.id)) {
                    stalled.push(p.id);
                }
            }
        }
        stalled
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::CryptoBackend;

    #[test]
    fn client_submit_envelope_carries_signed_submission() {
        let cfg = SystemConfig::single_shard(4, 1, 4, 100).unwrap();
        let reg = KeyRegistry::generate(&cfg, 1, CryptoBackend::SimKeyed);
        let mut sn = 0;
        let env = client_submit_envelope(ClientId(0), &mut sn, ClientId(1), 5, &reg);
        assert_eq!(sn, 1);
        match &env.records[0] {
            Record::Submit { sub } => {
                assert_eq!(sub.payment.id, PaymentId::new(ClientId(0), 0));
                assert!(reg.verify(
                    PartyId::Client(ClientId(0)),
                    &wire::submission_sign_bytes(&sub.payment.tuple()),
                    &sub.client_sig
                ));
            }
            _ => panic!("expected a submission"),
        }
    }

    #[test]
    fn envelope_mac_is_checked_on_replica_links() {
        let cfg = SystemConfig::single_shard(4, 1, 4, 100).unwrap();
        let reg = KeyRegistry::generate(&cfg, 1, CryptoBackend::SimKeyed);
        let mut node = ReplicaNode::new(
            ReplicaId(1),
            Variant::Echo,
            &cfg,
            reg.clone(),
            1,
            5,
            256,
        );
        // unMAC'd replica envelope is dropped
        let env = Envelope::new(0, vec![Record::Pull {
            id: PaymentId::new(ClientId(0), 0),
        }]);
        node.handle(
            NodeInput::Net {
                src: Pid::Replica(ReplicaId(0)),
                env,
            },
            0,
        );
        assert_eq!(node.counters.auth_failures, 1);
    }
}
