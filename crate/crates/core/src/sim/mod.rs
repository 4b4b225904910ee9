//! Deterministic discrete-event network: replicas and clients exchange
//! envelopes through a seeded scheduler with per-link FIFO delivery, crash
//! and delay injection, and scripted Byzantine behaviors. Every run is a pure
//! function of its configuration and seed.

pub mod oracle;
pub mod trace;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::brb::BrbKey;
use crate::crypto::{digest, CryptoBackend, Digest32, KeyRegistry, PartyId, Signature};
use crate::engine::{client_pay, CreditBundle, Variant};
use crate::messages::{Batch, CommitBody, CommitCertificate, Envelope, PrepareBody, Record};
use crate::model::{byzantine_quorum, ClientId, Payment, PaymentId, PaymentTuple, ReplicaId, SystemConfig};
use crate::node::{NodeInput, Observation, Pid, ReplicaNode, TimerKind};
use crate::shard::ShardTopology;
use crate::wire;
use trace::{
    CrossShardMsg, JoinReport, SettleRecord, SubmissionRecord, Trace, TraceLevel, TraceRecord,
    Violation,
};

pub use crate::workload::{Workload, WorkloadEntry};

/// Scripted replica misbehavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByzScript {
    /// Broadcast two conflicting payloads for a double-spending client's id.
    EquivocateBroadcast,
    /// Complete the broadcast but reveal the outcome to only a few replicas:
    /// under `sig`, send Commit to exactly `deliver_to` correct replicas;
    /// under `echo`, send the payload to only f+1 correct replicas.
    WithholdCommit { deliver_to: u32 },
    /// Emit signed credits for payments that never settled.
    ForgeCredit,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FaultPlan {
    pub crashes: BTreeMap<ReplicaId, u64>,
    /// Added latency (from sim-time, extra ms) per replica.
    pub delays: BTreeMap<ReplicaId, (u64, u64)>,
    pub byz_replicas: BTreeMap<ReplicaId, ByzScript>,
    /// Clients that submit double-spend pairs.
    pub byz_clients: BTreeSet<ClientId>,
    /// Permit more Byzantine replicas than the shard fault bound
    /// (exploratory runs only).
    pub allow_beyond_f: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatencyModel {
    /// One-way latency uniform in [mean/2, 3*mean/2].
    Uniform { mean_oneway_ms: u64 },
    /// Seeded adversarial jitter in [1, max_ms]: realizes arbitrary message
    /// permutations subject to per-link FIFO.
    Adversarial { max_ms: u64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        // 20ms round trip
        LatencyModel::Uniform { mean_oneway_ms: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub max_batch: usize,
    pub interval_ms: u64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            max_batch: 256,
            interval_ms: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinPlan {
    pub joiner: ReplicaId,
    pub at_ms: u64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub variant: Variant,
    pub backend: CryptoBackend,
    pub latency: LatencyModel,
    pub faults: FaultPlan,
    pub workload: Workload,
    pub seed: u64,
    pub horizon_ms: u64,
    pub batching: BatchConfig,
    pub trace_level: TraceLevel,
    pub join: Option<JoinPlan>,
    /// Balance queries to schedule: (sim-time, client).
    pub balance_queries: Vec<(u64, ClientId)>,
}

impl RunConfig {
    pub fn new(system: SystemConfig, variant: Variant, workload: Workload, seed: u64) -> Self {
        RunConfig {
            system,
            variant,
            backend: CryptoBackend::SimKeyed,
            latency: LatencyModel::default(),
            faults: FaultPlan::default(),
            workload,
            seed,
            horizon_ms: 600_000,
            batching: BatchConfig::default(),
            trace_level: TraceLevel::Full,
            join: None,
            balance_queries: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid system configuration: {0}")]
    Config(#[from] crate::model::ConfigError),
    #[error("workload references unconfigured client {0}")]
    UnknownWorkloadClient(ClientId),
    #[error("echo variant requires a single shard")]
    EchoNeedsSingleShard,
    #[error("reconfiguration requires the signature variant on a single shard")]
    JoinNeedsSigSingleShard,
    #[error("shard {shard} has {count} byzantine replicas, bound is {bound}")]
    TooManyByzantine {
        shard: usize,
        count: usize,
        bound: u32,
    },
}

/// Deterministic stream derivation: one independent generator per purpose.
pub fn derive_rng(seed: u64, tag: &str) -> ChaCha12Rng {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    ChaCha12Rng::from_seed(digest(&bytes))
}

#[derive(Debug, Clone)]
enum Ev {
    Deliver { src: Pid, dst: Pid, env: Envelope },
    Submit { idx: usize },
    Timer { replica: ReplicaId, kind: TimerKind },
    Crash(ReplicaId),
    DelayStart(ReplicaId),
    JoinStart(ReplicaId),
    Query { client: ClientId },
}

struct Queued {
    t: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.seq == other.seq
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.t, self.seq).cmp(&(other.t, other.seq))
    }
}

enum Actor {
    Honest(Box<ReplicaNode>),
    Byz(Box<ByzReplica>),
}

struct Sim {
    cfg: RunConfig,
    topo: ShardTopology,
    registry: KeyRegistry,
    heap: BinaryHeap<Reverse<Queued>>,
    next_seq: u64,
    now: u64,
    actors: BTreeMap<ReplicaId, Actor>,
    client_seq: BTreeMap<ClientId, u64>,
    crashed: BTreeMap<ReplicaId, u64>,
    delays: BTreeMap<ReplicaId, (u64, u64)>,
    link_last: BTreeMap<(Pid, Pid), u64>,
    latency_rng: ChaCha12Rng,
    trace: Trace,
    // godview safety bookkeeping
    delivered_payloads: BTreeMap<PaymentId, Digest32>,
    settled_tuples: BTreeMap<PaymentId, PaymentTuple>,
    settled_at: BTreeSet<(ReplicaId, PaymentId)>,
    fifo_progress: BTreeMap<(ReplicaId, ClientId), u64>,
    join_started: Option<u64>,
    joiner_active: Option<u64>,
}

/// Runs one simulation to quiescence (or the horizon) and returns the trace.
pub fn run(cfg: &RunConfig) -> Result<Trace, RunError> {
    validate(cfg)?;
    let topo = ShardTopology::from_config(&cfg.system);
    let registry = KeyRegistry::generate(&cfg.system, cfg.seed, cfg.backend);
    let mut sim = Sim::new(cfg.clone(), topo, registry);
    sim.schedule_initial();
    sim.run_loop();
    Ok(sim.finish())
}

fn validate(cfg: &RunConfig) -> Result<(), RunError> {
    cfg.system.validate()?;
    for e in &cfg.workload.entries {
        for c in [e.spender, e.beneficiary] {
            if cfg.system.representative_of.get(&c).is_none() {
                return Err(RunError::UnknownWorkloadClient(c));
            }
        }
    }
    if cfg.variant == Variant::Echo && cfg.system.shards.len() > 1 {
        return Err(RunError::EchoNeedsSingleShard);
    }
    if cfg.join.is_some() && (cfg.variant != Variant::Sig || cfg.system.shards.len() != 1) {
        return Err(RunError::JoinNeedsSigSingleShard);
    }
    if !cfg.faults.allow_beyond_f {
        for (i, shard) in cfg.system.shards.iter().enumerate() {
            let count = shard
                .iter()
                .filter(|r| cfg.faults.byz_replicas.contains_key(r))
                .count();
            let bound = cfg.system.fault_bounds[i];
            if count > bound as usize {
                return Err(RunError::TooManyByzantine {
                    shard: i,
                    count,
                    bound,
                });
            }
        }
    }
    Ok(())
}

impl Sim {
    fn new(cfg: RunConfig, topo: ShardTopology, registry: KeyRegistry) -> Self {
        let mut actors = BTreeMap::new();
        for r in cfg.system.all_replicas() {
            let actor = match cfg.faults.byz_replicas.get(&r) {
                Some(script) => Actor::Byz(Box::new(ByzReplica::new(
                    r,
                    *script,
                    cfg.variant,
                    &cfg.system,
                    &topo,
                    registry.clone(),
                    &cfg.faults,
                ))),
                None => Actor::Honest(Box::new(ReplicaNode::new(
                    r,
                    cfg.variant,
                    &cfg.system,
                    registry.clone(),
                    cfg.seed,
                    cfg.batching.interval_ms,
                    cfg.batching.max_batch,
                ))),
            };
            actors.insert(r, actor);
        }
        if let Some(join) = cfg.join {
            let joiner = ReplicaNode::new_joiner(
                join.joiner,
                &cfg.system,
                registry.clone(),
                cfg.seed,
                cfg.batching.interval_ms,
                cfg.batching.max_batch,
            );
            actors.insert(join.joiner, Actor::Honest(Box::new(joiner)));
        }
        let client_seq = cfg.system.clients().map(|c| (c, 0)).collect();
        let latency_rng = derive_rng(cfg.seed, "latency");
        let trace = Trace {
            seed: cfg.seed,
            variant: cfg.variant.label().to_string(),
            level: cfg.trace_level,
            end_time_ms: 0,
            drained: false,
            records: Vec::new(),
            msg_counts: BTreeMap::new(),
            envelopes: 0,
            submissions: Vec::new(),
            settles: Vec::new(),
            deliveries: 0,
            violations: Vec::new(),
            stalled: Vec::new(),
            cross_shard_msgs: Vec::new(),
            final_replicas: BTreeMap::new(),
            client_balances: BTreeMap::new(),
            join: None,
            dropped_to_crashed: 0,
        };
        Sim {
            cfg,
            topo,
            registry,
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
            actors,
            client_seq,
            crashed: BTreeMap::new(),
            delays: BTreeMap::new(),
            link_last: BTreeMap::new(),
            latency_rng,
            trace,
            delivered_payloads: BTreeMap::new(),
            settled_tuples: BTreeMap::new(),
            settled_at: BTreeSet::new(),
            fifo_progress: BTreeMap::new(),
            join_started: None,
            joiner_active: None,
        }
    }

    fn push(&mut self, t: u64, ev: Ev) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Queued { t, seq, ev }));
    }

    fn schedule_initial(&mut self) {
        for i in 0..self.cfg.workload.entries.len() {
            let t = self.cfg.workload.entries[i].at_ms;
            self.push(t, Ev::Submit { idx: i });
        }
        for (r, t) in self.cfg.faults.crashes.clone() {
            self.push(t, Ev::Crash(r));
        }
        for (r, (t, _)) in self.cfg.faults.delays.clone() {
            self.push(t, Ev::DelayStart(r));
        }
        if let Some(j) = self.cfg.join {
            self.push(j.at_ms, Ev::JoinStart(j.joiner));
        }
        for (t, c) in self.cfg.balance_queries.clone() {
            self.push(t, Ev::Query { client: c });
        }
    }

    fn delay_of(&self, p: Pid) -> u64 {
        match p {
            Pid::Replica(r) => match self.delays.get(&r) {
                Some((from, delta)) if self.now >= *from => *delta,
                _ => 0,
            },
            Pid::Client(_) => 0,
        }
    }

    /// Per-link FIFO arrival time with base latency, endpoint delay and
    /// queueing behind the link's previous message.
    fn arrival(&mut self, src: Pid, dst: Pid) -> u64 {
        let base = match self.cfg.latency {
            LatencyModel::Uniform { mean_oneway_ms } => {
                let lo = (mean_oneway_ms / 2).max(1);
                let hi = mean_oneway_ms + mean_oneway_ms / 2;
                self.latency_rng.random_range(lo..=hi.max(lo))
            }
            LatencyModel::Adversarial { max_ms } => self.latency_rng.random_range(1..=max_ms.max(1)),
        };
        let delta = self.delay_of(src).max(self.delay_of(dst));
        let t = self.now + base + delta;
        let last = self.link_last.entry((src, dst)).or_insert(0);
        let arr = t.max(*last);
        *last = arr;
        arr
    }

    fn record_event(&mut self, kind: &str, who: String, payment: Option<PaymentId>, view: Option<u64>) {
        // fault and settle events are kept at every trace level
        self.trace.records.push(TraceRecord {
            t: self.now,
            kind: kind.to_string(),
            src: who.clone(),
            dst: who,
            payment,
            view,
        });
    }

    fn send(&mut self, src: Pid, dst: Pid, env: Envelope) {
        debug_assert_ne!(src, dst, "self-messages are delivered locally");
        self.trace.envelopes += 1;
        for r in &env.records {
            *self
                .trace
                .msg_counts
                .entry(r.kind().to_string())
                .or_default() += 1;
            if let (Pid::Replica(a), Pid::Replica(b)) = (src, dst) {
                let (sa, sb) = (
                    self.topo.shard_index_of_replica(a),
                    self.topo.shard_index_of_replica(b),
                );
                if sa.is_some() && sb.is_some() && sa != sb {
                    self.trace.cross_shard_msgs.push(CrossShardMsg {
                        kind: r.kind().to_string(),
                        src: a,
                        dst: b,
                        payment: r.payment_id(),
                    });
                }
            }
            if self.cfg.trace_level == TraceLevel::Full {
                self.trace.records.push(TraceRecord {
                    t: self.now,
                    kind: format!("SEND/{}", r.kind()),
                    src: src.to_string(),
                    dst: dst.to_string(),
                    payment: r.payment_id(),
                    view: Some(env.view),
                });
            }
        }
        let t = self.arrival(src, dst);
        self.push(t, Ev::Deliver { src, dst, env });
    }

    fn run_loop(&mut self) {
        while let Some(Reverse(q)) = self.heap.pop() {
            if q.t > self.cfg.horizon_ms {
                self.now = self.cfg.horizon_ms;
                self.trace.drained = false;
                return;
            }
            self.now = q.t;
            match q.ev {
                Ev::Submit { idx } => self.handle_submit(idx),
                Ev::Deliver { src, dst, env } => self.handle_deliver(src, dst, env),
                Ev::Timer { replica, kind } => self.handle_timer(replica, kind),
                Ev::Crash(r) => {
                    self.crashed.insert(r, self.now);
                    self.record_event("CRASH", r.to_string(), None, None);
                }
                Ev::DelayStart(r) => {
                    if let Some(d) = self.cfg.faults.delays.get(&r) {
                        self.delays.insert(r, *d);
                        self.record_event("DELAY", r.to_string(), None, None);
                    }
                }
                Ev::JoinStart(r) => {
                    self.join_started = Some(self.now);
                    self.record_event("JOIN_START", r.to_string(), None, None);
                    self.step_node(r, NodeInput::StartJoin);
                }
                Ev::Query { client } => self.handle_query(client),
            }
        }
        self.trace.drained = true;
    }

    fn handle_submit(&mut self, idx: usize) {
        let entry = self.cfg.workload.entries[idx];
        let client = entry.spender;
        let Some(rep) = self.topo.representative(client) else {
            return;
        };
        let seq = self.client_seq.entry(client).or_insert(0);
        let conflicting = self.cfg.faults.byz_clients.contains(&client);
        let mut subs = Vec::new();
        let sub = client_pay(client, seq, entry.beneficiary, entry.amount, &self.registry);
        subs.push(sub);
        if conflicting {
            // same sequence number, different beneficiary: a double-spend pair
            let twin_beneficiary = self.twin_beneficiary(entry.beneficiary);
            let payment = Payment::new(client, subs[0].payment.id.seq, twin_beneficiary, entry.amount);
            let client_sig = self
                .registry
                .sign(
                    PartyId::Client(client),
                    &wire::submission_sign_bytes(&payment.tuple()),
                )
                .expect("client key");
            subs.push(crate::messages::SignedSubmission { payment, client_sig });
        }
        for sub in subs {
            self.trace.submissions.push(SubmissionRecord {
                t: self.now,
                id: sub.payment.id,
                beneficiary: sub.payment.beneficiary,
                amount: sub.payment.amount,
                conflicting,
            });
            self.record_event("SUBMIT", client.to_string(), Some(sub.payment.id), None);
            let env = Envelope::new(0, vec![Record::Submit { sub }]);
            self.send(Pid::Client(client), Pid::Replica(rep), env);
        }
    }

    fn twin_beneficiary(&self, original: ClientId) -> ClientId {
        self.cfg
            .system
            .clients()
            .find(|c| *c != original)
            .unwrap_or(original)
    }

    fn handle_query(&mut self, client: ClientId) {
        if let Some(rep) = self.topo.representative(client) {
            let env = Envelope::new(0, vec![Record::BalanceQuery { client }]);
            self.send(Pid::Client(client), Pid::Replica(rep), env);
        }
    }

    fn handle_deliver(&mut self, src: Pid, dst: Pid, env: Envelope) {
        // crashed endpoints neither send nor receive past their crash time
        if let Pid::Replica(r) = src {
            if self.crashed.contains_key(&r) {
                return;
            }
        }
        if let Pid::Replica(r) = dst {
            if self.crashed.contains_key(&r) {
                self.trace.dropped_to_crashed += 1;
                return;
            }
        }
        if self.cfg.trace_level == TraceLevel::Full {
            for r in &env.records {
                self.trace.records.push(TraceRecord {
                    t: self.now,
                    kind: format!("DELIVER/{}", r.kind()),
                    src: src.to_string(),
                    dst: dst.to_string(),
                    payment: r.payment_id(),
                    view: Some(env.view),
                });
            }
        }
        match dst {
            Pid::Replica(r) => match self.actors.get_mut(&r) {
                Some(Actor::Honest(_)) => self.step_node(r, NodeInput::Net { src, env }),
                Some(Actor::Byz(_)) => self.step_byz(r, src, env),
                None => {}
            },
            Pid::Client(c) => {
                for rec in env.records {
                    if let Record::BalanceReply {
                        client,
                        balance,
                        next_seq,
                    } = rec
                    {
                        if client == c {
                            self.trace.client_balances.insert(c, (balance, next_seq));
                        }
                    }
                }
            }
        }
    }

    fn handle_timer(&mut self, replica: ReplicaId, kind: TimerKind) {
        if self.crashed.contains_key(&replica) {
            return;
        }
        if matches!(self.actors.get(&replica), Some(Actor::Honest(_))) {
            self.step_node(replica, NodeInput::Timer(kind));
        }
    }

    fn step_node(&mut self, r: ReplicaId, input: NodeInput) {
        let out = match self.actors.get_mut(&r) {
            Some(Actor::Honest(node)) => node.handle(input, self.now),
            _ => return,
        };
        for obs in out.observations {
            self.absorb_observation(r, obs);
        }
        for (delay, kind) in out.timers {
            self.push(self.now + delay, Ev::Timer { replica: r, kind });
        }
        for (dst, env) in out.sends {
            self.send(Pid::Replica(r), dst, env);
        }
    }

    fn step_byz(&mut self, r: ReplicaId, src: Pid, env: Envelope) {
        let sends = match self.actors.get_mut(&r) {
            Some(Actor::Byz(b)) => b.handle(src, env),
            _ => return,
        };
        for (dst, env) in sends {
            self.send(Pid::Replica(r), dst, env);
        }
    }

    fn absorb_observation(&mut self, r: ReplicaId, obs: Observation) {
        match obs {
            Observation::Delivered { id, digest } => {
                self.trace.deliveries += 1;
                match self.delivered_payloads.get(&id) {
                    Some(d) if *d != digest => {
                        self.trace
                            .violations
                            .push(Violation::Agreement { id, replica: r });
                    }
                    None => {
                        self.delivered_payloads.insert(id, digest);
                    }
                    _ => {}
                }
            }
            Observation::Settled {
                tuple,
                conservation_ok,
            } => {
                let id = tuple.id;
                if !self.settled_at.insert((r, id)) {
                    self.trace
                        .violations
                        .push(Violation::DoubleSettle { id, replica: r });
                }
                match self.settled_tuples.get(&id) {
                    Some(t) if *t != tuple => {
                        self.trace
                            .violations
                            .push(Violation::ConflictingSettle { id, replica: r });
                    }
                    None => {
                        self.settled_tuples.insert(id, tuple);
                    }
                    _ => {}
                }
                if !conservation_ok {
                    let (lhs, rhs) = match self.actors.get(&r) {
                        Some(Actor::Honest(n)) => n.conservation(),
                        _ => (0, 0),
                    };
                    self.trace.violations.push(Violation::Conservation {
                        replica: r,
                        lhs,
                        rhs,
                    });
                }
                let fifo = self.fifo_progress.entry((r, id.spender)).or_insert(0);
                if id.seq != *fifo {
                    self.trace.violations.push(Violation::FifoOrder {
                        replica: r,
                        client: id.spender,
                        seq: id.seq,
                    });
                }
                *fifo = id.seq + 1;
                let cross = self.topo.is_cross_shard(id.spender, tuple.beneficiary);
                self.trace.settles.push(SettleRecord {
                    t: self.now,
                    replica: r,
                    tuple,
                    cross_shard: cross,
                });
                self.record_event("SETTLE", r.to_string(), Some(id), None);
            }
            Observation::SettleAborted { id } => {
                self.record_event("SETTLE_ABORT", r.to_string(), Some(id), None);
            }
            Observation::ViewInstalled { view } => {
                self.record_event("VIEW_INSTALLED", r.to_string(), None, Some(view));
            }
            Observation::Paused { view } => {
                self.record_event("PAUSED", r.to_string(), None, Some(view));
            }
            Observation::Resumed { view } => {
                self.record_event("RESUMED", r.to_string(), None, Some(view));
            }
            Observation::JoinerActive { view } => {
                self.joiner_active = Some(self.now);
                self.record_event("JOINER_ACTIVE", r.to_string(), None, Some(view));
            }
        }
    }

    fn finish(mut self) -> Trace {
        self.trace.end_time_ms = self.now;
        // final state of correct, surviving replicas (the joiner only once active)
        for (r, actor) in &self.actors {
            if self.crashed.contains_key(r) {
                continue;
            }
            if let Actor::Honest(node) = actor {
                let is_joiner = self.cfg.join.map(|j| j.joiner == *r).unwrap_or(false);
                if is_joiner && self.joiner_active.is_none() {
                    continue;
                }
                self.trace.final_replicas.insert(*r, node.snapshot_state());
            }
        }
        // a payment is stalled unless a quorum of its shard settled it
        let mut settle_counts: BTreeMap<PaymentId, usize> = BTreeMap::new();
        for s in &self.trace.settles {
            *settle_counts.entry(s.tuple.id).or_default() += 1;
        }
        let mut stalled = Vec::new();
        let mut seen = BTreeSet::new();
        for sub in &self.trace.submissions {
            if sub.conflicting || !seen.insert(sub.id) {
                continue;
            }
            let Some(shard) = self.topo.shard_index_of_client(sub.id.spender) else {
                continue;
            };
            let quorum = byzantine_quorum(self.topo.members(shard).len() as u32) as usize;
            if settle_counts.get(&sub.id).copied().unwrap_or(0) < quorum {
                stalled.push(sub.id);
            }
        }
        stalled.sort();
        stalled.dedup();
        self.trace.stalled = stalled;
        if let (Some(join), Some(started)) = (self.cfg.join, self.join_started) {
            self.trace.join = Some(JoinReport {
                joiner: join.joiner,
                started_ms: started,
                active_ms: self.joiner_active,
            });
        }
        // broadcast traffic must never cross shards
        let views = self
            .trace
            .cross_shard_msgs
            .iter()
            .map(|m| crate::shard::MsgView {
                kind: m.kind.clone(),
                src: m.src,
                dst: m.dst,
                payment: m.payment,
            })
            .collect::<Vec<_>>();
        if let Err(e) = crate::shard::count_cross_shard_steps(views, &self.topo) {
            self.trace.violations.push(Violation::BrbCrossedShards {
                kind: e.to_string(),
            });
        }
        self.trace
    }
}

// ---- scripted byzantine replica ----

struct ByzReplica {
    id: ReplicaId,
    script: ByzScript,
    variant: Variant,
    registry: KeyRegistry,
    members: Vec<ReplicaId>,
    correct_peers: Vec<ReplicaId>,
    f: u32,
    clients: Vec<ClientId>,
    handled: BTreeSet<PaymentId>,
    /// Broadcaster-side ack pools per payload version.
    pools: BTreeMap<(BrbKey, Digest32), BTreeMap<ReplicaId, Signature>>,
    payloads: BTreeMap<(BrbKey, Digest32), Payment>,
    committed: BTreeSet<BrbKey>,
    forge_counter: u64,
}

impl ByzReplica {
    fn new(
        id: ReplicaId,
        script: ByzScript,
        variant: Variant,
        system: &SystemConfig,
        topo: &ShardTopology,
        registry: KeyRegistry,
        faults: &FaultPlan,
    ) -> Self {
        let shard = topo.shard_index_of_replica(id).expect("member of a shard");
        let members = topo.members(shard).to_vec();
        let correct_peers = members
            .iter()
            .copied()
            .filter(|r| *r != id && !faults.byz_replicas.contains_key(r))
            .collect();
        ByzReplica {
            id,
            script,
            variant,
            registry,
            f: topo.fault_bound(shard),
            members,
            correct_peers,
            clients: system.clients().collect(),
            handled: BTreeSet::new(),
            pools: BTreeMap::new(),
            payloads: BTreeMap::new(),
            committed: BTreeSet::new(),
            forge_counter: 0,
        }
    }

    fn handle(&mut self, _src: Pid, env: Envelope) -> Vec<(Pid, Envelope)> {
        let mut out: Vec<(ReplicaId, Record)> = Vec::new();
        for record in env.records.clone() {
            match record {
                Record::Submit { sub } => self.on_submit(sub.payment, &mut out),
                Record::Ack { key, digest, sig } => self.on_ack(key, digest, sig, &mut out),
                Record::Prepare { body, .. } => self.on_peer_prepare(&body, _src, &mut out),
                _ => {}
            }
        }
        self.seal(out)
    }

    fn on_submit(&mut self, payment: Payment, out: &mut Vec<(ReplicaId, Record)>) {
        if !self.handled.insert(payment.id) {
            return;
        }
        match self.script {
            ByzScript::EquivocateBroadcast => {
                let mut twin = payment.clone();
                twin.beneficiary = self
                    .clients
                    .iter()
                    .copied()
                    .find(|c| *c != payment.beneficiary)
                    .unwrap_or(payment.beneficiary);
                let half = self.correct_peers.len() / 2;
                let (g1, g2) = self.correct_peers.split_at(half.max(1).min(self.correct_peers.len()));
                let (g1, g2) = (g1.to_vec(), g2.to_vec());
                self.broadcast_version(&payment, &g1, out);
                self.broadcast_version(&twin, &g2, out);
            }
            ByzScript::WithholdCommit { .. } => {
                match self.variant {
                    Variant::Sig => {
                        // full dissemination; the withholding happens at Commit
                        let peers = self.correct_peers.clone();
                        self.broadcast_version(&payment, &peers, out);
                    }
                    Variant::Echo => {
                        // payload reaches only f+1 correct replicas, plus this
                        // replica's supporting echoes to the same group
                        let group: Vec<ReplicaId> = self
                            .correct_peers
                            .iter()
                            .copied()
                            .take(self.f as usize + 1)
                            .collect();
                        self.broadcast_version(&payment, &group, out);
                    }
                }
            }
            ByzScript::ForgeCredit => {
                let peers = self.correct_peers.clone();
                self.broadcast_version(&payment, &peers, out);
                self.emit_forged_credit(out);
            }
        }
    }

    /// Sends one payload version to a target group. Under `sig` the Prepare
    /// is signed; under `echo` a supporting Echo goes to the same group.
    fn broadcast_version(
        &mut self,
        payment: &Payment,
        group: &[ReplicaId],
        out: &mut Vec<(ReplicaId, Record)>,
    ) {
        let batch = Batch {
            broadcaster: self.id,
            payments: vec![payment.clone()],
            sub_batches: vec![],
        };
        let body = PrepareBody::Batch(batch);
        let digest = wire::payment_digest(payment);
        let key = BrbKey::Payment(payment.id);
        match self.variant {
            Variant::Sig => {
                let sig = self
                    .registry
                    .sign(PartyId::Replica(self.id), &body.bytes())
                    .expect("byz replica key");
                for dst in group {
                    out.push((
                        *dst,
                        Record::Prepare {
                            origin: self.id,
                            body: body.clone(),
                            sig: Some(sig),
                        },
                    ));
                }
                // own ack joins the pool
                let own = self
                    .registry
                    .sign(
                        PartyId::Replica(self.id),
                        &wire::ack_sign_bytes(&key, &digest),
                    )
                    .expect("byz replica key");
                self.payloads.insert((key, digest), payment.clone());
                self.pools.entry((key, digest)).or_default().insert(self.id, own);
            }
            Variant::Echo => {
                for dst in group {
                    out.push((
                        *dst,
                        Record::Prepare {
                            origin: self.id,
                            body: body.clone(),
                            sig: None,
                        },
                    ));
                    out.push((
                        *dst,
                        Record::Echo {
                            id: payment.id,
                            digest,
                        },
                    ));
                }
            }
        }
    }

    fn on_ack(
        &mut self,
        key: BrbKey,
        digest: Digest32,
        sig: Signature,
        out: &mut Vec<(ReplicaId, Record)>,
    ) {
        let PartyId::Replica(signer) = sig.signer else {
            return;
        };
        if !self
            .registry
            .verify(sig.signer, &wire::ack_sign_bytes(&key, &digest), &sig)
        {
            return;
        }
        let Some(pool) = self.pools.get_mut(&(key, digest)) else {
            return;
        };
        pool.insert(signer, sig);
        let quorum = byzantine_quorum(self.members.len() as u32) as usize;
        if pool.len() < quorum || self.committed.contains(&key) {
            return;
        }
        self.committed.insert(key);
        let cert = CommitCertificate {
            key,
            digest,
            acks: pool.values().copied().collect(),
        };
        let payment = self.payloads[&(key, digest)].clone();
        let body = CommitBody::Payment(payment);
        let targets: Vec<ReplicaId> = match self.script {
            ByzScript::WithholdCommit { deliver_to } => self
                .correct_peers
                .iter()
                .copied()
                .take(deliver_to as usize)
                .collect(),
            _ => self.correct_peers.clone(),
        };
        for dst in targets {
            out.push((
                dst,
                Record::Commit {
                    body: body.clone(),
                    cert: cert.clone(),
                },
            ));
        }
    }

    /// Equivocation support as a receiver: acknowledge (or echo) every
    /// payload version seen, including conflicting ones.
    fn on_peer_prepare(&mut self, body: &PrepareBody, src: Pid, out: &mut Vec<(ReplicaId, Record)>) {
        if self.script != ByzScript::EquivocateBroadcast {
            return;
        }
        let Pid::Replica(origin) = src else { return };
        if let PrepareBody::Batch(batch) = body {
            for p in &batch.payments {
                let key = BrbKey::Payment(p.id);
                let digest = wire::payment_digest(p);
                match self.variant {
                    Variant::Sig => {
                        let sig = self
                            .registry
                            .sign(
                                PartyId::Replica(self.id),
                                &wire::ack_sign_bytes(&key, &digest),
                            )
                            .expect("byz replica key");
                        out.push((origin, Record::Ack { key, digest, sig }));
                    }
                    Variant::Echo => {
                        for dst in self.members.clone() {
                            if dst != self.id {
                                out.push((dst, Record::Echo { id: p.id, digest }));
                            }
                        }
                    }
                }
            }
        }
    }

    fn emit_forged_credit(&mut self, out: &mut Vec<(ReplicaId, Record)>) {
        self.forge_counter += 1;
        let spender = self.clients.first().copied().unwrap_or(ClientId(0));
        let beneficiary = self.clients.get(1).copied().unwrap_or(ClientId(0));
        let tuple = PaymentTuple {
            id: PaymentId::new(spender, 1_000_000 + self.forge_counter),
            beneficiary,
            amount: 7,
        };
        let bundle = CreditBundle::sign(self.id, vec![tuple], &self.registry);
        // send to every correct peer; only the beneficiary's representative
        // will consider it
        for dst in self.correct_peers.clone() {
            out.push((dst, Record::Credit { bundle: bundle.clone() }));
        }
    }

    fn seal(&self, records: Vec<(ReplicaId, Record)>) -> Vec<(Pid, Envelope)> {
        let mut grouped: BTreeMap<ReplicaId, Vec<Record>> = BTreeMap::new();
        let mut order = Vec::new();
        for (dst, r) in records {
            if !grouped.contains_key(&dst) {
                order.push(dst);
            }
            grouped.entry(dst).or_default().push(r);
        }
        let mut out = Vec::new();
        for dst in order {
            let records = grouped.remove(&dst).unwrap();
            let mut env = Envelope::new(0, records);
            let bytes = env.auth_bytes(self.id, dst);
            env.mac = self.registry.mac(self.id, dst, &bytes).ok();
            out.push((Pid::Replica(dst), env));
        }
        out
    }
}
