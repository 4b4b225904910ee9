//! Run artifacts: the event trace, per-kind message counters, safety
//! violations and final per-replica state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{ClientId, PaymentId, PaymentTuple, ReplicaId};
use crate::node::ReplicaSnapshot;

/// How much the trace records. `Full` keeps every send and delivery; large
/// robustness runs use `Settles` to keep memory bounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TraceLevel {
    #[default]
    Full,
    Settles,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub kind: String,
    pub src: String,
    pub dst: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payment: Option<PaymentId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub t: u64,
    pub id: PaymentId,
    pub beneficiary: ClientId,
    pub amount: u64,
    /// Part of a double-spend pair: at most one version may ever settle.
    pub conflicting: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettleRecord {
    pub t: u64,
    pub replica: ReplicaId,
    pub tuple: PaymentTuple,
    pub cross_shard: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    Agreement {
        id: PaymentId,
        replica: ReplicaId,
    },
    ConflictingSettle {
        id: PaymentId,
        replica: ReplicaId,
    },
    DoubleSettle {
        id: PaymentId,
        replica: ReplicaId,
    },
    Conservation {
        replica: ReplicaId,
        lhs: u64,
        rhs: u64,
    },
    FifoOrder {
        replica: ReplicaId,
        client: ClientId,
        seq: u64,
    },
    BrbCrossedShards {
        kind: String,
    },
}

/// One replica-to-replica message that crossed a shard boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossShardMsg {
    pub kind: String,
    pub src: ReplicaId,
    pub dst: ReplicaId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payment: Option<PaymentId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinReport {
    pub joiner: ReplicaId,
    pub started_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_ms: Option<u64>,
}

/// Everything one deterministic run produced. A pure function of the run
/// configuration and seed: equal seeds give byte-identical traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub seed: u64,
    pub variant: String,
    pub level: TraceLevel,
    pub end_time_ms: u64,
    pub drained: bool,
    pub records: Vec<TraceRecord>,
    /// Network messages by kind; self-deliveries are local and not counted.
    pub msg_counts: BTreeMap<String, u64>,
    pub envelopes: u64,
    pub submissions: Vec<SubmissionRecord>,
    pub settles: Vec<SettleRecord>,
    pub deliveries: u64,
    pub violations: Vec<Violation>,
    pub stalled: Vec<PaymentId>,
    pub cross_shard_msgs: Vec<CrossShardMsg>,
    pub final_replicas: BTreeMap<ReplicaId, ReplicaSnapshot>,
    pub client_balances: BTreeMap<ClientId, (u64, u64)>,
    pub join: Option<JoinReport>,
    pub dropped_to_crashed: u64,
}

impl Trace {
    /// Sum of broadcast-layer message counts.
    pub fn brb_message_total(&self) -> u64 {
        ["PREPARE", "ECHO", "READY", "PULL", "PAYLOAD", "ACK", "COMMIT"]
            .iter()
            .filter_map(|k| self.msg_counts.get(*k))
            .sum()
    }

    pub fn count(&self, kind: &str) -> u64 {
        self.msg_counts.get(kind).copied().unwrap_or(0)
    }

    /// Unique settled payments (settled at one or more replicas).
    pub fn settled_unique(&self) -> u64 {
        let mut ids: Vec<PaymentId> = self.settles.iter().map(|s| s.tuple.id).collect();
        ids.sort();
        ids.dedup();
        ids.len() as u64
    }

    /// Settle timestamps of one payment across replicas, ascending.
    pub fn settle_times(&self, id: PaymentId) -> Vec<u64> {
        let mut ts: Vec<u64> = self
            .settles
            .iter()
            .filter(|s| s.tuple.id == id)
            .map(|s| s.t)
            .collect();
        ts.sort_unstable();
        ts
    }

    /// Line-delimited JSON export of the event records.
    pub fn export_records(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    /// Canonical byte image of the whole trace, for determinism checks.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("trace serializes")
    }
}
