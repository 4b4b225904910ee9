//! Metric computation over completed traces and CSV/JSON emission.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{byzantine_quorum, PaymentId, ReplicaId, SystemConfig};
use crate::shard::ShardTopology;
use crate::sim::trace::Trace;

/// Nearest-rank percentiles over settle latencies, in simulated ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LatencyStats {
    pub n: u64,
    pub avg_ms: f64,
    pub min_ms: u64,
    pub p95_ms: u64,
    pub p99_ms: u64,
    pub max_ms: u64,
}

impl LatencyStats {
    fn from_samples(mut samples: Vec<u64>) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        samples.sort_unstable();
        let n = samples.len();
        let sum: u128 = samples.iter().map(|v| *v as u128).sum();
        LatencyStats {
            n: n as u64,
            avg_ms: sum as f64 / n as f64,
            min_ms: samples[0],
            p95_ms: nearest_rank(&samples, 0.95),
            p99_ms: nearest_rank(&samples, 0.99),
            max_ms: samples[n - 1],
        }
    }
}

fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub end_time_ms: u64,
    pub drained: bool,
    pub submitted: u64,
    pub conflicting_submissions: u64,
    /// Payments settled by a quorum of their shard.
    pub settled: u64,
    pub stalled: u64,
    pub settles_per_sim_second: f64,
    pub per_shard_settles_per_sim_second: Vec<f64>,
    /// Submission to settle at the spender's representative.
    pub latency_to_representative: LatencyStats,
    /// Submission to settle at 2f+1 replicas of the spender's shard.
    pub latency_to_quorum: LatencyStats,
    pub message_counts: BTreeMap<String, u64>,
    pub envelopes: u64,
    pub brb_messages: u64,
    pub per_replica_settles: BTreeMap<ReplicaId, u64>,
    pub max_queue_depth: usize,
    pub violations: u64,
    pub cross_shard_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub join_latency_ms: Option<u64>,
}

/// Time at which a payment reached settles at a quorum of its shard, if it
/// did.
pub fn quorum_settle_times(trace: &Trace, topo: &ShardTopology) -> BTreeMap<PaymentId, u64> {
    let mut per_payment: BTreeMap<PaymentId, Vec<u64>> = BTreeMap::new();
    for s in &trace.settles {
        per_payment.entry(s.tuple.id).or_default().push(s.t);
    }
    let mut out = BTreeMap::new();
    for (id, mut ts) in per_payment {
        let Some(shard) = topo.shard_index_of_client(id.spender) else {
            continue;
        };
        let q = byzantine_quorum(topo.members(shard).len() as u32) as usize;
        if ts.len() >= q {
            ts.sort_unstable();
            out.insert(id, ts[q - 1]);
        }
    }
    out
}

/// Quorum settles per one-second bucket of simulated time.
pub fn settle_timeline(trace: &Trace, topo: &ShardTopology) -> BTreeMap<u64, u64> {
    let mut buckets = BTreeMap::new();
    for t in quorum_settle_times(trace, topo).values() {
        *buckets.entry(t / 1000).or_default() += 1;
    }
    buckets
}

/// Quorum settles with settle time in [from_ms, to_ms).
pub fn settles_in_window(trace: &Trace, topo: &ShardTopology, from_ms: u64, to_ms: u64) -> u64 {
    quorum_settle_times(trace, topo)
        .values()
        .filter(|t| (from_ms..to_ms).contains(*t))
        .count() as u64
}

/// Longest gap between consecutive quorum settles inside a window, in ms.
pub fn longest_stall(trace: &Trace, topo: &ShardTopology, from_ms: u64, to_ms: u64) -> u64 {
    let mut ts: Vec<u64> = quorum_settle_times(trace, topo)
        .values()
        .copied()
        .filter(|t| (from_ms..to_ms).contains(t))
        .collect();
    ts.sort_unstable();
    if ts.is_empty() {
        return to_ms - from_ms;
    }
    let mut longest = ts[0].saturating_sub(from_ms);
    for w in ts.windows(2) {
        longest = longest.max(w[1] - w[0]);
    }
    longest.max(to_ms.saturating_sub(*ts.last().unwrap()))
}

pub fn report(trace: &Trace, system: &SystemConfig) -> MetricsReport {
    let topo = ShardTopology::from_config(system);
    let quorum_times = quorum_settle_times(trace, &topo);

    let mut submit_time: BTreeMap<PaymentId, u64> = BTreeMap::new();
    let mut conflicting = 0u64;
    for s in &trace.submissions {
        if s.conflicting {
            conflicting += 1;
        }
        submit_time.entry(s.id).or_insert(s.t);
    }

    let mut rep_latencies = Vec::new();
    let mut quorum_latencies = Vec::new();
    for (id, t0) in &submit_time {
        if let Some(rep) = topo.representative(id.spender) {
            if let Some(s) = trace
                .settles
                .iter()
                .find(|s| s.tuple.id == *id && s.replica == rep)
            {
                rep_latencies.push(s.t.saturating_sub(*t0));
            }
        }
        if let Some(tq) = quorum_times.get(id) {
            quorum_latencies.push(tq.saturating_sub(*t0));
        }
    }

    let sim_seconds = trace.end_time_ms as f64 / 1000.0;
    let settled = quorum_times.len() as u64;
    let mut per_shard = vec![0u64; topo.shard_count()];
    for id in quorum_times.keys() {
        if let Some(s) = topo.shard_index_of_client(id.spender) {
            per_shard[s] += 1;
        }
    }
    let per_shard_rates = per_shard
        .iter()
        .map(|n| {
            if sim_seconds > 0.0 {
                *n as f64 / sim_seconds
            } else {
                0.0
            }
        })
        .collect();

    let mut per_replica_settles: BTreeMap<ReplicaId, u64> = BTreeMap::new();
    for s in &trace.settles {
        *per_replica_settles.entry(s.replica).or_default() += 1;
    }

    let cross = trace
        .settles
        .iter()
        .filter(|s| s.cross_shard)
        .map(|s| s.tuple.id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let unique = trace.settled_unique();
    let cross_fraction = if unique > 0 {
        cross as f64 / unique as f64
    } else {
        0.0
    };

    MetricsReport {
        variant: trace.variant.clone(),
        seed: trace.seed,
        end_time_ms: trace.end_time_ms,
        drained: trace.drained,
        submitted: submit_time.len() as u64,
        conflicting_submissions: conflicting,
        settled,
        stalled: trace.stalled.len() as u64,
        settles_per_sim_second: if sim_seconds > 0.0 {
            settled as f64 / sim_seconds
        } else {
            0.0
        },
        per_shard_settles_per_sim_second: per_shard_rates,
        latency_to_representative: LatencyStats::from_samples(rep_latencies),
        latency_to_quorum: LatencyStats::from_samples(quorum_latencies),
        message_counts: trace.msg_counts.clone(),
        envelopes: trace.envelopes,
        brb_messages: trace.brb_message_total(),
        per_replica_settles,
        max_queue_depth: trace
            .final_replicas
            .values()
            .map(|s| s.max_queue_depth)
            .max()
            .unwrap_or(0),
        violations: trace.violations.len() as u64,
        cross_shard_fraction: cross_fraction,
        join_latency_ms: trace.join.and_then(|j| j.active_ms.map(|a| a - j.started_ms)),
    }
}

/// Writes report.json, trace.jsonl, timeline.csv, messages.csv, replicas.csv
/// and final_state.json (plus violations.json when any safety check failed).
pub fn write_outputs(
    trace: &Trace,
    rep: &MetricsReport,
    system: &SystemConfig,
    dir: &Path,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let topo = ShardTopology::from_config(system);

    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(rep).expect("report serializes"),
    )?;
    std::fs::write(dir.join("trace.jsonl"), trace.export_records())?;
    std::fs::write(
        dir.join("final_state.json"),
        serde_json::to_string_pretty(&trace.final_replicas).expect("state serializes"),
    )?;

    let mut timeline = std::fs::File::create(dir.join("timeline.csv"))?;
    writeln!(timeline, "sim_second,settles_total")?;
    for (sec, n) in settle_timeline(trace, &topo) {
        writeln!(timeline, "{},{}", sec, n)?;
    }

    let mut messages = std::fs::File::create(dir.join("messages.csv"))?;
    writeln!(messages, "kind,count")?;
    for (kind, n) in &trace.msg_counts {
        writeln!(messages, "{},{}", kind, n)?;
    }

    let mut replicas = std::fs::File::create(dir.join("replicas.csv"))?;
    writeln!(replicas, "replica,settles")?;
    for (r, n) in &rep.per_replica_settles {
        writeln!(replicas, "{},{}", r.0, n)?;
    }

    if !trace.violations.is_empty() {
        std::fs::write(
            dir.join("violations.json"),
            serde_json::to_string_pretty(&trace.violations).expect("violations serialize"),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClientId;
    use crate::sim::trace::{SettleRecord, SubmissionRecord, TraceLevel};

    fn empty_trace() -> Trace {
        Trace {
            seed: 0,
            variant: "echo".into(),
            level: TraceLevel::Full,
            end_time_ms: 0,
            drained: true,
            records: vec![],
            msg_counts: BTreeMap::new(),
            envelopes: 0,
            submissions: vec![],
            settles: vec![],
            deliveries: 0,
            violations: vec![],
            stalled: vec![],
            cross_shard_msgs: vec![],
            final_replicas: BTreeMap::new(),
            client_balances: BTreeMap::new(),
            join: None,
            dropped_to_crashed: 0,
        }
    }

    #[test]
    fn empty_trace_yields_zero_filled_report() {
        let cfg = SystemConfig::single_shard(4, 1, 4, 100).unwrap();
        let rep = report(&empty_trace(), &cfg);
        assert_eq!(rep.settled, 0);
        assert_eq!(rep.settles_per_sim_second, 0.0);
        assert_eq!(rep.latency_to_quorum.n, 0);
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn latency_percentiles_are_ordered() {
        let cfg = SystemConfig::single_shard(4, 1, 4, 100).unwrap();
        let mut trace = empty_trace();
        trace.end_time_ms = 10_000;
        // ten payments of client 0, settled at all four replicas
        for k in 0..10u64 {
            let id = PaymentId::new(ClientId(0), k);
            trace.submissions.push(SubmissionRecord {
                t: k * 100,
                id,
                beneficiary: ClientId(1),
                amount: 1,
                conflicting: false,
            });
            for r in 0..4u32 {
                trace.settles.push(SettleRecord {
                    t: k * 100 + 20 + (k % 3) * 15 + r as u64,
                    replica: ReplicaId(r),
                    tuple: crate::model::PaymentTuple {
                        id,
                        beneficiary: ClientId(1),
                        amount: 1,
                    },
                    cross_shard: false,
                });
            }
        }
        let rep = report(&trace, &cfg);
        assert_eq!(rep.settled, 10);
        let l = rep.latency_to_quorum;
        assert!(l.min_ms as f64 <= l.avg_ms);
        assert!(l.avg_ms <= l.p95_ms as f64);
        assert!(l.p95_ms <= l.p99_ms && l.p99_ms <= l.max_ms);
    }

    #[test]
    fn nearest_rank_matches_definition() {
        let v = vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100];
        assert_eq!(nearest_rank(&v, 0.95), 100);
        assert_eq!(nearest_rank(&v, 0.90), 90);
        assert_eq!(nearest_rank(&v, 0.50), 50);
        assert_eq!(nearest_rank(&v, 0.01), 10);
    }
}
