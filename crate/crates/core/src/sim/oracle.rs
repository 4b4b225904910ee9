//! Sequential ground truth: replays a workload in submission order, retrying
//! blocked payments until a fixpoint. Independent of every protocol path it
//! is used to check.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::Variant;
use crate::model::{ClientId, PaymentId, PaymentTuple};
use crate::node::ReplicaSnapshot;
use crate::shard::ShardTopology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub tuple: PaymentTuple,
    /// Member of a double-spend pair: the oracle refuses to choose a winner
    /// and the equivalence check accepts either-or-neither.
    pub conflicting: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLedger {
    pub balances: BTreeMap<ClientId, u64>,
    pub next_seq: BTreeMap<ClientId, u64>,
    pub xlogs: BTreeMap<ClientId, Vec<PaymentTuple>>,
    /// Entries that never became applicable (seq hole or unfunded forever).
    pub unsettled: Vec<PaymentTuple>,
    pub conflicting: BTreeSet<PaymentId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RetryOrder {
    Forward,
    Reverse,
}

/// Applies the workload to the opening balances: passes over the pending
/// list settling every payment whose sequence number is next for its spender
/// and whose spender can afford it, until no pass makes progress.
pub fn oracle_apply(
    entries: &[OracleEntry],
    initial: &BTreeMap<ClientId, u64>,
) -> OracleLedger {
    apply_with_order(entries, initial, RetryOrder::Forward)
}

/// Same fixpoint computed with the opposite retry order; funded settles
/// commute, so the result must match `oracle_apply` exactly.
pub fn oracle_apply_reverse_retry(
    entries: &[OracleEntry],
    initial: &BTreeMap<ClientId, u64>,
) -> OracleLedger {
    apply_with_order(entries, initial, RetryOrder::Reverse)
}

fn apply_with_order(
    entries: &[OracleEntry],
    initial: &BTreeMap<ClientId, u64>,
    order: RetryOrder,
) -> OracleLedger {
    let mut balances = initial.clone();
    let mut next_seq: BTreeMap<ClientId, u64> =
        initial.keys().map(|c| (*c, 0)).collect();
    let mut xlogs: BTreeMap<ClientId, Vec<PaymentTuple>> =
        initial.keys().map(|c| (*c, Vec::new())).collect();
    let mut conflicting = BTreeSet::new();
    let mut pending: Vec<PaymentTuple> = Vec::new();
    for e in entries {
        if e.conflicting {
            conflicting.insert(e.tuple.id);
        } else {
            pending.push(e.tuple);
        }
    }
    loop {
        let mut progressed = false;
        let idxs: Vec<usize> = match order {
            RetryOrder::Forward => (0..pending.len()).collect(),
            RetryOrder::Reverse => (0..pending.len()).rev().collect(),
        };
        let mut settled_now: Vec<usize> = Vec::new();
        for i in idxs {
            let t = pending[i];
            let c = t.id.spender;
            let seq_ok = next_seq.get(&c).copied().unwrap_or(0) == t.id.seq;
            let funded = balances.get(&c).copied().unwrap_or(0) >= t.amount;
            if seq_ok && funded {
                *balances.entry(c).or_default() -= t.amount;
                *balances.entry(t.beneficiary).or_default() += t.amount;
                *next_seq.entry(c).or_default() += 1;
                xlogs.entry(c).or_default().push(t);
                settled_now.push(i);
                progressed = true;
            }
        }
        settled_now.sort_unstable();
        for i in settled_now.into_iter().rev() {
            pending.remove(i);
        }
        if !progressed {
            break;
        }
    }
    // logs settle in seq order regardless of retry order
    for log in xlogs.values_mut() {
        log.sort_by_key(|t| t.id.seq);
    }
    OracleLedger {
        balances,
        next_seq,
        xlogs,
        unsettled: pending,
        conflicting,
    }
}

/// Compares every correct replica's final state against the oracle fixpoint.
///
/// Balances under the signature variant are effective balances: the settled
/// balance plus certificate amounts formed at the client's representative but
/// not yet attached to an outgoing payment.
pub fn check_equivalence(
    snapshots: &BTreeMap<crate::model::ReplicaId, ReplicaSnapshot>,
    oracle: &OracleLedger,
    variant: Variant,
    topo: &ShardTopology,
) -> Vec<String> {
    let mut mismatches = Vec::new();
    for (r, snap) in snapshots {
        for (c, oracle_seq) in &oracle.next_seq {
            if topo.shard_index_of_client(*c) != topo.shard_index_of_replica(*r) {
                continue;
            }
            let got = snap.next_seqs.get(c).copied().unwrap_or(0);
            if got != *oracle_seq {
                mismatches.push(format!(
                    "{}: next_seq[{}] = {} want {}",
                    r, c, got, oracle_seq
                ));
            }
            let log = snap.xlogs.get(c).cloned().unwrap_or_default();
            let want = oracle.xlogs.get(c).cloned().unwrap_or_default();
            if log != want {
                mismatches.push(format!("{}: xlog[{}] differs", r, c));
            }
        }
    }
    for (c, want) in &oracle.balances {
        let Some(shard) = topo.shard_index_of_client(*c) else {
            continue;
        };
        let mut settled: Option<u64> = None;
        for (r, snap) in snapshots {
            if topo.shard_index_of_replica(*r) != Some(shard) {
                continue;
            }
            let b = snap.balances.get(c).copied().unwrap_or(0);
            match settled {
                None => settled = Some(b),
                Some(prev) if prev != b => {
                    mismatches.push(format!("{}: balance[{}] diverges across shard", r, c));
                }
                _ => {}
            }
        }
        let Some(settled) = settled else { continue };
        let effective = match variant {
            Variant::Echo => settled,
            Variant::Sig => {
                let rep = topo.representative(*c);
                let pending_at_rep = rep
                    .and_then(|r| snapshots.get(&r))
                    .and_then(|s| s.pending_certificates.get(c))
                    .map(|v| v.iter().map(|t| t.amount).sum::<u64>())
                    .unwrap_or(0);
                settled + pending_at_rep
            }
        };
        if effective != *want {
            mismatches.push(format!("balance[{}] = {} want {}", c, effective, want));
        }
    }
    mismatches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PaymentId;

    fn tuple(spender: u32, seq: u64, to: u32, amount: u64) -> PaymentTuple {
        PaymentTuple {
            id: PaymentId::new(ClientId(spender), seq),
            beneficiary: ClientId(to),
            amount,
        }
    }

    fn entry(t: PaymentTuple) -> OracleEntry {
        OracleEntry {
            tuple: t,
            conflicting: false,
        }
    }

    fn balances(pairs: &[(u32, u64)]) -> BTreeMap<ClientId, u64> {
        pairs.iter().map(|(c, b)| (ClientId(*c), *b)).collect()
    }

    #[test]
    fn single_funded_payment_settles() {
        let led = oracle_apply(
            &[entry(tuple(0, 0, 1, 10))],
            &balances(&[(0, 10), (1, 0)]),
        );
        assert_eq!(led.balances[&ClientId(0)], 0);
        assert_eq!(led.balances[&ClientId(1)], 10);
        assert!(led.unsettled.is_empty());
    }

    #[test]
    fn mutual_funding_reaches_fixpoint() {
        // A pays B 10 with 0 on hand; B pays A 10 holding 10: both settle.
        let entries = [
            entry(tuple(0, 0, 1, 10)),
            entry(tuple(1, 0, 0, 10)),
        ];
        let led = oracle_apply(&entries, &balances(&[(0, 0), (1, 10)]));
        assert!(led.unsettled.is_empty());
        assert_eq!(led.balances[&ClientId(0)], 10);
        assert_eq!(led.balances[&ClientId(1)], 0);
    }

    #[test]
    fn retry_order_does_not_change_the_fixpoint() {
        let entries = [
            entry(tuple(0, 0, 1, 30)),
            entry(tuple(1, 0, 2, 25)),
            entry(tuple(2, 0, 0, 40)),
            entry(tuple(0, 1, 2, 35)),
            entry(tuple(1, 1, 0, 5)),
        ];
        let initial = balances(&[(0, 30), (1, 0), (2, 5)]);
        let a = oracle_apply(&entries, &initial);
        let b = oracle_apply_reverse_retry(&entries, &initial);
        assert_eq!(a, b);
    }

    #[test]
    fn unfunded_forever_stays_unsettled_and_blocks_successors() {
        let entries = [
            entry(tuple(0, 0, 1, 100)), // never fundable
            entry(tuple(0, 1, 1, 1)),   // stuck behind seq 0
        ];
        let led = oracle_apply(&entries, &balances(&[(0, 10), (1, 0)]));
        assert_eq!(led.unsettled.len(), 2);
        assert_eq!(led.next_seq[&ClientId(0)], 0);
    }

    #[test]
    fn conflicting_pair_is_marked_not_settled() {
        let a = tuple(0, 0, 1, 10);
        let mut b = a;
        b.beneficiary = ClientId(2);
        let led = oracle_apply(
            &[
                OracleEntry {
                    tuple: a,
                    conflicting: true,
                },
                OracleEntry {
                    tuple: b,
                    conflicting: true,
                },
            ],
            &balances(&[(0, 10), (1, 0), (2, 0)]),
        );
        assert!(led.conflicting.contains(&a.id));
        assert_eq!(led.next_seq[&ClientId(0)], 0);
    }
}
