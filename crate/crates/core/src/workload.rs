//! Workload generation: uniform random payments and a Smallbank-style mix
//! with checking/savings account pairs and a tunable cross-shard fraction.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ClientId, ReplicaId, SystemConfig};
use crate::sim::oracle::OracleEntry;
use crate::model::{PaymentId, PaymentTuple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadEntry {
    pub at_ms: u64,
    pub spender: ClientId,
    pub beneficiary: ClientId,
    pub amount: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub entries: Vec<WorkloadEntry>,
}

impl Workload {
    /// Sequential ground-truth entries: per-client sequence numbers follow
    /// submission order; entries of double-spending clients are marked
    /// conflicting.
    pub fn oracle_entries(&self, byz_clients: &BTreeSet<ClientId>) -> Vec<OracleEntry> {
        let mut next: std::collections::BTreeMap<ClientId, u64> = Default::default();
        self.entries
            .iter()
            .map(|e| {
                let seq = next.entry(e.spender).or_insert(0);
                let tuple = PaymentTuple {
                    id: PaymentId::new(e.spender, *seq),
                    beneficiary: e.beneficiary,
                    amount: e.amount,
                };
                *seq += 1;
                OracleEntry {
                    tuple,
                    conflicting: byz_clients.contains(&e.spender),
                }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Uniformly random payments: beneficiary differs from the spender, amounts
/// in [1, max_amount], submit times Poisson at `rate_pps` aggregate.
pub fn gen_uniform(
    n_clients: u32,
    n_payments: u32,
    rate_pps: f64,
    max_amount: u64,
    seed: u64,
) -> Workload {
    assert!(n_clients >= 2, "uniform workload needs two clients");
    let mut rng = crate::sim::derive_rng(seed, "workload/uniform");
    let mut t = 0f64;
    let mut entries = Vec::with_capacity(n_payments as usize);
    for _ in 0..n_payments {
        let gap: f64 = -(1.0 - rng.random::<f64>()).ln() / rate_pps;
        t += gap * 1000.0;
        let spender = ClientId(rng.random_range(0..n_clients));
        let mut beneficiary = ClientId(rng.random_range(0..n_clients));
        while beneficiary == spender {
            beneficiary = ClientId(rng.random_range(0..n_clients));
        }
        entries.push(WorkloadEntry {
            at_ms: t as u64,
            spender,
            beneficiary,
            amount: rng.random_range(1..=max_amount.max(1)),
        });
    }
    Workload { entries }
}

/// Fixed-rate workload: each client submits every `interval_ms`, staggered,
/// until `until_ms`. Used by the robustness scenarios.
pub fn gen_fixed_rate(clients: &[ClientId], interval_ms: u64, until_ms: u64) -> Workload {
    let mut entries = Vec::new();
    for (i, c) in clients.iter().enumerate() {
        let offset = (i as u64 * interval_ms) / clients.len().max(1) as u64;
        let mut t = offset.max(1);
        while t < until_ms {
            let beneficiary = clients[(i + 1) % clients.len()];
            entries.push(WorkloadEntry {
                at_ms: t,
                spender: *c,
                beneficiary,
                amount: 1,
            });
            t += interval_ms;
        }
    }
    entries.sort_by_key(|e| e.at_ms);
    Workload { entries }
}

/// A Smallbank-style deployment: owners hold a checking and a savings
/// account, both on the same shard.
#[derive(Debug, Clone)]
pub struct SmallbankSetup {
    pub config: SystemConfig,
    pub workload: Workload,
    pub owners: u32,
}

pub fn checking_account(owner: u32) -> ClientId {
    ClientId(2 * owner)
}

pub fn savings_account(owner: u32) -> ClientId {
    ClientId(2 * owner + 1)
}

/// Transaction mix knobs. Defaults: half of the operations move funds
/// between one owner's accounts; cross-owner traffic is tuned so that 12.5%
/// of all payments cross shards (for two or more shards).
#[derive(Debug, Clone, Copy)]
pub struct SmallbankMix {
    pub same_owner: f64,
    pub cross_shard: f64,
}

impl Default for SmallbankMix {
    fn default() -> Self {
        SmallbankMix {
            same_owner: 0.5,
            cross_shard: 0.125,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn gen_smallbank(
    n_shards: u32,
    m: u32,
    f: u32,
    owners_per_shard: u32,
    n_payments: u32,
    rate_pps: f64,
    seed: u64,
    mix: SmallbankMix,
) -> SmallbankSetup {
    assert!(owners_per_shard >= 2, "needs two owners per shard");
    let owners = n_shards * owners_per_shard;
    // owner o lives on shard o % n_shards; both accounts share a
    // representative inside that shard
    let mut shards = Vec::new();
    for s in 0..n_shards {
        shards.push((s * m..(s + 1) * m).map(ReplicaId).collect::<Vec<_>>());
    }
    let mut representative_of = std::collections::BTreeMap::new();
    let mut initial_balances = std::collections::BTreeMap::new();
    for o in 0..owners {
        let shard = o % n_shards;
        let rep = ReplicaId(shard * m + (o / n_shards) % m);
        for account in [checking_account(o), savings_account(o)] {
            representative_of.insert(account, rep);
            initial_balances.insert(account, 10_000);
        }
    }
    let config = SystemConfig {
        shards,
        fault_bounds: vec![f; n_shards as usize],
        representative_of,
        initial_balances,
    };
    config.validate().expect("smallbank layout is well formed");

    let cross_shard = if n_shards >= 2 { mix.cross_shard } else { 0.0 };
    let mut rng = crate::sim::derive_rng(seed, "workload/smallbank");
    let mut t = 0f64;
    let mut entries = Vec::with_capacity(n_payments as usize);
    for _ in 0..n_payments {
        let gap: f64 = -(1.0 - rng.random::<f64>()).ln() / rate_pps;
        t += gap * 1000.0;
        let owner = rng.random_range(0..owners);
        let shard = owner % n_shards;
        let roll: f64 = rng.random();
        let (spender, beneficiary) = if roll < mix.same_owner {
            // transfer between the owner's two accounts
            if rng.random::<bool>() {
                (checking_account(owner), savings_account(owner))
            } else {
                (savings_account(owner), checking_account(owner))
            }
        } else if roll < mix.same_owner + cross_shard {
            // payment to an owner on a different shard
            let mut other = rng.random_range(0..owners);
            while other % n_shards == shard {
                other = rng.random_range(0..owners);
            }
            (checking_account(owner), checking_account(other))
        } else {
            // payment to a different owner on the same shard
            let mut other = rng.random_range(0..owners);
            while other == owner || other % n_shards != shard {
                other = rng.random_range(0..owners);
            }
            (checking_account(owner), checking_account(other))
        };
        entries.push(WorkloadEntry {
            at_ms: t as u64,
            spender,
            beneficiary,
            amount: rng.random_range(1..=20),
        });
    }
    SmallbankSetup {
        config,
        workload: Workload { entries },
        owners,
    }
}

/// Fraction of payments whose spender and beneficiary live on different
/// shards.
pub fn cross_shard_fraction(workload: &Workload, cfg: &SystemConfig) -> f64 {
    if workload.entries.is_empty() {
        return 0.0;
    }
    let topo = crate::shard::ShardTopology::from_config(cfg);
    let crossing = workload
        .entries
        .iter()
        .filter(|e| topo.is_cross_shard(e.spender, e.beneficiary))
        .count();
    crossing as f64 / workload.entries.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_workload_is_seed_deterministic_and_well_formed() {
        let a = gen_uniform(2, 4, 100.0, 50, 9);
        let b = gen_uniform(2, 4, 100.0, 50, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for e in &a.entries {
            assert_ne!(e.spender, e.beneficiary);
            assert!((1..=50).contains(&e.amount));
        }
        // per-client sequence numbers follow submission order
        let entries = a.oracle_entries(&BTreeSet::new());
        let mut seen: std::collections::BTreeMap<ClientId, u64> = Default::default();
        for e in entries {
            let n = seen.entry(e.tuple.id.spender).or_insert(0);
            assert_eq!(e.tuple.id.seq, *n);
            *n += 1;
        }
        let c = gen_uniform(2, 4, 100.0, 50, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn smallbank_single_shard_has_no_cross_traffic() {
        let setup = gen_smallbank(1, 4, 1, 4, 500, 200.0, 3, SmallbankMix::default());
        assert_eq!(cross_shard_fraction(&setup.workload, &setup.config), 0.0);
    }

    #[test]
    fn smallbank_cross_fraction_hits_one_eighth() {
        let setup = gen_smallbank(4, 4, 1, 4, 10_000, 500.0, 3, SmallbankMix::default());
        let frac = cross_shard_fraction(&setup.workload, &setup.config);
        assert!(
            (0.115..=0.135).contains(&frac),
            "cross-shard fraction {}",
            frac
        );
    }

    #[test]
    fn smallbank_accounts_share_a_shard() {
        let setup = gen_smallbank(3, 4, 1, 3, 100, 100.0, 5, SmallbankMix::default());
        for o in 0..setup.owners {
            let a = setup.config.shard_index_of_client(checking_account(o));
            let b = setup.config.shard_index_of_client(savings_account(o));
            assert_eq!(a, b);
            assert!(a.is_some());
        }
    }
}
