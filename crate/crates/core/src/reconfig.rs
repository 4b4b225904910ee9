//! Membership change, join-only and one at a time: a joining replica
//! announces itself, the members broadcast an installation record through the
//! signature broadcast machinery, payments pause around installation, and the
//! joiner adopts the state vouched by a quorum of old members.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::Digest32;
use crate::engine::Variant;
use crate::messages::CommitCertificate;
use crate::model::{AccountState, ClientId, Payment, ReplicaId, XLog};
use crate::wire;

/// Numbered membership set. Installed views form a sequence; for join-only
/// reconfiguration each view's members contain the previous view's.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct View {
    pub id: u64,
    pub members: Vec<ReplicaId>,
    /// Quorum of signed installation acknowledgments from the prior view.
    pub installed_proof: Option<CommitCertificate>,
}

impl View {
    pub fn initial(mut members: Vec<ReplicaId>) -> Self {
        members.sort();
        View {
            id: 0,
            members,
            installed_proof: None,
        }
    }
}

/// The record broadcast to install a new view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub id: u64,
    pub members: Vec<ReplicaId>,
}

impl ViewRecord {
    pub fn successor(prev: &View, joiner: ReplicaId) -> Self {
        let mut members = prev.members.clone();
        if !members.contains(&joiner) {
            members.push(joiner);
        }
        members.sort();
        ViewRecord {
            id: prev.id + 1,
            members,
        }
    }
}

/// Full state one old-view member offers the joiner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub view: u64,
    pub from: ReplicaId,
    pub xlogs: BTreeMap<ClientId, Vec<Payment>>,
    /// Delivered but not yet settled payments.
    pub pending: BTreeMap<ClientId, Vec<Payment>>,
}

/// State the joiner adopts after merging a quorum of snapshots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedState {
    pub accounts: BTreeMap<ClientId, AccountState>,
    pub xlogs: BTreeMap<ClientId, XLog>,
    pub pending: Vec<Payment>,
}

/// Per client, adopts the longest log prefix vouched identically by at least
/// f+1 responders, then recomputes balances and sequence registers from the
/// adopted logs rather than copying them.
pub fn merge_snapshots(
    snapshots: &[StateSnapshot],
    f_old: u32,
    initial_balances: &BTreeMap<ClientId, u64>,
    variant: Variant,
) -> MergedState {
    let vouch = f_old as usize + 1;
    let mut clients: Vec<ClientId> = initial_balances.keys().copied().collect();
    for s in snapshots {
        for c in s.xlogs.keys().chain(s.pending.keys()) {
            if !clients.contains(c) {
                clients.push(*c);
            }
        }
    }
    clients.sort();

    let mut xlogs: BTreeMap<ClientId, XLog> = BTreeMap::new();
    for c in &clients {
        let mut adopted: Vec<Payment> = Vec::new();
        loop {
            let pos = adopted.len();
            // candidate entries at this position from snapshots whose log
            // agrees with the adopted prefix
            let mut counts: BTreeMap<Digest32, (Payment, usize)> = BTreeMap::new();
            for s in snapshots {
                let Some(log) = s.xlogs.get(c) else { continue };
                if log.len() <= pos {
                    continue;
                }
                if !prefix_matches(log, &adopted) {
                    continue;
                }
                let cand = &log[pos];
                let d = wire::payment_digest(cand);
                let e = counts.entry(d).or_insert_with(|| (cand.clone(), 0));
                e.1 += 1;
            }
            let winner = counts.into_values().find(|(_, n)| *n >= vouch);
            match winner {
                Some((p, _)) => adopted.push(p),
                None => break,
            }
        }
        let log = XLog::from_entries(*c, adopted).expect("vouched prefix is contiguous");
        xlogs.insert(*c, log);
    }

    let mut accounts = recompute_accounts(&xlogs, initial_balances, variant);
    for c in &clients {
        accounts.entry(*c).or_default();
    }

    // pending payments vouched by f+1 identical copies, beyond the adopted log
    let mut pending = Vec::new();
    let mut tally: BTreeMap<Digest32, (Payment, usize)> = BTreeMap::new();
    for s in snapshots {
        for plist in s.pending.values() {
            for p in plist {
                let d = wire::payment_digest(p);
                let e = tally.entry(d).or_insert_with(|| (p.clone(), 0));
                e.1 += 1;
            }
        }
    }
    for (p, n) in tally.into_values() {
        let settled_up_to = xlogs.get(&p.id.spender).map(|l| l.len()).unwrap_or(0);
        if n >= vouch && p.id.seq >= settled_up_to {
            pending.push(p);
        }
    }
    pending.sort_by_key(|p| p.id);

    MergedState {
        accounts,
        xlogs,
        pending,
    }
}

fn prefix_matches(log: &[Payment], adopted: &[Payment]) -> bool {
    log.len() >= adopted.len() && log[..adopted.len()] == adopted[..]
}

/// Balance and sequence reconstruction from settled logs. Under the echo
/// variant incoming payments deposit directly; under the signature variant a
/// client's funds grow only through dependency certificates recorded in its
/// own log.
pub fn recompute_accounts(
    xlogs: &BTreeMap<ClientId, XLog>,
    initial_balances: &BTreeMap<ClientId, u64>,
    variant: Variant,
) -> BTreeMap<ClientId, AccountState> {
    let mut accounts: BTreeMap<ClientId, AccountState> = BTreeMap::new();
    for (c, opening) in initial_balances {
        accounts.insert(*c, AccountState::with_balance(*opening));
    }
    for (c, log) in xlogs {
        let acct = accounts.entry(*c).or_default();
        acct.next_seq = log.len();
        let mut bal = acct.balance as i128;
        for p in log.entries() {
            if variant == Variant::Sig {
                for dep in &p.deps {
                    if acct.used_deps.insert(dep.tuple.id) {
                        bal += dep.tuple.amount as i128;
                    }
                }
            }
            bal -= p.amount as i128;
        }
        debug_assert!(bal >= 0, "settled history cannot overdraw");
        acct.balance = bal.max(0) as u64;
    }
    if variant == Variant::Echo {
        let mut incoming: BTreeMap<ClientId, u64> = BTreeMap::new();
        for log in xlogs.values() {
            for p in log.entries() {
                *incoming.entry(p.beneficiary).or_default() += p.amount;
            }
        }
        for (c, amount) in incoming {
            accounts.entry(c).or_default().balance += amount;
        }
    }
    accounts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PaymentId;

    fn snap(from: u32, logs: Vec<(u32, Vec<Payment>)>) -> StateSnapshot {
        StateSnapshot {
            view: 1,
            from: ReplicaId(from),
            xlogs: logs.into_iter().map(|(c, l)| (ClientId(c), l)).collect(),
            pending: BTreeMap::new(),
        }
    }

    fn pays(c: u32, n: u64) -> Vec<Payment> {
        (0..n).map(|s| Payment::new(ClientId(c), s, ClientId(9), 1)).collect()
    }

    fn balances() -> BTreeMap<ClientId, u64> {
        [(ClientId(0), 100), (ClientId(9), 0)].into_iter().collect()
    }

    #[test]
    fn identical_responders_adopt_verbatim() {
        let log = pays(0, 3);
        let snaps: Vec<StateSnapshot> =
            (1..=3).map(|r| snap(r, vec![(0, log.clone())])).collect();
        let merged = merge_snapshots(&snaps, 1, &balances(), Variant::Echo);
        assert_eq!(merged.xlogs[&ClientId(0)].entries(), log.as_slice());
        assert_eq!(merged.accounts[&ClientId(0)].balance, 97);
        assert_eq!(merged.accounts[&ClientId(0)].next_seq, 3);
        assert_eq!(merged.accounts[&ClientId(9)].balance, 3);
    }

    #[test]
    fn forged_extra_entry_lacks_vouchers_and_is_excluded() {
        let honest = pays(0, 2);
        let mut forged = honest.clone();
        forged.push(Payment::new(ClientId(0), 2, ClientId(9), 50));
        let snaps = vec![
            snap(1, vec![(0, honest.clone())]),
            snap(2, vec![(0, honest.clone())]),
            snap(3, vec![(0, forged)]),
        ];
        let merged = merge_snapshots(&snaps, 1, &balances(), Variant::Echo);
        assert_eq!(merged.xlogs[&ClientId(0)].len(), 2);
    }

    #[test]
    fn lagging_responders_vouch_a_shorter_prefix() {
        let snaps = vec![
            snap(1, vec![(0, pays(0, 5))]),
            snap(2, vec![(0, pays(0, 3))]),
            snap(3, vec![(0, pays(0, 2))]),
        ];
        // prefix of length 3 is vouched by responders 1 and 2 (f+1 = 2)
        let merged = merge_snapshots(&snaps, 1, &balances(), Variant::Echo);
        assert_eq!(merged.xlogs[&ClientId(0)].len(), 3);
    }

    #[test]
    fn vouched_pending_payments_are_adopted() {
        let mut s1 = snap(1, vec![(0, pays(0, 1))]);
        let mut s2 = snap(2, vec![(0, pays(0, 1))]);
        let s3 = snap(3, vec![(0, pays(0, 1))]);
        let waiting = Payment::new(ClientId(0), 1, ClientId(9), 7);
        s1.pending.insert(ClientId(0), vec![waiting.clone()]);
        s2.pending.insert(ClientId(0), vec![waiting.clone()]);
        let merged = merge_snapshots(&[s1, s2, s3], 1, &balances(), Variant::Echo);
        assert_eq!(merged.pending, vec![waiting]);
    }
}
