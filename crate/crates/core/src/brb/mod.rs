//! Byzantine reliable broadcast layers. Two interchangeable implementations:
//! [`echo::EchoBrb`] (Prepare/Echo/Ready over MAC-authenticated links, with
//! totality) and [`sig::SigBrb`] (Prepare/Ack/Commit with quorum
//! certificates, linear message count, no totality).
//!
//! Both deliver per-source FIFO: payment (s, n) is delivered only after
//! (s, n-1).

pub mod echo;
pub mod sig;

use serde::{Deserialize, Serialize};

use crate::crypto::Digest32;
use crate::messages::{CommitCertificate, Record};
use crate::model::{Payment, PaymentId, ReplicaId};
use crate::reconfig::ViewRecord;

/// Instance key of one broadcast: a payment id, or a membership record for a
/// view id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BrbKey {
    Payment(PaymentId),
    Install(u64),
}

/// A record queued for one destination replica.
#[derive(Debug, Clone)]
pub struct Outbound {
    pub dst: ReplicaId,
    pub record: Record,
}

/// What one handler activation produced: messages to send and payloads whose
/// delivery callback fired.
#[derive(Debug, Clone, Default)]
pub struct BrbStep {
    pub outbound: Vec<Outbound>,
    pub delivered: Vec<Delivery>,
}

impl BrbStep {
    pub fn merge(&mut self, other: BrbStep) {
        self.outbound.extend(other.outbound);
        self.delivered.extend(other.delivered);
    }
}

#[derive(Debug, Clone)]
pub enum Delivery {
    Payment(Payment),
    Install(ViewRecord, CommitCertificate),
}

/// Stored proof of misbehavior. Retained for audit, surfaced in metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Evidence {
    ConflictingPrepare {
        id: PaymentId,
        first: Digest32,
        second: Digest32,
    },
    ConflictingSubmission {
        id: PaymentId,
    },
    BadCertificate {
        key: BrbKey,
    },
    BadCredit {
        signer: ReplicaId,
    },
}
