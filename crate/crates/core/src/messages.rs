//! Wire records exchanged between participants, and the envelope that bundles
//! records heading to the same destination in one activation.

use serde::{Deserialize, Serialize};

use crate::brb::BrbKey;
use crate::crypto::{Digest32, MacTag, Signature};
use crate::engine::CreditBundle;
use crate::model::{ClientId, Payment, PaymentId, ReplicaId};
use crate::reconfig::{StateSnapshot, ViewRecord};
use crate::wire;

/// A batch of payments broadcast as one unit. `sub_batches` groups the
/// payments by the representative replica of their beneficiaries; the grouping
/// is fixed by the broadcaster and reused at settle time for credit bundling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub broadcaster: ReplicaId,
    pub payments: Vec<Payment>,
    pub sub_batches: Vec<(ReplicaId, Vec<usize>)>,
}

impl Batch {
    pub fn bytes(&self) -> Vec<u8> {
        let mut out = b"batch:".to_vec();
        wire::put_u32(&mut out, self.broadcaster.0);
        wire::put_u32(&mut out, self.payments.len() as u32);
        for p in &self.payments {
            let pb = wire::payment_bytes(p);
            wire::put_u32(&mut out, pb.len() as u32);
            out.extend_from_slice(&pb);
        }
        wire::put_u32(&mut out, self.sub_batches.len() as u32);
        for (rep, idxs) in &self.sub_batches {
            wire::put_u32(&mut out, rep.0);
            wire::put_u32(&mut out, idxs.len() as u32);
            for i in idxs {
                wire::put_u32(&mut out, *i as u32);
            }
        }
        out
    }
}

/// Payload of a Prepare: a payment batch or a membership record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrepareBody {
    Batch(Batch),
    Install(ViewRecord),
}

impl PrepareBody {
    pub fn bytes(&self) -> Vec<u8> {
        match self {
            PrepareBody::Batch(b) => b.bytes(),
            PrepareBody::Install(v) => wire::view_record_bytes(v),
        }
    }
}

/// Payload delivered by the signature broadcast: one payment or one
/// membership record, plus the quorum certificate that commits it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommitBody {
    Payment(Payment),
    Install(ViewRecord),
}

impl CommitBody {
    pub fn key(&self) -> BrbKey {
        match self {
            CommitBody::Payment(p) => BrbKey::Payment(p.id),
            CommitBody::Install(v) => BrbKey::Install(v.id),
        }
    }

    pub fn digest(&self) -> Digest32 {
        match self {
            CommitBody::Payment(p) => wire::payment_digest(p),
            CommitBody::Install(v) => crate::crypto::digest(&wire::view_record_bytes(v)),
        }
    }
}

/// Quorum certificate: matching acknowledgment signatures from distinct
/// replicas over (key, digest).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitCertificate {
    pub key: BrbKey,
    pub digest: Digest32,
    pub acks: Vec<Signature>,
}

/// A payment submission signed by the spending client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedSubmission {
    pub payment: Payment,
    pub client_sig: Signature,
}

/// One protocol message. Several records to the same destination may share an
/// envelope; each record still counts as one message for complexity metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum Record {
    Prepare {
        origin: ReplicaId,
        body: PrepareBody,
        sig: Option<Signature>,
    },
    Echo {
        id: PaymentId,
        digest: Digest32,
    },
    Ready {
        id: PaymentId,
        digest: Digest32,
    },
    Pull {
        id: PaymentId,
    },
    PayloadResp {
        payment: Payment,
    },
    Ack {
        key: BrbKey,
        digest: Digest32,
        sig: Signature,
    },
    Commit {
        body: CommitBody,
        cert: CommitCertificate,
    },
    Credit {
        bundle: CreditBundle,
    },
    Submit {
        sub: SignedSubmission,
    },
    BalanceQuery {
        client: ClientId,
    },
    BalanceReply {
        client: ClientId,
        balance: u64,
        next_seq: u64,
    },
    JoinReq {
        joiner: ReplicaId,
        view: u64,
    },
    Snapshot {
        snap: StateSnapshot,
    },
    InstallForward {
        record: ViewRecord,
        cert: CommitCertificate,
    },
    ResumeAck {
        view: u64,
    },
}

impl Record {
    /// Stable label used for per-kind message counters.
    pub fn kind(&self) -> &'static str {
        match self {
            Record::Prepare {
                body: PrepareBody::Batch(_),
                ..
            } => "PREPARE",
            Record::Prepare {
                body: PrepareBody::Install(_),
                ..
            } => "INSTALL_PREPARE",
            Record::Echo { .. } => "ECHO",
            Record::Ready { .. } => "READY",
            Record::Pull { .. } => "PULL",
            Record::PayloadResp { .. } => "PAYLOAD",
            Record::Ack {
                key: BrbKey::Payment(_),
                ..
            } => "ACK",
            Record::Ack {
                key: BrbKey::Install(_),
                ..
            } => "INSTALL_ACK",
            Record::Commit {
                body: CommitBody::Payment(_),
                ..
            } => "COMMIT",
            Record::Commit {
                body: CommitBody::Install(_),
                ..
            } => "INSTALL_COMMIT",
            Record::Credit { .. } => "CREDIT",
            Record::Submit { .. } => "SUBMIT",
            Record::BalanceQuery { .. } => "BALANCE_QUERY",
            Record::BalanceReply { .. } => "BALANCE_REPLY",
            Record::JoinReq { .. } => "JOIN_REQ",
            Record::Snapshot { .. } => "STATE_SNAPSHOT",
            Record::InstallForward { .. } => "INSTALL",
            Record::ResumeAck { .. } => "RESUME_ACK",
        }
    }

    /// Payment id carried by the record, for per-payment trace auditing.
    pub fn payment_id(&self) -> Option<PaymentId> {
        match self {
            Record::Echo { id, .. } | Record::Ready { id, .. } | Record::Pull { id } => Some(*id),
            Record::PayloadResp { payment } => Some(payment.id),
            Record::Ack {
                key: BrbKey::Payment(id),
                ..
            } => Some(*id),
            Record::Commit {
                body: CommitBody::Payment(p),
                ..
            } => Some(p.id),
            Record::Submit { sub } => Some(sub.payment.id),
            _ => None,
        }
    }

    /// Bytes covered by the envelope MAC (kind plus identifying fields).
    fn auth_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self.kind().as_bytes());
        match self {
            Record::Prepare { origin, body, .. } => {
                wire::put_u32(out, origin.0);
                out.extend_from_slice(&crate::crypto::digest(&body.bytes()));
            }
            Record::Echo { id, digest } | Record::Ready { id, digest } => {
                wire::put_u32(out, id.spender.0);
                wire::put_u64(out, id.seq);
                out.extend_from_slice(digest);
            }
            Record::Pull { id } => {
                wire::put_u32(out, id.spender.0);
                wire::put_u64(out, id.seq);
            }
            Record::PayloadResp { payment } => {
                out.extend_from_slice(&wire::payment_digest(payment));
            }
            Record::Ack { key, digest, sig } => {
                wire::put_brb_key(out, key);
                out.extend_from_slice(digest);
                wire::put_signature(out, sig);
            }
            Record::Commit { body, cert } => {
                out.extend_from_slice(&body.digest());
                wire::put_u32(out, cert.acks.len() as u32);
            }
            Record::Credit { bundle } => {
                out.extend_from_slice(&crate::crypto::digest(&wire::credit_sign_bytes(
                    bundle.signer,
                    &bundle.tuples,
                )));
            }
            Record::Submit { sub } => {
                out.extend_from_slice(&wire::payment_digest(&sub.payment));
            }
            Record::BalanceQuery { client } => wire::put_u32(out, client.0),
            Record::BalanceReply {
                client,
                balance,
                next_seq,
            } => {
                wire::put_u32(out, client.0);
                wire::put_u64(out, *balance);
                wire::put_u64(out, *next_seq);
            }
            Record::JoinReq { joiner, view } => {
                wire::put_u32(out, joiner.0);
                wire::put_u64(out, *view);
            }
            Record::Snapshot { snap } => {
                wire::put_u64(out, snap.view);
                wire::put_u32(out, snap.from.0);
            }
            Record::InstallForward { record, .. } => {
                out.extend_from_slice(&wire::view_record_bytes(record));
            }
            Record::ResumeAck { view } => wire::put_u64(out, *view),
        }
    }
}

/// Transport frame: every record inside travels from one sender to one
/// destination and is tagged with the sender's current view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub view: u64,
    pub records: Vec<Record>,
    pub mac: Option<MacTag>,
}

impl Envelope {
    pub fn new(view: u64, records: Vec<Record>) -> Self {
        Envelope {
            view,
            records,
            mac: None,
        }
    }

    /// Bytes covered by the link MAC.
    pub fn auth_bytes(&self, sender: ReplicaId, receiver: ReplicaId) -> Vec<u8> {
        let mut out = b"env:".to_vec();
        wire::put_u32(&mut out, sender.0);
        wire::put_u32(&mut out, receiver.0);
        wire::put_u64(&mut out, self.view);
        wire::put_u32(&mut out, self.records.len() as u32);
        for r in &self.records {
            r.auth_bytes(&mut out);
        }
        out
    }
}
