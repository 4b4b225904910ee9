//! Canonical serialization: length-prefixed little-endian fields in
//! declaration order. These byte images are what gets digested, signed and
//! MAC'd, so they must be stable.

use crate::brb::BrbKey;
use crate::crypto::{digest, Digest32, PartyId, Signature};
use crate::engine::{CreditBundle, DependencyCertificate};
use crate::model::{Payment, PaymentTuple, ReplicaId};
use crate::reconfig::ViewRecord;

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_party(out: &mut Vec<u8>, p: PartyId) {
    match p {
        PartyId::Replica(r) => {
            out.push(1);
            put_u32(out, r.0);
        }
        PartyId::Client(c) => {
            out.push(2);
            put_u32(out, c.0);
        }
    }
}

pub fn put_signature(out: &mut Vec<u8>, sig: &Signature) {
    put_party(out, sig.signer);
    out.extend_from_slice(&sig.bytes);
}

pub fn put_tuple(out: &mut Vec<u8>, t: &PaymentTuple) {
    put_u32(out, t.id.spender.0);
    put_u64(out, t.id.seq);
    put_u32(out, t.beneficiary.0);
    put_u64(out, t.amount);
}

/// 24-byte payment core: spender 4B, seq 8B, beneficiary 4B, amount 8B.
pub fn tuple_bytes(t: &PaymentTuple) -> Vec<u8> {
    let mut out = Vec::with_capacity(24);
    put_tuple(&mut out, t);
    out
}

pub fn put_credit_bundle(out: &mut Vec<u8>, b: &CreditBundle) {
    put_u32(out, b.signer.0);
    put_u32(out, b.tuples.len() as u32);
    for t in &b.tuples {
        put_tuple(out, t);
    }
    put_signature(out, &b.sig);
}

pub fn put_certificate(out: &mut Vec<u8>, c: &DependencyCertificate) {
    put_tuple(out, &c.tuple);
    put_u32(out, c.proofs.len() as u32);
    for p in &c.proofs {
        put_credit_bundle(out, p);
    }
}

/// Payment image: core tuple, then the attached dependency certificates.
pub fn payment_bytes(p: &Payment) -> Vec<u8> {
    let mut out = Vec::with_capacity(28);
    put_tuple(&mut out, &p.tuple());
    put_u32(&mut out, p.deps.len() as u32);
    for c in &p.deps {
        put_certificate(&mut out, c);
    }
    out
}

pub fn payment_digest(p: &Payment) -> Digest32 {
    digest(&payment_bytes(p))
}

pub fn put_brb_key(out: &mut Vec<u8>, key: &BrbKey) {
    match key {
        BrbKey::Payment(id) => {
            out.push(1);
            put_u32(out, id.spender.0);
            put_u64(out, id.seq);
        }
        BrbKey::Install(view) => {
            out.push(2);
            put_u64(out, *view);
        }
    }
}

/// Message a replica signs when acknowledging a broadcast payload.
pub fn ack_sign_bytes(key: &BrbKey, d: &Digest32) -> Vec<u8> {
    let mut out = b"ack:".to_vec();
    put_brb_key(&mut out, key);
    out.extend_from_slice(d);
    out
}

/// Message a settling replica signs when issuing a credit bundle.
pub fn credit_sign_bytes(signer: ReplicaId, tuples: &[PaymentTuple]) -> Vec<u8> {
    let mut out = b"credit:".to_vec();
    put_u32(&mut out, signer.0);
    put_u32(&mut out, tuples.len() as u32);
    for t in tuples {
        put_tuple(&mut out, t);
    }
    out
}

/// Message a client signs when submitting a payment to its representative.
pub fn submission_sign_bytes(t: &PaymentTuple) -> Vec<u8> {
    let mut out = b"pay:".to_vec();
    put_tuple(&mut out, t);
    out
}

pub fn view_record_bytes(v: &ViewRecord) -> Vec<u8> {
    let mut out = b"view:".to_vec();
    put_u64(&mut out, v.id);
    put_u32(&mut out, v.members.len() as u32);
    for m in &v.members {
        put_u32(&mut out, m.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SIG_LEN;
    use crate::model::{ClientId, Payment};

    #[test]
    fn payment_core_is_24_bytes() {
        let p = Payment::new(ClientId(3), 7, ClientId(9), 1000);
        assert_eq!(tuple_bytes(&p.tuple()).len(), 24);
        assert_eq!(payment_bytes(&p).len(), 28); // core + empty dep list
    }

    #[test]
    fn submitted_payment_is_about_100_bytes() {
        // dep-free payment image plus the client authenticator
        let p = Payment::new(ClientId(3), 7, ClientId(9), 1000);
        let authenticator = 5 + SIG_LEN; // signer tag + signature
        let wire = payment_bytes(&p).len() + authenticator;
        assert!((85..=110).contains(&wire), "wire image {} bytes", wire);
    }

    #[test]
    fn digests_separate_payloads() {
        let a = Payment::new(ClientId(1), 0, ClientId(2), 10);
        let mut b = a.clone();
        b.amount = 11;
        assert_ne!(payment_digest(&a), payment_digest(&b));
        assert_eq!(payment_digest(&a), payment_digest(&a.clone()));
    }
}
