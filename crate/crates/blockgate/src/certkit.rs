//! Certificates, multi-CA trust, and proxy credentials.
//!
//! Each collaborating grid runs its own certificate authority. A gateway
//! holds a [`TrustStore`] with one verifying key per grid and checks every
//! inbound certificate against it (first authentication stage). A verified
//! certificate can then be exchanged for a short-lived [`ProxyCredential`]
//! that is re-checked at the queue boundary (second stage).

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

/// Unix timestamp in seconds.
pub type Timestamp = i64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CertError {
    #[error("CA id must be non-empty")]
    InvalidCAId,
    #[error("username {0:?} does not match [a-z][a-z0-9_]{{0,31}}")]
    InvalidUsername(String),
    #[error("validity window is empty or inverted")]
    InvalidValidity,
    #[error("proxy ttl must be positive")]
    InvalidTTL,
    #[error("certificate blob is malformed")]
    MalformedCertificate,
}

/// Why verification rejected a certificate or proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthFailure {
    UnknownCA,
    BadSignature,
    Expired,
    NotYetValid,
    ProxyForged,
    ProxyExpired,
}

impl AuthFailure {
    pub fn code(&self) -> &'static str {
        match self {
            AuthFailure::UnknownCA => "UnknownCA",
            AuthFailure::BadSignature => "BadSignature",
            AuthFailure::Expired => "Expired",
            AuthFailure::NotYetValid => "NotYetValid",
            AuthFailure::ProxyForged => "ProxyForged",
            AuthFailure::ProxyExpired => "ProxyExpired",
        }
    }
}

pub type AuthOutcome = Result<(), AuthFailure>;

/// A grid's certificate authority: a signing/verifying key pair plus a label.
#[derive(Debug, Clone)]
pub struct CAIdentity {
    pub ca_id: String,
    signing_key: SigningKey,
}

impl CAIdentity {
    pub fn verifying_key_bytes(&self) -> [u8; 32] {
        self.signing_key.verifying_key().to_bytes()
    }
}

/// Signed identity record binding a username to its issuing grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject_username: String,
    pub issuer_ca_id: String,
    pub not_before: Timestamp,
    pub not_after: Timestamp,
    pub subject_key: Vec<u8>,
    pub signature: Vec<u8>,
}

/// Static mapping from CA id to verifying key.
#[derive(Debug, Clone, Default)]
pub struct TrustStore {
    entries: BTreeMap<String, VerifyingKey>,
}

/// Second-stage credential: a MAC-bound token derived from a verified
/// certificate, presented again at enqueue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxyCredential {
    pub subject_username: String,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub token: Vec<u8>,
}

pub fn valid_username(name: &str) -> bool {
    let bytes = name.as_bytes();
    if bytes.is_empty() || bytes.len() > 32 {
        return false;
    }
    if !bytes[0].is_ascii_lowercase() {
        return false;
    }
    bytes[1..]
        .iter()
        .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_')
}

fn push_field(buf: &mut Vec<u8>, field: &[u8]) {
    buf.extend_from_slice(&(field.len() as u32).to_be_bytes());
    buf.extend_from_slice(field);
}

/// Canonical byte encoding of the signed fields, in fixed order with
/// 4-byte big-endian length prefixes. Signatures are computed over this.
pub fn canonical_encoding(
    subject_username: &str,
    issuer_ca_id: &str,
    not_before: Timestamp,
    not_after: Timestamp,
    subject_key: &[u8],
) -> Vec<u8> {
    let mut buf = Vec::new();
    push_field(&mut buf, subject_username.as_bytes());
    push_field(&mut buf, issuer_ca_id.as_bytes());
    push_field(&mut buf, not_before.to_string().as_bytes());
    push_field(&mut buf, not_after.to_string().as_bytes());
    push_field(&mut buf, hex::encode(subject_key).as_bytes());
    buf
}

impl Certificate {
    pub fn canonical_encoding(&self) -> Vec<u8> {
        canonical_encoding(
            &self.subject_username,
            &self.issuer_ca_id,
            self.not_before,
            self.not_after,
            &self.subject_key,
        )
    }

    /// Wire form: canonical encoding, then 4-byte signature length, then
    /// the signature bytes.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut buf = self.canonical_encoding();
        push_field(&mut buf, &self.signature);
        buf
    }

    pub fn from_wire(blob: &[u8]) -> Result<Certificate, CertError> {
        let mut pos = 0usize;
        let mut fields: Vec<Vec<u8>> = Vec::new();
        while pos < blob.len() {
            if blob.len() - pos < 4 {
                return Err(CertError::MalformedCertificate);
            }
            let len = u32::from_be_bytes(blob[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if blob.len() - pos < len {
                return Err(CertError::MalformedCertificate);
            }
            fields.push(blob[pos..pos + len].to_vec());
            pos += len;
        }
        if fields.len() != 6 {
            return Err(CertError::MalformedCertificate);
        }
        let text = |i: usize| -> Result<String, CertError> {
            String::from_utf8(fields[i].clone()).map_err(|_| CertError::MalformedCertificate)
        };
        let not_before: Timestamp = text(2)?
            .parse()
            .map_err(|_| CertError::MalformedCertificate)?;
        let not_after: Timestamp = text(3)?
            .parse()
            .map_err(|_| CertError::MalformedCertificate)?;
        let subject_key =
            hex::decode(text(4)?).map_err(|_| CertError::MalformedCertificate)?;
        Ok(Certificate {
            subject_username: text(0)?,
            issuer_ca_id: text(1)?,
            not_before,
            not_after,
            subject_key,
            signature: fields[5].clone(),
        })
    }
}

impl TrustStore {
    pub fn new() -> TrustStore {
        TrustStore::default()
    }

    /// Rejects duplicate ids; lookup of an absent id is an UnknownCA
    /// failure, never a default.
    pub fn add(&mut self, ca_id: &str, verifying_key: &[u8; 32]) -> Result<(), CertError> {
        if ca_id.is_empty() || self.entries.contains_key(ca_id) {
            return Err(CertError::InvalidCAId);
        }
        let key =
            VerifyingKey::from_bytes(verifying_key).map_err(|_| CertError::MalformedCertificate)?;
        self.entries.insert(ca_id.to_string(), key);
        Ok(())
    }

    pub fn add_ca(&mut self, ca: &CAIdentity) -> Result<(), CertError> {
        self.add(&ca.ca_id, &ca.verifying_key_bytes())
    }

    pub fn remove(&mut self, ca_id: &str) -> bool {
        self.entries.remove(ca_id).is_some()
    }

    pub fn ca_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    fn lookup(&self, ca_id: &str) -> Option<&VerifyingKey> {
        self.entries.get(ca_id)
    }
}

/// Deterministic CA key generation: the same (ca_id, seed) always yields
/// byte-identical keys.
pub fn ca_keygen(ca_id: &str, seed: u64) -> Result<CAIdentity, CertError> {
    if ca_id.is_empty() {
        return Err(CertError::InvalidCAId);
    }
    let mut h = Sha256::new();
    h.update(ca_id.as_bytes());
    h.update(seed.to_be_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let mut key_bytes = [0u8; 32];
    rng.fill_bytes(&mut key_bytes);
    Ok(CAIdentity {
        ca_id: ca_id.to_string(),
        signing_key: SigningKey::from_bytes(&key_bytes),
    })
}

/// Issue a certificate for `username` signed by `ca`.
pub fn ca_issue(
    ca: &CAIdentity,
    username: &str,
    not_before: Timestamp,
    not_after: Timestamp,
) -> Result<Certificate, CertError> {
    if !valid_username(username) {
        return Err(CertError::InvalidUsername(username.to_string()));
    }
    if not_before >= not_after {
        return Err(CertError::InvalidValidity);
    }
    // Subject key derived from the issuing key and subject; the subject's
    // own key pair plays no further role in this model.
    let mut h = Sha256::new();
    h.update(ca.verifying_key_bytes());
    h.update(username.as_bytes());
    let subject_key = h.finalize().to_vec();
    let encoding = canonical_encoding(username, &ca.ca_id, not_before, not_after, &subject_key);
    let signature = ca.signing_key.sign(&encoding).to_vec();
    Ok(Certificate {
        subject_username: username.to_string(),
        issuer_ca_id: ca.ca_id.clone(),
        not_before,
        not_after,
        subject_key,
        signature,
    })
}

/// First authentication stage. Ok iff the issuer is trusted, the signature
/// covers the canonical encoding, and `not_before <= now < not_after`.
pub fn verify_certificate(cert: &Certificate, store: &TrustStore, now: Timestamp) -> AuthOutcome {
    let key = store
        .lookup(&cert.issuer_ca_id)
        .ok_or(AuthFailure::UnknownCA)?;
    let sig_bytes: [u8; 64] = cert
        .signature
        .as_slice()
        .try_into()
        .map_err(|_| AuthFailure::BadSignature)?;
    let sig = ed25519_dalek::Signature::from_bytes(&sig_bytes);
    if key.verify(&cert.canonical_encoding(), &sig).is_err() {
        return Err(AuthFailure::BadSignature);
    }
    if now < cert.not_before {
        return Err(AuthFailure::NotYetValid);
    }
    if now >= cert.not_after {
        return Err(AuthFailure::Expired);
    }
    Ok(())
}

pub fn extract_username(cert: &Certificate) -> &str {
    &cert.subject_username
}

fn proxy_mac(
    subject_username: &str,
    issued_at: Timestamp,
    expires_at: Timestamp,
    proxy_key: &[u8],
) -> Vec<u8> {
    let mut buf = Vec::new();
    push_field(&mut buf, subject_username.as_bytes());
    push_field(&mut buf, issued_at.to_string().as_bytes());
    push_field(&mut buf, expires_at.to_string().as_bytes());
    let mut mac = HmacSha256::new_from_slice(proxy_key).expect("hmac accepts any key length");
    mac.update(&buf);
    mac.finalize().into_bytes().to_vec()
}

/// Second-stage credential issuance; the caller must have verified the
/// certificate first.
pub fn issue_proxy(
    cert: &Certificate,
    now: Timestamp,
    ttl_s: u64,
    proxy_key: &[u8],
) -> Result<ProxyCredential, CertError> {
    if ttl_s == 0 {
        return Err(CertError::InvalidTTL);
    }
    let expires_at = now + ttl_s as Timestamp;
    Ok(ProxyCredential {
        subject_username: cert.subject_username.clone(),
        issued_at: now,
        expires_at,
        token: proxy_mac(&cert.subject_username, now, expires_at, proxy_key),
    })
}

/// Second authentication stage. Ok iff the token matches the bound fields
/// under `proxy_key` and `now < expires_at`.
pub fn verify_proxy(proxy: &ProxyCredential, now: Timestamp, proxy_key: &[u8]) -> AuthOutcome {
    let expected = proxy_mac(
        &proxy.subject_username,
        proxy.issued_at,
        proxy.expires_at,
        proxy_key,
    );
    // Constant-time comparison via the Mac verify API.
    let mut mac = HmacSha256::new_from_slice(proxy_key).expect("hmac accepts any key length");
    let mut buf = Vec::new();
    push_field(&mut buf, proxy.subject_username.as_bytes());
    push_field(&mut buf, proxy.issued_at.to_string().as_bytes());
    push_field(&mut buf, proxy.expires_at.to_string().as_bytes());
    mac.update(&buf);
    if mac.verify_slice(&proxy.token).is_err() {
        debug_assert_ne!(expected, proxy.token);
        return Err(AuthFailure::ProxyForged);
    }
    if now >= proxy.expires_at {
        return Err(AuthFailure::ProxyExpired);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use base64::Engine;

    fn grid1() -> CAIdentity {
        ca_keygen("grid1", 42).unwrap()
    }

    fn store_with(cas: &[&CAIdentity]) -> TrustStore {
        let mut s = TrustStore::new();
        for ca in cas {
            s.add_ca(ca).unwrap();
        }
        s
    }

    #[test]
    fn keygen_is_deterministic() {
        let a = ca_keygen("grid1", 42).unwrap();
        let b = ca_keygen("grid1", 42).unwrap();
        assert_eq!(a.verifying_key_bytes(), b.verifying_key_bytes());
        assert_eq!(a.ca_id, "grid1");
    }

    #[test]
    fn keygen_rejects_empty_id() {
        assert_eq!(ca_keygen("", 1).unwrap_err(), CertError::InvalidCAId);
    }

    #[test]
    fn distinct_seeds_give_distinct_keys() {
        let a = ca_keygen("grid2", 7).unwrap();
        let b = ca_keygen("grid2", 8).unwrap();
        assert_ne!(a.verifying_key_bytes(), b.verifying_key_bytes());
    }

    #[test]
    fn issue_and_verify_round_trip() {
        let ca = grid1();
        let cert = ca_issue(&ca, "alice", 0, 3600).unwrap();
        assert_eq!(cert.subject_username, "alice");
        assert_eq!(cert.issuer_ca_id, "grid1");
        let store = store_with(&[&ca]);
        assert_eq!(verify_certificate(&cert, &store, 100), Ok(()));
    }

    #[test]
    fn issue_rejects_bad_username() {
        let ca = grid1();
        assert!(matches!(
            ca_issue(&ca, "Alice!", 0, 3600),
            Err(CertError::InvalidUsername(_))
        ));
    }

    #[test]
    fn issue_rejects_empty_window() {
        let ca = grid1();
        assert_eq!(
            ca_issue(&ca, "bob", 100, 100).unwrap_err(),
            CertError::InvalidValidity
        );
    }

    #[test]
    fn verify_window_is_half_open() {
        let ca = grid1();
        let cert = ca_issue(&ca, "alice", 100, 200).unwrap();
        let store = store_with(&[&ca]);
        assert_eq!(verify_certificate(&cert, &store, 99), Err(AuthFailure::NotYetValid));
        assert_eq!(verify_certificate(&cert, &store, 100), Ok(()));
        assert_eq!(verify_certificate(&cert, &store, 199), Ok(()));
        assert_eq!(verify_certificate(&cert, &store, 200), Err(AuthFailure::Expired));
    }

    #[test]
    fn unknown_ca_rejected() {
        let ca = grid1();
        let other = ca_keygen("grid2", 9).unwrap();
        let cert = ca_issue(&ca, "alice", 0, 3600).unwrap();
        let store = store_with(&[&other]);
        assert_eq!(verify_certificate(&cert, &store, 10), Err(AuthFailure::UnknownCA));
    }

    #[test]
    fn every_signature_byte_flip_rejected() {
        let ca = grid1();
        let cert = ca_issue(&ca, "alice", 0, 3600).unwrap();
        let store = store_with(&[&ca]);
        for i in 0..cert.signature.len() {
            for bit in 0..8 {
                let mut tampered = cert.clone();
                tampered.signature[i] ^= 1 << bit;
                assert_eq!(
                    verify_certificate(&tampered, &store, 10),
                    Err(AuthFailure::BadSignature),
                    "flip at byte {i} bit {bit} accepted"
                );
            }
        }
    }

    #[test]
    fn extract_username_is_projection() {
        let ca = grid1();
        for name in ["alice", "bob", "u_42"] {
            let cert = ca_issue(&ca, name, 0, 10).unwrap();
            assert_eq!(extract_username(&cert), name);
        }
    }

    #[test]
    fn wire_round_trip() {
        let ca = grid1();
        let cert = ca_issue(&ca, "alice", 0, 3600).unwrap();
        let blob = cert.to_wire();
        let back = Certificate::from_wire(&blob).unwrap();
        assert_eq!(back, cert);
        // and through base64 as used on the wire
        let b64 = base64::engine::general_purpose::STANDARD.encode(&blob);
        let decoded = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
        assert_eq!(Certificate::from_wire(&decoded).unwrap(), cert);
    }

    #[test]
    fn truncated_wire_rejected() {
        let ca = grid1();
        let blob = ca_issue(&ca, "alice", 0, 3600).unwrap().to_wire();
        for cut in [0, 1, 3, blob.len() / 2, blob.len() - 1] {
            assert_eq!(
                Certificate::from_wire(&blob[..cut]).unwrap_err(),
                CertError::MalformedCertificate,
                "truncation at {cut} accepted"
            );
        }
    }

    #[test]
    fn proxy_round_trip_and_boundaries() {
        let ca = grid1();
        let cert = ca_issue(&ca, "alice", 0, 3600).unwrap();
        let key = b"gateway-proxy-key";
        let proxy = issue_proxy(&cert, 1000, 600, key).unwrap();
        assert_eq!(proxy.subject_username, "alice");
        assert_eq!(proxy.issued_at, 1000);
        assert_eq!(proxy.expires_at, 1600);
        assert_eq!(verify_proxy(&proxy, 1599, key), Ok(()));
        assert_eq!(verify_proxy(&proxy, 1600, key), Err(AuthFailure::ProxyExpired));
    }

    #[test]
    fn proxy_zero_ttl_rejected() {
        let ca = grid1();
        let cert = ca_issue(&ca, "alice", 0, 3600).unwrap();
        assert_eq!(issue_proxy(&cert, 1000, 0, b"k").unwrap_err(), CertError::InvalidTTL);
    }

    #[test]
    fn proxy_binding_covers_every_field() {
        let ca = grid1();
        let cert = ca_issue(&ca, "alice", 0, 3600).unwrap();
        let key = b"gateway-proxy-key";
        let proxy = issue_proxy(&cert, 1000, 600, key).unwrap();

        let mut renamed = proxy.clone();
        renamed.subject_username = "mallory".to_string();
        assert_eq!(verify_proxy(&renamed, 1100, key), Err(AuthFailure::ProxyForged));

        let mut shifted = proxy.clone();
        shifted.issued_at += 1;
        assert_eq!(verify_proxy(&shifted, 1100, key), Err(AuthFailure::ProxyForged));

        let mut extended = proxy.clone();
        extended.expires_at += 3600;
        assert_eq!(verify_proxy(&extended, 1100, key), Err(AuthFailure::ProxyForged));

        let mut tok = proxy.clone();
        tok.token[0] ^= 1;
        assert_eq!(verify_proxy(&tok, 1100, key), Err(AuthFailure::ProxyForged));

        // wrong gateway key
        assert_eq!(verify_proxy(&proxy, 1100, b"other"), Err(AuthFailure::ProxyForged));
    }

    #[test]
    fn verify_is_pure() {
        let ca = grid1();
        let cert = ca_issue(&ca, "alice", 0, 3600).unwrap();
        let store = store_with(&[&ca]);
        let first = verify_certificate(&cert, &store, 50);
        let second = verify_certificate(&cert, &store, 50);
        assert_eq!(first, second);
    }
}
