//! Cryptographic primitives shared by every other module.
//!
//! * [`hash_bytes`] is SHA3-256.
//! * [`MsetDigest`] is an additive multiset hash: every element is expanded with
//!   SHAKE256 into an integer modulo the 2048-bit MODP prime of RFC 3526 and
//!   digests are combined by modular addition. Subtraction is the group
//!   inverse, so the empty multiset hashes to zero.
//! * [`encode_edge`] is the canonical, length-prefixed edge encoding.
//! * Signatures are Ed25519.

use std::cell::Cell;
use std::fmt;

use base64::Engine;
use crypto_bigint::{Encoding, U2048};
use ed25519_dalek::{Signer, Verifier};
use serde::{Deserialize, Serialize};
use sha3::digest::{ExtendableOutput, Update, XofReader};
use sha3::{Digest as _, Sha3_256, Shake256};

use crate::accumulator::TimestampKey;
use crate::error::{Error, Result};

thread_local! {
    static HASH_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`hash_bytes`]/[`hash_parts`] calls made on this thread.
pub fn hash_calls() -> u64 {
    HASH_CALLS.with(|c| c.get())
}

/// A 32-byte SHA3-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const LEN: usize = 32;

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let v = hex::decode(s).map_err(|e| Error::Decode(e.to_string()))?;
        let arr: [u8; 32] = v
            .try_into()
            .map_err(|_| Error::Decode("digest must be 32 bytes".into()))?;
        Ok(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash_bytes(data: &[u8]) -> Digest {
    hash_parts(&[data])
}

/// Hash of the concatenation of `parts`.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    HASH_CALLS.with(|c| c.set(c.get() + 1));
    let mut h = Sha3_256::new();
    for p in parts {
        sha3::Digest::update(&mut h, p);
    }
    Digest(h.finalize().into())
}

const MODULUS_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74",
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437",
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05",
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB",
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718",
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

/// The group modulus (RFC 3526 group 14 prime).
pub const MSET_MODULUS: U2048 = U2048::from_be_hex(MODULUS_HEX);

const MSET_DOMAIN: &[u8] = b"vcause/mset/v1";

/// Ordering-invariant multiset digest.
///
/// Subtracting an element that was never added still yields a valid group
/// element; it will simply not match any honestly built digest.
#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsetDigest(U2048);

impl MsetDigest {
    /// Serialized width in bytes (big-endian).
    pub const LEN: usize = 256;

    pub fn to_bytes(&self) -> [u8; 256] {
        self.0.to_be_bytes()
    }

    /// Parses a canonical big-endian encoding. Values not reduced modulo the
    /// group order are rejected.
    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != Self::LEN {
            return Err(Error::Decode(format!("mset digest must be 256 bytes, got {}", b.len())));
        }
        let v = U2048::from_be_slice(b);
        if v >= MSET_MODULUS {
            return Err(Error::Decode("mset digest not reduced".into()));
        }
        Ok(MsetDigest(v))
    }

    pub fn is_empty(&self) -> bool {
        *self == mset_empty()
    }

    pub fn add(&self, elem: &[u8]) -> Self {
        MsetDigest(self.0.add_mod(&element(elem), &MSET_MODULUS))
    }

    pub fn sub(&self, elem: &[u8]) -> Self {
        MsetDigest(self.0.sub_mod(&element(elem), &MSET_MODULUS))
    }

    /// Group addition of two digests (multiset union).
    pub fn combine(&self, other: &MsetDigest) -> Self {
        MsetDigest(self.0.add_mod(&other.0, &MSET_MODULUS))
    }
}

impl Default for MsetDigest {
    fn default() -> Self {
        mset_empty()
    }
}

impl std::hash::Hash for MsetDigest {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.to_bytes().hash(state)
    }
}

impl fmt::Debug for MsetDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.to_bytes();
        write!(f, "MsetDigest({}..)", hex::encode(&b[248..]))
    }
}

fn element(elem: &[u8]) -> U2048 {
    let mut x = Shake256::default();
    x.update(MSET_DOMAIN);
    x.update(&(elem.len() as u64).to_be_bytes());
    x.update(elem);
    let mut out = [0u8; 256];
    x.finalize_xof().read(&mut out);
    let v = U2048::from_be_bytes(out);
    // The modulus exceeds 2^2047, so one subtraction always reduces.
    if v >= MSET_MODULUS {
        v.wrapping_sub(&MSET_MODULUS)
    } else {
        v
    }
}

pub fn mset_empty() -> MsetDigest {
    MsetDigest(U2048::ZERO)
}

pub fn mset_add(d: &MsetDigest, elem: &[u8]) -> MsetDigest {
    d.add(elem)
}

pub fn mset_sub(d: &MsetDigest, elem: &[u8]) -> MsetDigest {
    d.sub(elem)
}

pub fn mset_hash_set<I, B>(elems: I) -> MsetDigest
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    elems
        .into_iter()
        .fold(mset_empty(), |d, e| d.add(e.as_ref()))
}

/// Edge kind byte values used by [`encode_edge`].
pub mod edge_kind {
    pub const TEMPORAL: u8 = 0;
    pub const DEPENDENCY: u8 = 1;
    /// Set when the edge ends in a terminal stub; `dst` then names the
    /// terminal's target.
    pub const TO_TERMINAL: u8 = 0x80;
}

/// Fields of one edge as seen by the canonical encoding.
#[derive(Clone, Copy, Debug)]
pub struct EdgeFields<'a> {
    pub src_entity: u64,
    pub src_key: TimestampKey,
    pub dst_entity: u64,
    pub dst_key: TimestampKey,
    pub kind: u8,
    pub event_type: &'a str,
    pub payload: &'a [u8],
}

fn put_field(out: &mut Vec<u8>, f: &[u8]) {
    out.extend_from_slice(&(f.len() as u32).to_be_bytes());
    out.extend_from_slice(f);
}

/// Canonical encoding: nine fields, each a 4-byte big-endian length followed
/// by the field bytes.
pub fn encode_edge(e: &EdgeFields<'_>) -> Vec<u8> {
    let mut out = Vec::with_capacity(96 + e.event_type.len() + e.payload.len());
    put_field(&mut out, &e.src_entity.to_be_bytes());
    put_field(&mut out, &e.src_key.ts.to_be_bytes());
    put_field(&mut out, &e.src_key.seq.to_be_bytes());
    put_field(&mut out, &e.dst_entity.to_be_bytes());
    put_field(&mut out, &e.dst_key.ts.to_be_bytes());
    put_field(&mut out, &e.dst_key.seq.to_be_bytes());
    put_field(&mut out, &[e.kind]);
    put_field(&mut out, e.event_type.as_bytes());
    put_field(&mut out, e.payload);
    out
}

/// Ed25519 signing key.
#[derive(Clone)]
pub struct SecretKey(ed25519_dalek::SigningKey);

/// Ed25519 verification key.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PublicKey(ed25519_dalek::VerifyingKey);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Signature(pub [u8; 64]);

impl Signature {
    pub const LEN: usize = 64;

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let arr: [u8; 64] = b
            .try_into()
            .map_err(|_| Error::SignatureDecode(format!("expected 64 bytes, got {}", b.len())))?;
        Ok(Signature(arr))
    }
}

const SK_LABEL: &str = "VCAUSE ED25519 PRIVATE KEY";
const PK_LABEL: &str = "VCAUSE ED25519 PUBLIC KEY";

fn pem_encode(label: &str, bytes: &[u8]) -> String {
    let body = base64::engine::general_purpose::STANDARD.encode(bytes);
    format!("-----BEGIN {label}-----\n{body}\n-----END {label}-----\n")
}

fn pem_decode(label: &str, text: &str) -> Result<Vec<u8>> {
    let begin = format!("-----BEGIN {label}-----");
    let end = format!("-----END {label}-----");
    let t = text.trim();
    let inner = t
        .strip_prefix(&begin)
        .and_then(|r| r.strip_suffix(&end))
        .ok_or_else(|| Error::KeyDecode(format!("missing {label} armor")))?;
    let body: String = inner.split_whitespace().collect();
    base64::engine::general_purpose::STANDARD
        .decode(body)
        .map_err(|e| Error::KeyDecode(e.to_string()))
}

impl SecretKey {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        SecretKey(ed25519_dalek::SigningKey::from_bytes(&seed))
    }

    pub fn generate<R: rand::RngCore + rand::CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let seed: [u8; 32] = b
            .try_into()
            .map_err(|_| Error::KeyDecode(format!("secret key must be 32 bytes, got {}", b.len())))?;
        Ok(Self::from_seed(seed))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.0.verifying_key())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.0.sign(msg).to_bytes())
    }

    pub fn to_pem(&self) -> String {
        pem_encode(SK_LABEL, &self.to_bytes())
    }

    pub fn from_pem(text: &str) -> Result<Self> {
        Self::from_bytes(&pem_decode(SK_LABEL, text)?)
    }
}

impl PublicKey {
    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let arr: [u8; 32] = b
            .try_into()
            .map_err(|_| Error::KeyDecode(format!("public key must be 32 bytes, got {}", b.len())))?;
        ed25519_dalek::VerifyingKey::from_bytes(&arr)
            .map(PublicKey)
            .map_err(|e| Error::KeyDecode(e.to_string()))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn verify(&self, msg: &[u8], sig: &Signature) -> bool {
        let s = ed25519_dalek::Signature::from_bytes(&sig.0);
        self.0.verify(msg, &s).is_ok()
    }

    pub fn to_pem(&self) -> String {
        pem_encode(PK_LABEL, &self.to_bytes())
    }

    pub fn from_pem(text: &str) -> Result<Self> {
        Self::from_bytes(&pem_decode(PK_LABEL, text)?)
    }
}

/// The tuple a commitment signature covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitmentFields<'a> {
    pub endpoint_id: &'a str,
    pub epoch: u64,
    pub root: Digest,
    pub registry_digest: Digest,
    pub timestamp: u64,
}

pub const COMMITMENT_TAG: &[u8] = b"VCAUSE1";

impl CommitmentFields<'_> {
    /// `"VCAUSE1" || len:2 || endpoint_id || epoch:8 || root:32 || registry:32 || ts:8`
    pub fn signed_bytes(&self) -> Vec<u8> {
        let id = self.endpoint_id.as_bytes();
        let mut out = Vec::with_capacity(7 + 2 + id.len() + 80);
        out.extend_from_slice(COMMITMENT_TAG);
        out.extend_from_slice(&(id.len() as u16).to_be_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.extend_from_slice(&self.root.0);
        out.extend_from_slice(&self.registry_digest.0);
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out
    }
}

pub fn sign_commitment(sk: &SecretKey, fields: &CommitmentFields<'_>) -> Signature {
    sk.sign(&fields.signed_bytes())
}

pub fn verify_commitment(vk: &PublicKey, fields: &CommitmentFields<'_>, sig: &Signature) -> bool {
    vk.verify(&fields.signed_bytes(), sig)
}
