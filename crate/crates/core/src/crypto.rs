//! Signature scheme, canonical state encoding, nonce-committed hashing, and
//! the time-lock claim credential backing collateral.
//!
//! All protocol messages are built from these primitives. The concrete
//! algorithms are fixed behind this module's interface: Ed25519 for
//! signatures (32-byte keys, 64-byte signatures), SHA-256 for digests,
//! ChaCha20 for the seeded engine RNG. Everything here is a pure function of
//! its inputs; the only stateful piece is [`NonceRegistry`], which tracks
//! nonce uniqueness per engine instance.

use alloc::vec::Vec;

use ed25519_dalek::{Signer, Verifier};
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::PartyId;

/// The signature scheme's security parameter, in bits. The protocol model
/// leaves it abstract; it is housed here as the scheme's documented constant
/// (Ed25519 targets the 128-bit level).
pub const SECURITY_PARAMETER_BITS: usize = 128;

pub const DIGEST_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const NONCE_LEN: usize = 16;

/// Deterministic engine RNG. The 64-bit master seed is domain-separated and
/// stretched to a ChaCha20 key so that nearby seeds do not share streams.
pub type EngineRng = rand_chacha::ChaCha20Rng;

pub fn rng_from_master_seed(seed: u64) -> EngineRng {
    let mut h = Sha256::new();
    h.update(b"chanforge.rng.v1");
    h.update(seed.to_be_bytes());
    let key: [u8; 32] = h.finalize().into();
    EngineRng::from_seed(key)
}

// ---------------------------------------------------------------------------
// Key material
// ---------------------------------------------------------------------------

/// Verification (public) key, 32 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VerifyKey(pub [u8; 32]);

/// Signing + verification key pair. The verification key is derived
/// deterministically from the 32-byte signing seed.
#[derive(Debug, Clone)]
pub struct KeyPair {
    signing: [u8; 32],
    verification: VerifyKey,
}

impl KeyPair {
    pub fn verify_key(&self) -> VerifyKey {
        self.verification
    }

    /// The raw signing seed. Handed to the adversary on corruption.
    pub fn signing_seed(&self) -> [u8; 32] {
        self.signing
    }
}

/// `Gen(1^λ)`: derive a key pair from a 32-byte seed. Same seed, same pair.
pub fn gen_keypair(seed: [u8; 32]) -> KeyPair {
    let sk = ed25519_dalek::SigningKey::from_bytes(&seed);
    KeyPair {
        signing: seed,
        verification: VerifyKey(sk.verifying_key().to_bytes()),
    }
}

/// Derive a key pair from the next 32 bytes of the engine RNG stream.
pub fn gen_keypair_from_rng(rng: &mut EngineRng) -> KeyPair {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    gen_keypair(seed)
}

// ---------------------------------------------------------------------------
// Signatures
// ---------------------------------------------------------------------------

/// 64-byte signature over `digest ∥ counter`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl Signature {
    pub fn to_hex(&self) -> alloc::string::String {
        hex::encode(self.0)
    }
}

impl Serialize for Signature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = alloc::string::String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 64] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("signature must be 64 bytes"))?;
        Ok(Signature(arr))
    }
}

/// Sign `digest ∥ counter`. The incremental counter is bound into the signed
/// payload so replayed messages fail verification under a different counter.
pub fn sign(key: &KeyPair, digest: &Digest, counter: u64) -> Signature {
    let sk = ed25519_dalek::SigningKey::from_bytes(&key.signing);
    let mut payload = [0u8; DIGEST_LEN + 8];
    payload[..DIGEST_LEN].copy_from_slice(&digest.0);
    payload[DIGEST_LEN..].copy_from_slice(&counter.to_be_bytes());
    Signature(sk.sign(&payload).to_bytes())
}

/// Verify a signature over `digest ∥ counter`. Returns `false` for any
/// mismatch; never faults.
pub fn verify(vkey: &VerifyKey, digest: &Digest, counter: u64, sig: &Signature) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&vkey.0) else {
        return false;
    };
    let mut payload = [0u8; DIGEST_LEN + 8];
    payload[..DIGEST_LEN].copy_from_slice(&digest.0);
    payload[DIGEST_LEN..].copy_from_slice(&counter.to_be_bytes());
    vk.verify(&payload, &ed25519_dalek::Signature::from_bytes(&sig.0))
        .is_ok()
}

// ---------------------------------------------------------------------------
// Digests and nonces
// ---------------------------------------------------------------------------

/// 32-byte SHA-256 output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> alloc::string::String {
        hex::encode(self.0)
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = alloc::string::String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))?;
        Ok(Digest(arr))
    }
}

pub fn hash_bytes(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// 16-byte nonce drawn from the engine RNG, unique per signed state within
/// a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Nonce(pub [u8; 16]);

/// `hstate`: hash the canonical state encoding together with a random nonce.
pub fn hash_state(state: &Value, nonce: &Nonce) -> Digest {
    let mut h = Sha256::new();
    h.update(state.encode());
    h.update(nonce.0);
    Digest(h.finalize().into())
}

/// Tracks issued nonces so a duplicate within one engine session is caught.
#[derive(Debug, Default)]
pub struct NonceRegistry {
    used: alloc::collections::BTreeSet<[u8; 16]>,
}

impl NonceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draw a fresh nonce from the RNG. Redraws on the (astronomically
    /// unlikely) collision so the uniqueness invariant holds by construction.
    pub fn issue(&mut self, rng: &mut EngineRng) -> Nonce {
        loop {
            let mut n = [0u8; 16];
            rng.fill_bytes(&mut n);
            if self.used.insert(n) {
                return Nonce(n);
            }
        }
    }

    pub fn issued_count(&self) -> usize {
        self.used.len()
    }
}

// ---------------------------------------------------------------------------
// Canonical encoding
// ---------------------------------------------------------------------------

/// A state value for canonical encoding: unsigned integers, byte strings,
/// and nested lists.
///
/// Framing: integers as 8-byte big-endian with no prefix; byte strings
/// length-prefixed with a 4-byte big-endian byte count; lists prefixed with
/// a 4-byte big-endian element count; fields concatenated in declared order.
/// The encoding is injective per schema; protocol states disambiguate their
/// schema by starting with a message-kind discriminator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    U64(u64),
    Bytes(Vec<u8>),
    List(Vec<Value>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("integer out of range for canonical encoding")]
    IntOutOfRange,
}

impl Value {
    /// Admit a signed or wide integer into the encodable domain. Negative
    /// values and values ≥ 2^64 are refused.
    pub fn int(v: i128) -> Result<Self, EncodeError> {
        if v < 0 || v > u64::MAX as i128 {
            return Err(EncodeError::IntOutOfRange);
        }
        Ok(Value::U64(v as u64))
    }

    pub fn bytes(b: impl AsRef<[u8]>) -> Self {
        Value::Bytes(b.as_ref().to_vec())
    }

    pub fn list(items: impl Into<Vec<Value>>) -> Self {
        Value::List(items.into())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Value::U64(v) => out.extend_from_slice(&v.to_be_bytes()),
            Value::Bytes(b) => {
                out.extend_from_slice(&(b.len() as u32).to_be_bytes());
                out.extend_from_slice(b);
            }
            Value::List(items) => {
                out.extend_from_slice(&(items.len() as u32).to_be_bytes());
                for item in items {
                    item.encode_into(out);
                }
            }
        }
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::U64(v)
    }
}

impl From<&[u8]> for Value {
    fn from(b: &[u8]) -> Self {
        Value::Bytes(b.to_vec())
    }
}

/// Encode an ordered field list: the common entry point for signing.
pub fn canonical_encode(fields: &[Value]) -> Vec<u8> {
    Value::List(fields.to_vec()).encode()
}

// ---------------------------------------------------------------------------
// Time-lock credential
// ---------------------------------------------------------------------------

/// Claim credential for a time-locked escrow. The holder can claim the
/// escrowed coins on the ledger once `unlock_height` is reached; the ledger
/// checks `hash(claim_secret)` against the escrow's credential digest and
/// refuses any earlier claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelockCredential {
    pub claim_secret: [u8; 32],
    pub unlock_height: u64,
    pub holder: PartyId,
}

impl TimelockCredential {
    pub fn generate(rng: &mut EngineRng, unlock_height: u64, holder: PartyId) -> Self {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        Self {
            claim_secret: secret,
            unlock_height,
            holder,
        }
    }

    /// The digest the ledger stores; claiming requires the preimage.
    pub fn credential_digest(&self) -> Digest {
        hash_bytes(&self.claim_secret)
    }
}
