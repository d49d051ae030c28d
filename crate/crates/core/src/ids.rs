//! Opaque identifiers shared across the protocol modules.
//!
//! On-ledger records must never carry a party's true identity, so every
//! identifier that can end up in a ledger dump is derived from the party's
//! masked UUTID, never from its configured name.

use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

/// 16-byte ids display and serialize as hex strings, so they are readable in
/// dumps and usable as JSON map keys.
macro_rules! fmt_as_hex {
    ($ty:ty) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }

        impl Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.0))
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
                let arr: [u8; 16] = bytes
                    .try_into()
                    .map_err(|_| serde::de::Error::custom("id must be 16 bytes"))?;
                Ok(Self(arr))
            }
        }
    };
}

/// Engine-local party index, assigned in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartyId(pub u32);

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "party#{}", self.0)
    }
}

/// Universally Unique Temporary Identifier masking a party's true identity
/// in everything that is committed on-chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Uutid(pub [u8; 16]);

impl Uutid {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

fmt_as_hex!(Uutid);

/// Ledger account address, derived from the UUTID.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Address(pub String);

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// MSC session identifier. The paper treats `sid` as shorthand for
/// `(sid, i)`; we realise it as an opaque 16-byte value derived from the
/// two UUTIDs and the merchant's session counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Sid(pub [u8; 16]);

fmt_as_hex!(Sid);

/// ESC contract identifier, `SC(<P_i, P_j>, n)` with a per-pair counter `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Scid(pub [u8; 16]);

fmt_as_hex!(Scid);

/// State channel identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ChannelId(pub [u8; 16]);

fmt_as_hex!(ChannelId);

/// Ledger escrow identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EscrowId(pub u64);

impl fmt::Display for EscrowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "escrow#{}", self.0)
    }
}

/// Credit-note identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NoteId(pub u64);

impl fmt::Display for NoteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "note#{}", self.0)
    }
}
