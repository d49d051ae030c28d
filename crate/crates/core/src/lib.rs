//! Deterministic simulator for a hierarchical smart-contract + state-channel
//! trading protocol.
//!
//! The crate models a two-layer contract structure on top of an idealised
//! ledger: merchant contracts ([`contracts::MscRecord`]) hold collateral and
//! credit-note debits, entity contracts ([`contracts::EscRecord`]) spawn
//! off-chain state channels ([`channel`]), and a credit-note system ([`cns`])
//! lets participants fund channels against merchant-held collateral instead
//! of locked coins. Everything runs on a single-threaded round scheduler
//! ([`engine::Engine`]) with a seeded RNG, so a scenario plus a seed fully
//! determines the trace.
//!
//! The crate is `no_std` + `alloc`; all IO (CLI, config and trace files)
//! lives in the companion `chanforge` binary crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod channel;
pub mod cns;
pub mod contracts;
pub mod crypto;
pub mod engine;
pub mod ledger;
pub mod marketplace;
pub mod message;
pub mod network;
pub mod scenario;
pub mod trace;

mod ids;

pub use ids::{Address, ChannelId, EscrowId, NoteId, PartyId, Scid, Sid, Uutid};
