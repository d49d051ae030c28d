//! Off-chain state channel lifecycle: co-signed versioned states, update
//! validation, dispute bookkeeping, and close triggers.
//!
//! A channel is a pair of party-local endpoints exchanging proposals over
//! the network. The only shared state is what gets committed to the ledger;
//! everything here is a party's local view. Both coin and energy-packet
//! balances are conserved across versions: the pair totals at any version
//! equal the funding totals.

use serde::{Deserialize, Serialize};

use crate::crypto::{self, Digest, Nonce, Signature, Value, VerifyKey};
use crate::{ChannelId, EscrowId, NoteId, PartyId, Scid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ChannelError {
    #[error("bad signature")]
    BadSignature,
    #[error("stale counter")]
    StaleCounter,
    #[error("balance totals not conserved")]
    NonConservingBalance,
    #[error("channel timer elapsed")]
    TimerElapsed,
    #[error("channel is in dispute")]
    ChannelDisputed,
    #[error("credit limit exceeded")]
    CreditLimitExceeded,
    #[error("insufficient funds")]
    InsufficientFunds,
    #[error("channel not active")]
    NotActive,
    #[error("channel already closed")]
    AlreadyClosed,
    #[error("newer co-signed state exists")]
    StaleClose,
    #[error("dispute already open")]
    DuplicateDispute,
    #[error("disputed transaction unknown")]
    UnknownTx,
    #[error("request refused")]
    Refused,
}

/// Coin and energy-packet amounts held by one side of a channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoinsPackets {
    pub coins: u64,
    pub packets: u64,
}

impl CoinsPackets {
    pub fn new(coins: u64, packets: u64) -> Self {
        Self { coins, packets }
    }

    pub fn canonical_value(&self) -> Value {
        Value::list([Value::U64(self.coins), Value::U64(self.packets)])
    }
}

/// Per-party balances, ordered (party_i, party_j) by the channel's party
/// ordering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancePair {
    pub party_i: CoinsPackets,
    pub party_j: CoinsPackets,
}

impl BalancePair {
    pub fn new(party_i: CoinsPackets, party_j: CoinsPackets) -> Self {
        Self { party_i, party_j }
    }

    pub fn total_coins(&self) -> u128 {
        self.party_i.coins as u128 + self.party_j.coins as u128
    }

    pub fn total_packets(&self) -> u128 {
        self.party_i.packets as u128 + self.party_j.packets as u128
    }

    /// Both totals match: the conservation rule for every channel version.
    pub fn conserves(&self, other: &BalancePair) -> bool {
        self.total_coins() == other.total_coins() && self.total_packets() == other.total_packets()
    }

    pub fn side(&self, side: Side) -> CoinsPackets {
        match side {
            Side::I => self.party_i,
            Side::J => self.party_j,
        }
    }

    pub fn canonical_value(&self) -> Value {
        Value::list([
            self.party_i.canonical_value(),
            self.party_j.canonical_value(),
        ])
    }
}

/// Which side of the ordered pair a party occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    I,
    J,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::I => Side::J,
            Side::J => Side::I,
        }
    }
}

/// A co-signed channel state at proposal counter `i`. Both signatures are
/// over `(hstate, i)`; `hstate` commits the balances together with a fresh
/// nonce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionedState {
    pub channel: ChannelId,
    pub counter: u64,
    pub balances: BalancePair,
    pub nonce: Nonce,
    pub hstate: Digest,
    pub sig_i: Signature,
    pub sig_j: Signature,
}

impl VersionedState {
    /// Canonical state content that `hstate` commits to.
    pub fn state_value(channel: ChannelId, counter: u64, balances: &BalancePair) -> Value {
        Value::list([
            Value::bytes(b"channel-state"),
            Value::bytes(channel.0),
            Value::U64(counter),
            balances.canonical_value(),
        ])
    }

    pub fn compute_hstate(
        channel: ChannelId,
        counter: u64,
        balances: &BalancePair,
        nonce: &Nonce,
    ) -> Digest {
        crypto::hash_state(&Self::state_value(channel, counter, balances), nonce)
    }

    /// Full verification: recompute `hstate` from the committed fields and
    /// check both parties' signatures over `(hstate, counter)`.
    pub fn verify(&self, vkey_i: &VerifyKey, vkey_j: &VerifyKey) -> bool {
        let expect = Self::compute_hstate(self.channel, self.counter, &self.balances, &self.nonce);
        expect == self.hstate
            && crypto::verify(vkey_i, &self.hstate, self.counter, &self.sig_i)
            && crypto::verify(vkey_j, &self.hstate, self.counter, &self.sig_j)
    }
}

/// How a party funded its side of a channel: coins locked on the ledger, or
/// a merchant-backed credit note.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FundingSource {
    Deposit {
        escrow: EscrowId,
        coins: u64,
        packets: u64,
    },
    CreditNote {
        note: NoteId,
        coins: u64,
        packets: u64,
    },
}

impl FundingSource {
    pub fn coins(&self) -> u64 {
        match self {
            FundingSource::Deposit { coins, .. } | FundingSource::CreditNote { coins, .. } => {
                *coins
            }
        }
    }

    pub fn packets(&self) -> u64 {
        match self {
            FundingSource::Deposit { packets, .. } | FundingSource::CreditNote { packets, .. } => {
                *packets
            }
        }
    }

    pub fn amounts(&self) -> CoinsPackets {
        CoinsPackets::new(self.coins(), self.packets())
    }

    pub fn is_credit(&self) -> bool {
        matches!(self, FundingSource::CreditNote { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Init,
    Active,
    Disputed,
    Closed,
}

/// Why a channel close was triggered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloseTrigger {
    FundsDepleted,
    TradeComplete,
    TimerElapsed,
    DisputeUnresolved,
}

/// An open dispute on a channel, raised at `t_start` with deadline `t_end =
/// t_start + t_delta`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveDispute {
    pub raiser: PartyId,
    pub disputed_tx: Digest,
    pub disputed_counter: u64,
    pub t_start: u64,
    pub t_end: u64,
}

/// A proposal the proposer has signed and sent, awaiting the countersign.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingUpdate {
    pub counter: u64,
    pub balances: BalancePair,
    pub nonce: Nonce,
    pub hstate: Digest,
    pub own_sig: Signature,
}

/// One party's local view of a channel.
#[derive(Debug, Clone)]
pub struct Endpoint {
    pub channel: ChannelId,
    pub scid: Scid,
    pub side: Side,
    pub peer: PartyId,
    pub phase: Phase,
    pub latest: VersionedState,
    /// Every co-signed version this endpoint stored, in counter order; the
    /// source for dispute evidence and close challenges.
    pub history: alloc::vec::Vec<VersionedState>,
    pub pending: Option<PendingUpdate>,
    pub funding: (FundingSource, FundingSource),
    pub t_delta: u64,
    /// Height at which the channel timer elapses (open height + t_delta).
    pub expires_at: u64,
    pub dispute: Option<ActiveDispute>,
}

impl Endpoint {
    /// Store a newly co-signed version as latest.
    pub fn store_version(&mut self, state: VersionedState) {
        self.history.push(state.clone());
        self.latest = state;
        self.pending = None;
    }

    pub fn version(&self, counter: u64) -> Option<&VersionedState> {
        self.history.iter().find(|s| s.counter == counter)
    }

    pub fn own_funding(&self) -> FundingSource {
        match self.side {
            Side::I => self.funding.0,
            Side::J => self.funding.1,
        }
    }

    pub fn funding_totals(&self) -> BalancePair {
        BalancePair::new(self.funding.0.amounts(), self.funding.1.amounts())
    }

    /// Validate an incoming update proposal against this endpoint's state.
    /// Signature checks happen at the message layer; this covers the channel
    /// rules: phase, timer, counter freshness, and conservation.
    pub fn validate_update(
        &self,
        counter: u64,
        balances: &BalancePair,
        height: u64,
    ) -> Result<(), ChannelError> {
        match self.phase {
            Phase::Disputed => return Err(ChannelError::ChannelDisputed),
            Phase::Closed => return Err(ChannelError::AlreadyClosed),
            Phase::Init => return Err(ChannelError::NotActive),
            Phase::Active => {}
        }
        if height >= self.expires_at {
            return Err(ChannelError::TimerElapsed);
        }
        if counter <= self.latest.counter {
            return Err(ChannelError::StaleCounter);
        }
        if counter != self.latest.counter + 1 {
            return Err(ChannelError::StaleCounter);
        }
        if !balances.conserves(&self.latest.balances) {
            return Err(ChannelError::NonConservingBalance);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{gen_keypair, sign};

    fn cosigned(counter: u64, bi: u64, bj: u64) -> (VersionedState, VerifyKey, VerifyKey) {
        let ki = gen_keypair([3u8; 32]);
        let kj = gen_keypair([4u8; 32]);
        let channel = ChannelId([9u8; 16]);
        let balances = BalancePair::new(CoinsPackets::new(bi, 0), CoinsPackets::new(bj, 0));
        let nonce = Nonce([5u8; 16]);
        let hstate = VersionedState::compute_hstate(channel, counter, &balances, &nonce);
        let state = VersionedState {
            channel,
            counter,
            balances,
            nonce,
            hstate,
            sig_i: sign(&ki, &hstate, counter),
            sig_j: sign(&kj, &hstate, counter),
        };
        (state, ki.verify_key(), kj.verify_key())
    }

    fn endpoint(latest: VersionedState) -> Endpoint {
        Endpoint {
            channel: latest.channel,
            scid: Scid([1u8; 16]),
            side: Side::I,
            peer: PartyId(1),
            phase: Phase::Active,
            history: alloc::vec![latest.clone()],
            funding: (
                FundingSource::Deposit {
                    escrow: EscrowId(0),
                    coins: latest.balances.party_i.coins,
                    packets: 0,
                },
                FundingSource::Deposit {
                    escrow: EscrowId(1),
                    coins: latest.balances.party_j.coins,
                    packets: 0,
                },
            ),
            t_delta: 50,
            expires_at: 50,
            dispute: None,
            latest,
            pending: None,
        }
    }

    #[test]
    fn cosigned_state_verifies() {
        let (state, vi, vj) = cosigned(0, 100, 100);
        assert!(state.verify(&vi, &vj));
        // swap keys: fails
        assert!(!state.verify(&vj, &vi));
    }

    #[test]
    fn tampered_balance_fails_verification() {
        let (mut state, vi, vj) = cosigned(0, 100, 100);
        state.balances.party_i.coins = 90;
        assert!(!state.verify(&vi, &vj));
    }

    #[test]
    fn update_validation_accepts_conserving_next_counter() {
        let (state, _, _) = cosigned(0, 100, 100);
        let ep = endpoint(state);
        let next = BalancePair::new(CoinsPackets::new(90, 0), CoinsPackets::new(110, 0));
        assert!(ep.validate_update(1, &next, 10).is_ok());
    }

    #[test]
    fn update_validation_rejects_replay() {
        let (state, _, _) = cosigned(3, 100, 100);
        let ep = endpoint(state);
        let next = BalancePair::new(CoinsPackets::new(90, 0), CoinsPackets::new(110, 0));
        assert_eq!(
            ep.validate_update(3, &next, 10),
            Err(ChannelError::StaleCounter)
        );
        assert_eq!(
            ep.validate_update(2, &next, 10),
            Err(ChannelError::StaleCounter)
        );
    }

    #[test]
    fn update_validation_rejects_nonconserving() {
        let (state, _, _) = cosigned(0, 100, 100);
        let ep = endpoint(state);
        let bad = BalancePair::new(CoinsPackets::new(90, 0), CoinsPackets::new(120, 0));
        assert_eq!(
            ep.validate_update(1, &bad, 10),
            Err(ChannelError::NonConservingBalance)
        );
    }

    #[test]
    fn update_validation_rejects_after_timer() {
        let (state, _, _) = cosigned(0, 100, 100);
        let ep = endpoint(state);
        let next = BalancePair::new(CoinsPackets::new(90, 0), CoinsPackets::new(110, 0));
        assert_eq!(
            ep.validate_update(1, &next, 50),
            Err(ChannelError::TimerElapsed)
        );
    }

    #[test]
    fn update_validation_rejects_while_disputed() {
        let (state, _, _) = cosigned(0, 100, 100);
        let mut ep = endpoint(state);
        ep.phase = Phase::Disputed;
        let next = BalancePair::new(CoinsPackets::new(90, 0), CoinsPackets::new(110, 0));
        assert_eq!(
            ep.validate_update(1, &next, 10),
            Err(ChannelError::ChannelDisputed)
        );
    }
}
