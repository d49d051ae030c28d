//! The two smart-contract state machines: the Merchant Smart Contract (MSC)
//! holding collateral, credit debits and final balances, and the Entity
//! Smart Contract (ESC) that spawns and records state channels.
//!
//! Records are passive signed state stored in the ledger's contract store;
//! the transition logic runs in the party state machines and the engine,
//! which refuse invalid transitions before anything is committed. Every
//! committed version is authorised either by fresh party signatures over the
//! record, by an embedded co-signed channel state (the unilateral-close
//! path), or — for dispute remarks — by the raiser alone.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::channel::{BalancePair, VersionedState};
use crate::cns::CreditNote;
use crate::crypto::{self, Digest, Signature, Value, VerifyKey};
use crate::{ChannelId, EscrowId, Scid, Sid, Uutid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ContractError {
    #[error("bad signature")]
    BadSignature,
    #[error("unknown channel")]
    UnknownChannel,
    #[error("channel already finalised")]
    DoubleFinalise,
    #[error("final balances do not match evidence")]
    EvidenceMismatch,
}

/// A dispute remark: raised at `t_start`, deadline `t_end = t_start +
/// t_delta`, with the counter of the state that settled it (or the last
/// co-signed counter if it expired unresolved).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisputeRecord {
    pub raiser: Uutid,
    pub disputed_tx: Digest,
    pub t_start: u64,
    pub t_end: u64,
    pub outcome: DisputeOutcome,
    pub evidence_counter: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisputeOutcome {
    Pending,
    Resolved,
    Unresolved,
}

impl DisputeRecord {
    pub fn open(raiser: Uutid, disputed_tx: Digest, t_start: u64, t_delta: u64) -> Self {
        Self {
            raiser,
            disputed_tx,
            t_start,
            t_end: t_start + t_delta,
            outcome: DisputeOutcome::Pending,
            evidence_counter: 0,
        }
    }

    pub fn canonical_value(&self) -> Value {
        Value::list([
            Value::bytes(self.raiser.0),
            Value::bytes(self.disputed_tx.0),
            Value::U64(self.t_start),
            Value::U64(self.t_end),
            Value::U64(match self.outcome {
                DisputeOutcome::Pending => 0,
                DisputeOutcome::Resolved => 1,
                DisputeOutcome::Unresolved => 2,
            }),
            Value::U64(self.evidence_counter),
        ])
    }
}

/// One channel's entry in the ESC's channel set, with its open and (once
/// closed) finalise transaction digests in the transaction set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub id: ChannelId,
    pub open_tx: Digest,
    pub close_tx: Option<Digest>,
}

/// Entity Smart Contract record: the bottom-layer contract between two
/// trading parties. On-chain identities are UUTIDs only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscRecord {
    pub scid: Scid,
    pub version: u64,
    pub party_i: Uutid,
    pub party_j: Uutid,
    /// Fresh per-contract verification keys, generated at ESC setup.
    pub vkey_i: VerifyKey,
    pub vkey_j: VerifyKey,
    /// Channel set with open/close transaction digests.
    pub channels: Vec<ChannelEntry>,
    /// Transaction digest set.
    pub tx_set: Vec<Digest>,
    /// Currently locked amounts per party (coins and energy packets).
    pub balances: BalancePair,
    /// Cumulative finalised amounts across closed channels.
    pub final_balances: Option<BalancePair>,
    pub dispute_list: Vec<DisputeRecord>,
    /// An in-flight unilateral close awaiting its challenge window.
    pub pending_close: Option<PendingClose>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingClose {
    pub channel: ChannelId,
    pub evidence_counter: u64,
    pub challenge_end: u64,
}

impl EscRecord {
    pub fn new(
        scid: Scid,
        party_i: Uutid,
        party_j: Uutid,
        vkey_i: VerifyKey,
        vkey_j: VerifyKey,
    ) -> Self {
        Self {
            scid,
            version: 0,
            party_i,
            party_j,
            vkey_i,
            vkey_j,
            channels: Vec::new(),
            tx_set: Vec::new(),
            balances: BalancePair::default(),
            final_balances: None,
            dispute_list: Vec::new(),
            pending_close: None,
        }
    }

    pub fn channel(&self, id: ChannelId) -> Option<&ChannelEntry> {
        self.channels.iter().find(|c| c.id == id)
    }

    pub fn signer_vkeys(&self) -> Vec<VerifyKey> {
        alloc::vec![self.vkey_i, self.vkey_j]
    }

    pub fn canonical_value(&self) -> Value {
        let channels = self
            .channels
            .iter()
            .map(|c| {
                Value::list([
                    Value::bytes(c.id.0),
                    Value::bytes(c.open_tx.0),
                    Value::list(
                        c.close_tx
                            .iter()
                            .map(|d| Value::bytes(d.0))
                            .collect::<Vec<_>>(),
                    ),
                ])
            })
            .collect::<Vec<_>>();
        let finals = self
            .final_balances
            .iter()
            .map(|b| b.canonical_value())
            .collect::<Vec<_>>();
        let disputes = self
            .dispute_list
            .iter()
            .map(|d| d.canonical_value())
            .collect::<Vec<_>>();
        let pending = self
            .pending_close
            .iter()
            .map(|p| {
                Value::list([
                    Value::bytes(p.channel.0),
                    Value::U64(p.evidence_counter),
                    Value::U64(p.challenge_end),
                ])
            })
            .collect::<Vec<_>>();
        Value::list([
            Value::bytes(b"esc"),
            Value::bytes(self.scid.0),
            Value::U64(self.version),
            Value::bytes(self.party_i.0),
            Value::bytes(self.party_j.0),
            Value::bytes(self.vkey_i.0),
            Value::bytes(self.vkey_j.0),
            Value::list(channels),
            Value::list(
                self.tx_set
                    .iter()
                    .map(|d| Value::bytes(d.0))
                    .collect::<Vec<_>>(),
            ),
            self.balances.canonical_value(),
            Value::list(finals),
            Value::list(disputes),
            Value::list(pending),
        ])
    }

    pub fn canonical_digest(&self) -> Digest {
        crypto::hash_bytes(&self.canonical_value().encode())
    }

    /// Register a newly funded channel: adds the channel entry, records the
    /// open transaction, and locks the funding amounts into the balances.
    pub fn with_channel_opened(
        &self,
        id: ChannelId,
        open_tx: Digest,
        funding: BalancePair,
    ) -> EscRecord {
        let mut next = self.clone();
        next.version += 1;
        next.channels.push(ChannelEntry {
            id,
            open_tx,
            close_tx: None,
        });
        next.tx_set.push(open_tx);
        next.balances.party_i.coins += funding.party_i.coins;
        next.balances.party_i.packets += funding.party_i.packets;
        next.balances.party_j.coins += funding.party_j.coins;
        next.balances.party_j.packets += funding.party_j.packets;
        next
    }

    pub fn with_dispute(&self, dispute: DisputeRecord) -> EscRecord {
        let mut next = self.clone();
        next.version += 1;
        next.dispute_list.push(dispute);
        next
    }

    /// Resolve the most recent pending dispute.
    pub fn with_dispute_outcome(
        &self,
        outcome: DisputeOutcome,
        evidence_counter: u64,
    ) -> EscRecord {
        let mut next = self.clone();
        next.version += 1;
        if let Some(d) = next
            .dispute_list
            .iter_mut()
            .rev()
            .find(|d| d.outcome == DisputeOutcome::Pending)
        {
            d.outcome = outcome;
            d.evidence_counter = evidence_counter;
        }
        next
    }

    pub fn with_pending_close(&self, pending: PendingClose) -> EscRecord {
        let mut next = self.clone();
        next.version += 1;
        next.pending_close = Some(pending);
        next
    }
}

/// The finalise transaction applied to an ESC: the co-signed closing state
/// plus the funding that was locked for the channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinaliseEvidence {
    pub channel: ChannelId,
    pub state: VersionedState,
    pub funding: BalancePair,
    pub finalise_tx: Digest,
}

/// Apply a channel result to the ESC: verify the co-signed state, close the
/// channel entry, release the locked balances and accumulate the finals.
/// Replayed finalise transactions are refused with no change.
pub fn apply_channel_result(
    esc: &EscRecord,
    evidence: &FinaliseEvidence,
) -> Result<EscRecord, ContractError> {
    let entry = esc
        .channel(evidence.channel)
        .ok_or(ContractError::UnknownChannel)?;
    if entry.close_tx.is_some() {
        return Err(ContractError::DoubleFinalise);
    }
    if !evidence.state.verify(&esc.vkey_i, &esc.vkey_j) {
        return Err(ContractError::BadSignature);
    }
    if !evidence.state.balances.conserves(&evidence.funding) {
        return Err(ContractError::EvidenceMismatch);
    }
    let mut next = esc.clone();
    next.version += 1;
    let entry = next
        .channels
        .iter_mut()
        .find(|c| c.id == evidence.channel)
        .unwrap();
    entry.close_tx = Some(evidence.finalise_tx);
    next.tx_set.push(evidence.finalise_tx);
    // release the locked amounts
    next.balances.party_i.coins -= evidence.funding.party_i.coins;
    next.balances.party_i.packets -= evidence.funding.party_i.packets;
    next.balances.party_j.coins -= evidence.funding.party_j.coins;
    next.balances.party_j.packets -= evidence.funding.party_j.packets;
    // accumulate finals
    let finals = next.final_balances.get_or_insert_with(BalancePair::default);
    finals.party_i.coins += evidence.state.balances.party_i.coins;
    finals.party_i.packets += evidence.state.balances.party_i.packets;
    finals.party_j.coins += evidence.state.balances.party_j.coins;
    finals.party_j.packets += evidence.state.balances.party_j.packets;
    next.pending_close = None;
    Ok(next)
}

/// Merchant Smart Contract record: the top-layer contract between a merchant
/// and one participant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MscRecord {
    pub sid: Sid,
    pub version: u64,
    pub merchant: Uutid,
    pub participant: Uutid,
    pub merchant_vkey: VerifyKey,
    pub participant_vkey: VerifyKey,
    /// Current custodial balances (merchant, participant).
    pub balances: (u64, u64),
    /// Final balances, written exactly once at settlement.
    pub final_balance: Option<(u64, u64)>,
    /// Final energy quantities (marketplace mode only).
    pub final_quantity: Option<(u64, u64)>,
    pub collateral_ref: Option<EscrowId>,
    pub debit_ledger: Vec<CreditNote>,
    pub dispute_list: Vec<DisputeRecord>,
    /// ESCs this participant entered, mirrored per the contract-update flow.
    pub esc_refs: Vec<Scid>,
}

impl MscRecord {
    pub fn new(
        sid: Sid,
        merchant: Uutid,
        participant: Uutid,
        merchant_vkey: VerifyKey,
        participant_vkey: VerifyKey,
        collateral_ref: Option<EscrowId>,
    ) -> Self {
        Self {
            sid,
            version: 0,
            merchant,
            participant,
            merchant_vkey,
            participant_vkey,
            balances: (0, 0),
            final_balance: None,
            final_quantity: None,
            collateral_ref,
            debit_ledger: Vec::new(),
            dispute_list: Vec::new(),
            esc_refs: Vec::new(),
        }
    }

    /// Creation requires both parties; later versions are merchant-side
    /// bookkeeping (debits, dispute mirrors, finals) under the participant's
    /// standing consent from version 0.
    pub fn signer_vkeys(&self) -> Vec<VerifyKey> {
        if self.version == 0 {
            alloc::vec![self.merchant_vkey, self.participant_vkey]
        } else {
            alloc::vec![self.merchant_vkey]
        }
    }

    pub fn canonical_value(&self) -> Value {
        let notes = self
            .debit_ledger
            .iter()
            .map(|n| n.canonical_value())
            .collect::<Vec<_>>();
        let disputes = self
            .dispute_list
            .iter()
            .map(|d| d.canonical_value())
            .collect::<Vec<_>>();
        Value::list([
            Value::bytes(b"msc"),
            Value::bytes(self.sid.0),
            Value::U64(self.version),
            Value::bytes(self.merchant.0),
            Value::bytes(self.participant.0),
            Value::bytes(self.merchant_vkey.0),
            Value::bytes(self.participant_vkey.0),
            Value::list([Value::U64(self.balances.0), Value::U64(self.balances.1)]),
            Value::list(
                self.final_balance
                    .iter()
                    .map(|(m, p)| Value::list([Value::U64(*m), Value::U64(*p)]))
                    .collect::<Vec<_>>(),
            ),
            Value::list(
                self.final_quantity
                    .iter()
                    .map(|(m, p)| Value::list([Value::U64(*m), Value::U64(*p)]))
                    .collect::<Vec<_>>(),
            ),
            Value::list(
                self.collateral_ref
                    .iter()
                    .map(|e| Value::U64(e.0))
                    .collect::<Vec<_>>(),
            ),
            Value::list(notes),
            Value::list(disputes),
            Value::list(
                self.esc_refs
                    .iter()
                    .map(|s| Value::bytes(s.0))
                    .collect::<Vec<_>>(),
            ),
        ])
    }

    pub fn canonical_digest(&self) -> Digest {
        crypto::hash_bytes(&self.canonical_value().encode())
    }

    pub fn bump(&self) -> MscRecord {
        let mut next = self.clone();
        next.version += 1;
        next
    }
}

/// A committed MSC version: the record, the signatures it was stored with,
/// and the committing height. History is append-only.
#[derive(Debug, Clone, Serialize)]
pub struct CommittedMsc {
    pub record: MscRecord,
    pub sigs: Vec<(VerifyKey, u64, Signature)>,
    pub height: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CommittedEsc {
    pub record: EscRecord,
    pub sigs: Vec<(VerifyKey, u64, Signature)>,
    pub height: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::CoinsPackets;
    use crate::crypto::{gen_keypair, sign, Nonce};

    fn sample_esc() -> (EscRecord, crypto::KeyPair, crypto::KeyPair) {
        let ki = gen_keypair([11u8; 32]);
        let kj = gen_keypair([12u8; 32]);
        let esc = EscRecord::new(
            Scid([1u8; 16]),
            Uutid([2u8; 16]),
            Uutid([3u8; 16]),
            ki.verify_key(),
            kj.verify_key(),
        );
        (esc, ki, kj)
    }

    fn cosigned_state(
        channel: ChannelId,
        counter: u64,
        balances: BalancePair,
        ki: &crypto::KeyPair,
        kj: &crypto::KeyPair,
    ) -> VersionedState {
        let nonce = Nonce([7u8; 16]);
        let hstate = VersionedState::compute_hstate(channel, counter, &balances, &nonce);
        VersionedState {
            channel,
            counter,
            balances,
            nonce,
            hstate,
            sig_i: sign(ki, &hstate, counter),
            sig_j: sign(kj, &hstate, counter),
        }
    }

    #[test]
    fn channel_result_releases_and_accumulates() {
        let (esc, ki, kj) = sample_esc();
        let channel = ChannelId([9u8; 16]);
        let funding = BalancePair::new(CoinsPackets::new(100, 0), CoinsPackets::new(100, 0));
        let open_tx = crypto::hash_bytes(b"open");
        let esc = esc.with_channel_opened(channel, open_tx, funding);
        assert_eq!(esc.balances.total_coins(), 200);

        let finals = BalancePair::new(CoinsPackets::new(75, 0), CoinsPackets::new(125, 0));
        let state = cosigned_state(channel, 5, finals, &ki, &kj);
        let evidence = FinaliseEvidence {
            channel,
            state,
            funding,
            finalise_tx: crypto::hash_bytes(b"close"),
        };
        let closed = apply_channel_result(&esc, &evidence).unwrap();
        assert_eq!(closed.balances.total_coins(), 0);
        assert_eq!(
            closed.final_balances.unwrap(),
            BalancePair::new(CoinsPackets::new(75, 0), CoinsPackets::new(125, 0))
        );
        assert_eq!(
            closed.channel(channel).unwrap().close_tx,
            Some(evidence.finalise_tx)
        );

        // replaying the same finalise is refused with no change
        assert_eq!(
            apply_channel_result(&closed, &evidence),
            Err(ContractError::DoubleFinalise)
        );
    }

    #[test]
    fn channel_result_rejects_bad_signature() {
        let (esc, ki, _) = sample_esc();
        let other = gen_keypair([99u8; 32]);
        let channel = ChannelId([9u8; 16]);
        let funding = BalancePair::new(CoinsPackets::new(100, 0), CoinsPackets::new(100, 0));
        let esc = esc.with_channel_opened(channel, crypto::hash_bytes(b"open"), funding);
        let state = cosigned_state(channel, 1, funding, &ki, &other);
        let evidence = FinaliseEvidence {
            channel,
            state,
            funding,
            finalise_tx: crypto::hash_bytes(b"close"),
        };
        assert_eq!(
            apply_channel_result(&esc, &evidence),
            Err(ContractError::BadSignature)
        );
    }

    #[test]
    fn channel_result_rejects_unknown_channel() {
        let (esc, ki, kj) = sample_esc();
        let funding = BalancePair::new(CoinsPackets::new(1, 0), CoinsPackets::new(1, 0));
        let state = cosigned_state(ChannelId([8u8; 16]), 0, funding, &ki, &kj);
        let evidence = FinaliseEvidence {
            channel: ChannelId([8u8; 16]),
            state,
            funding,
            finalise_tx: crypto::hash_bytes(b"close"),
        };
        assert_eq!(
            apply_channel_result(&esc, &evidence),
            Err(ContractError::UnknownChannel)
        );
    }

    #[test]
    fn zero_update_close_returns_deposits() {
        let (esc, ki, kj) = sample_esc();
        let channel = ChannelId([9u8; 16]);
        let funding = BalancePair::new(CoinsPackets::new(40, 0), CoinsPackets::new(60, 0));
        let esc = esc.with_channel_opened(channel, crypto::hash_bytes(b"open"), funding);
        let state = cosigned_state(channel, 0, funding, &ki, &kj);
        let evidence = FinaliseEvidence {
            channel,
            state,
            funding,
            finalise_tx: crypto::hash_bytes(b"close"),
        };
        let closed = apply_channel_result(&esc, &evidence).unwrap();
        assert_eq!(closed.final_balances.unwrap(), funding);
    }

    #[test]
    fn dispute_record_deadline_arithmetic() {
        let d = DisputeRecord::open(Uutid([1u8; 16]), crypto::hash_bytes(b"tx"), 10, 50);
        assert_eq!(d.t_end, 60);
        assert_eq!(d.outcome, DisputeOutcome::Pending);
    }

    #[test]
    fn esc_canonical_digest_changes_with_content() {
        let (esc, _, _) = sample_esc();
        let d1 = esc.canonical_digest();
        let esc2 = esc.with_dispute(DisputeRecord::open(
            Uutid([1u8; 16]),
            crypto::hash_bytes(b"tx"),
            1,
            5,
        ));
        assert_ne!(d1, esc2.canonical_digest());
    }
}
