//! Protocol messages: signed, nonce-committed, counter-versioned state
//! transitions exchanged over the secure network.
//!
//! Every message shares one frame: a kind byte from the registry below, the
//! sender's message counter (replies carry the request's counter with the
//! reply flag set), a fresh nonce, `hstate` committing the body together
//! with the nonce, and a signature over `(hstate, counter)`. The kind byte
//! leads the canonical encoding, so states of different kinds can never
//! collide.
//!
//! Kind byte registry (bit-exact for golden traces):
//!
//! | byte | kind              |
//! |------|-------------------|
//! | 0x01 | msc-init          |
//! | 0x02 | msc-init-ack      |
//! | 0x03 | msc-confirm       |
//! | 0x10 | esc-init          |
//! | 0x11 | esc-init-ack      |
//! | 0x12 | esc-confirm       |
//! | 0x20 | chan-open         |
//! | 0x21 | chan-open-ack     |
//! | 0x22 | chan-fund         |
//! | 0x30 | update            |
//! | 0x31 | update-success    |
//! | 0x40 | dispute           |
//! | 0x41 | dispute-evidence  |
//! | 0x42 | dispute-close     |
//! | 0x50 | finalise          |
//! | 0x51 | finalise-ack      |

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::channel::{BalancePair, CloseTrigger, FundingSource, VersionedState};
use crate::cns::CreditAgreement;
use crate::crypto::{self, Digest, KeyPair, Nonce, Signature, Value, VerifyKey};
use crate::{ChannelId, EscrowId, PartyId, Scid, Sid, Uutid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsgKind {
    MscInit,
    MscInitAck,
    MscConfirm,
    EscInit,
    EscInitAck,
    EscConfirm,
    ChanOpen,
    ChanOpenAck,
    ChanFund,
    Update,
    UpdateSuccess,
    Dispute,
    DisputeEvidence,
    DisputeClose,
    Finalise,
    FinaliseAck,
}

impl MsgKind {
    pub fn byte(self) -> u8 {
        match self {
            MsgKind::MscInit => 0x01,
            MsgKind::MscInitAck => 0x02,
            MsgKind::MscConfirm => 0x03,
            MsgKind::EscInit => 0x10,
            MsgKind::EscInitAck => 0x11,
            MsgKind::EscConfirm => 0x12,
            MsgKind::ChanOpen => 0x20,
            MsgKind::ChanOpenAck => 0x21,
            MsgKind::ChanFund => 0x22,
            MsgKind::Update => 0x30,
            MsgKind::UpdateSuccess => 0x31,
            MsgKind::Dispute => 0x40,
            MsgKind::DisputeEvidence => 0x41,
            MsgKind::DisputeClose => 0x42,
            MsgKind::Finalise => 0x50,
            MsgKind::FinaliseAck => 0x51,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MsgKind::MscInit => "msc-init",
            MsgKind::MscInitAck => "msc-init-ack",
            MsgKind::MscConfirm => "msc-confirm",
            MsgKind::EscInit => "esc-init",
            MsgKind::EscInitAck => "esc-init-ack",
            MsgKind::EscConfirm => "esc-confirm",
            MsgKind::ChanOpen => "chan-open",
            MsgKind::ChanOpenAck => "chan-open-ack",
            MsgKind::ChanFund => "chan-fund",
            MsgKind::Update => "update",
            MsgKind::UpdateSuccess => "update-success",
            MsgKind::Dispute => "dispute",
            MsgKind::DisputeEvidence => "dispute-evidence",
            MsgKind::DisputeClose => "dispute-close",
            MsgKind::Finalise => "finalise",
            MsgKind::FinaliseAck => "finalise-ack",
        }
    }
}

/// Message counter: requests carry the sender's incremental `i`; answers
/// carry the request's counter tagged as a reply (`i'`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsgCounter {
    pub value: u64,
    pub reply: bool,
}

impl MsgCounter {
    pub fn request(value: u64) -> Self {
        Self {
            value,
            reply: false,
        }
    }

    pub fn reply_to(value: u64) -> Self {
        Self { value, reply: true }
    }

    /// The counter as bound into the signed payload.
    pub fn signed_value(&self) -> u64 {
        (self.value << 1) | self.reply as u64
    }
}

/// Merchant-signed collateral notice forwarded to ESC peers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollateralNotice {
    pub agreement: CreditAgreement,
    pub escrow: EscrowId,
    pub merchant_vkey: VerifyKey,
}

impl CollateralNotice {
    fn canonical_value(&self) -> Value {
        Value::list([
            Value::bytes(self.agreement.applicant.0),
            Value::bytes(self.agreement.merchant.0),
            Value::U64(self.agreement.credit_limit),
            Value::U64(self.agreement.required_collateral),
            Value::U64(self.agreement.valid_until),
            Value::bytes(self.agreement.merchant_sig.0),
            Value::U64(self.escrow.0),
            Value::bytes(self.merchant_vkey.0),
        ])
    }
}

fn versioned_state_value(s: &VersionedState) -> Value {
    Value::list([
        Value::bytes(s.channel.0),
        Value::U64(s.counter),
        s.balances.canonical_value(),
        Value::bytes(s.nonce.0),
        Value::bytes(s.hstate.0),
        Value::bytes(s.sig_i.0),
        Value::bytes(s.sig_j.0),
    ])
}

fn funding_value(f: &FundingSource) -> Value {
    match f {
        FundingSource::Deposit {
            escrow,
            coins,
            packets,
        } => Value::list([
            Value::U64(0),
            Value::U64(escrow.0),
            Value::U64(*coins),
            Value::U64(*packets),
        ]),
        FundingSource::CreditNote {
            note,
            coins,
            packets,
        } => Value::list([
            Value::U64(1),
            Value::U64(note.0),
            Value::U64(*coins),
            Value::U64(*packets),
        ]),
    }
}

/// Typed message payloads. Every variant's canonical encoding starts with
/// the kind byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Body {
    MscInit {
        participant: Uutid,
        merchant: Uutid,
        participant_vkey: VerifyKey,
        /// True identity, disclosed to the merchant off-chain only.
        true_identity: String,
        use_cns: bool,
        /// Collateral escrow + claim secret, present when the CNS is used.
        collateral_escrow: Option<EscrowId>,
        claim_secret: Option<[u8; 32]>,
    },
    MscInitAck {
        sid: Sid,
        merchant_vkey: VerifyKey,
        record_digest: Digest,
        merchant_record_sig: Signature,
        merchant_sig_counter: u64,
    },
    MscConfirm {
        sid: Sid,
        participant_record_sig: Signature,
        participant_sig_counter: u64,
    },
    EscInit {
        initiator: Uutid,
        peer: Uutid,
        fresh_vkey: VerifyKey,
        collateral_notice: Option<CollateralNotice>,
    },
    EscInitAck {
        scid: Scid,
        fresh_vkey: VerifyKey,
        collateral_notice: Option<CollateralNotice>,
    },
    EscConfirm {
        scid: Scid,
        record_digest: Digest,
        record_sig: Signature,
        record_sig_counter: u64,
    },
    ChanOpen {
        scid: Scid,
        channel: ChannelId,
        /// Initiator's funding, already locked or note-issued.
        initiator_funding: FundingSource,
        /// Amounts the responder is expected to fund.
        responder_coins: u64,
        responder_packets: u64,
        /// Version-0 state fields, signed by the initiator.
        state_counter: u64,
        balances: BalancePair,
        state_nonce: Nonce,
        state_hstate: Digest,
        initiator_state_sig: Signature,
        /// Masked identity certifying the funded amount.
        identity: Uutid,
        t_delta: u64,
    },
    ChanOpenAck {
        channel: ChannelId,
        responder_funding: FundingSource,
        responder_state_sig: Signature,
    },
    ChanFund {
        channel: ChannelId,
        esc_version: u64,
    },
    Update {
        channel: ChannelId,
        state_counter: u64,
        balances: BalancePair,
        state_nonce: Nonce,
        state_hstate: Digest,
        proposer_state_sig: Signature,
        t_delta: u64,
    },
    UpdateSuccess {
        channel: ChannelId,
        state: VersionedState,
        t_delta: u64,
    },
    Dispute {
        scid: Scid,
        channel: ChannelId,
        disputed_tx: Digest,
        disputed_counter: u64,
    },
    DisputeEvidence {
        channel: ChannelId,
        state: VersionedState,
    },
    DisputeClose {
        channel: ChannelId,
        resolved: bool,
        evidence_counter: u64,
    },
    Finalise {
        channel: ChannelId,
        trigger: CloseTrigger,
        state: VersionedState,
    },
    FinaliseAck {
        channel: ChannelId,
        state_counter: u64,
    },
}

impl Body {
    pub fn kind(&self) -> MsgKind {
        match self {
            Body::MscInit { .. } => MsgKind::MscInit,
            Body::MscInitAck { .. } => MsgKind::MscInitAck,
            Body::MscConfirm { .. } => MsgKind::MscConfirm,
            Body::EscInit { .. } => MsgKind::EscInit,
            Body::EscInitAck { .. } => MsgKind::EscInitAck,
            Body::EscConfirm { .. } => MsgKind::EscConfirm,
            Body::ChanOpen { .. } => MsgKind::ChanOpen,
            Body::ChanOpenAck { .. } => MsgKind::ChanOpenAck,
            Body::ChanFund { .. } => MsgKind::ChanFund,
            Body::Update { .. } => MsgKind::Update,
            Body::UpdateSuccess { .. } => MsgKind::UpdateSuccess,
            Body::Dispute { .. } => MsgKind::Dispute,
            Body::DisputeEvidence { .. } => MsgKind::DisputeEvidence,
            Body::DisputeClose { .. } => MsgKind::DisputeClose,
            Body::Finalise { .. } => MsgKind::Finalise,
            Body::FinaliseAck { .. } => MsgKind::FinaliseAck,
        }
    }

    pub fn canonical_value(&self) -> Value {
        let mut fields = alloc::vec![Value::U64(self.kind().byte() as u64)];
        match self {
            Body::MscInit {
                participant,
                merchant,
                participant_vkey,
                true_identity,
                use_cns,
                collateral_escrow,
                claim_secret,
            } => {
                fields.push(Value::bytes(participant.0));
                fields.push(Value::bytes(merchant.0));
                fields.push(Value::bytes(participant_vkey.0));
                fields.push(Value::bytes(true_identity.as_bytes()));
                fields.push(Value::U64(*use_cns as u64));
                fields.push(Value::list(
                    collateral_escrow
                        .iter()
                        .map(|e| Value::U64(e.0))
                        .collect::<Vec<_>>(),
                ));
                fields.push(Value::list(
                    claim_secret
                        .iter()
                        .map(|s| Value::bytes(*s))
                        .collect::<Vec<_>>(),
                ));
            }
            Body::MscInitAck {
                sid,
                merchant_vkey,
                record_digest,
                merchant_record_sig,
                merchant_sig_counter,
            } => {
                fields.push(Value::bytes(sid.0));
                fields.push(Value::bytes(merchant_vkey.0));
                fields.push(Value::bytes(record_digest.0));
                fields.push(Value::bytes(merchant_record_sig.0));
                fields.push(Value::U64(*merchant_sig_counter));
            }
            Body::MscConfirm {
                sid,
                participant_record_sig,
                participant_sig_counter,
            } => {
                fields.push(Value::bytes(sid.0));
                fields.push(Value::bytes(participant_record_sig.0));
                fields.push(Value::U64(*participant_sig_counter));
            }
            Body::EscInit {
                initiator,
                peer,
                fresh_vkey,
                collateral_notice,
            } => {
                fields.push(Value::bytes(initiator.0));
                fields.push(Value::bytes(peer.0));
                fields.push(Value::bytes(fresh_vkey.0));
                fields.push(Value::list(
                    collateral_notice
                        .iter()
                        .map(|n| n.canonical_value())
                        .collect::<Vec<_>>(),
                ));
            }
            Body::EscInitAck {
                scid,
                fresh_vkey,
                collateral_notice,
            } => {
                fields.push(Value::bytes(scid.0));
                fields.push(Value::bytes(fresh_vkey.0));
                fields.push(Value::list(
                    collateral_notice
                        .iter()
                        .map(|n| n.canonical_value())
                        .collect::<Vec<_>>(),
                ));
            }
            Body::EscConfirm {
                scid,
                record_digest,
                record_sig,
                record_sig_counter,
            } => {
                fields.push(Value::bytes(scid.0));
                fields.push(Value::bytes(record_digest.0));
                fields.push(Value::bytes(record_sig.0));
                fields.push(Value::U64(*record_sig_counter));
            }
            Body::ChanOpen {
                scid,
                channel,
                initiator_funding,
                responder_coins,
                responder_packets,
                state_counter,
                balances,
                state_nonce,
                state_hstate,
                initiator_state_sig,
                identity,
                t_delta,
            } => {
                fields.push(Value::bytes(scid.0));
                fields.push(Value::bytes(channel.0));
                fields.push(funding_value(initiator_funding));
                fields.push(Value::U64(*responder_coins));
                fields.push(Value::U64(*responder_packets));
                fields.push(Value::U64(*state_counter));
                fields.push(balances.canonical_value());
                fields.push(Value::bytes(state_nonce.0));
                fields.push(Value::bytes(state_hstate.0));
                fields.push(Value::bytes(initiator_state_sig.0));
                fields.push(Value::bytes(identity.0));
                fields.push(Value::U64(*t_delta));
            }
            Body::ChanOpenAck {
                channel,
                responder_funding,
                responder_state_sig,
            } => {
                fields.push(Value::bytes(channel.0));
                fields.push(funding_value(responder_funding));
                fields.push(Value::bytes(responder_state_sig.0));
            }
            Body::ChanFund {
                channel,
                esc_version,
            } => {
                fields.push(Value::bytes(channel.0));
                fields.push(Value::U64(*esc_version));
            }
            Body::Update {
                channel,
                state_counter,
                balances,
                state_nonce,
                state_hstate,
                proposer_state_sig,
                t_delta,
            } => {
                fields.push(Value::bytes(channel.0));
                fields.push(Value::U64(*state_counter));
                fields.push(balances.canonical_value());
                fields.push(Value::bytes(state_nonce.0));
                fields.push(Value::bytes(state_hstate.0));
                fields.push(Value::bytes(proposer_state_sig.0));
                fields.push(Value::U64(*t_delta));
            }
            Body::UpdateSuccess {
                channel,
                state,
                t_delta,
            } => {
                fields.push(Value::bytes(channel.0));
                fields.push(versioned_state_value(state));
                fields.push(Value::U64(*t_delta));
            }
            Body::Dispute {
                scid,
                channel,
                disputed_tx,
                disputed_counter,
            } => {
                fields.push(Value::bytes(scid.0));
                fields.push(Value::bytes(channel.0));
                fields.push(Value::bytes(disputed_tx.0));
                fields.push(Value::U64(*disputed_counter));
            }
            Body::DisputeEvidence { channel, state } => {
                fields.push(Value::bytes(channel.0));
                fields.push(versioned_state_value(state));
            }
            Body::DisputeClose {
                channel,
                resolved,
                evidence_counter,
            } => {
                fields.push(Value::bytes(channel.0));
                fields.push(Value::U64(*resolved as u64));
                fields.push(Value::U64(*evidence_counter));
            }
            Body::Finalise {
                channel,
                trigger,
                state,
            } => {
                fields.push(Value::bytes(channel.0));
                fields.push(Value::U64(match trigger {
                    CloseTrigger::FundsDepleted => 0,
                    CloseTrigger::TradeComplete => 1,
                    CloseTrigger::TimerElapsed => 2,
                    CloseTrigger::DisputeUnresolved => 3,
                }));
                fields.push(versioned_state_value(state));
            }
            Body::FinaliseAck {
                channel,
                state_counter,
            } => {
                fields.push(Value::bytes(channel.0));
                fields.push(Value::U64(*state_counter));
            }
        }
        Value::List(fields)
    }
}

/// A complete signed protocol message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub sender: PartyId,
    pub counter: MsgCounter,
    pub nonce: Nonce,
    pub hstate: Digest,
    pub body: Body,
    pub sig: Signature,
}

impl ProtocolMessage {
    /// Build and sign a message: `hstate` commits the body together with the
    /// nonce; the signature covers `(hstate, counter)`.
    pub fn build(
        sender: PartyId,
        counter: MsgCounter,
        nonce: Nonce,
        body: Body,
        key: &KeyPair,
    ) -> Self {
        let hstate = crypto::hash_state(&body.canonical_value(), &nonce);
        let sig = crypto::sign(key, &hstate, counter.signed_value());
        Self {
            sender,
            counter,
            nonce,
            hstate,
            body,
            sig,
        }
    }

    pub fn kind(&self) -> MsgKind {
        self.body.kind()
    }

    /// Recompute `hstate` from the body and verify the signature. Returns
    /// `false` on any mismatch; never faults.
    pub fn verify(&self, vkey: &VerifyKey) -> bool {
        let expect = crypto::hash_state(&self.body.canonical_value(), &self.nonce);
        expect == self.hstate
            && crypto::verify(vkey, &self.hstate, self.counter.signed_value(), &self.sig)
    }

    /// Canonical wire length in bytes: what the leakage function reports.
    pub fn canonical_len(&self) -> usize {
        self.body.canonical_value().encode().len()
            + crypto::NONCE_LEN
            + crypto::DIGEST_LEN
            + crypto::SIGNATURE_LEN
            + 9
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::gen_keypair;

    fn sample_message() -> (ProtocolMessage, crypto::KeyPair) {
        let key = gen_keypair([21u8; 32]);
        let msg = ProtocolMessage::build(
            PartyId(0),
            MsgCounter::request(7),
            Nonce([9u8; 16]),
            Body::Dispute {
                scid: Scid([1u8; 16]),
                channel: ChannelId([2u8; 16]),
                disputed_tx: crypto::hash_bytes(b"tx"),
                disputed_counter: 3,
            },
            &key,
        );
        (msg, key)
    }

    #[test]
    fn message_round_trip_verifies() {
        let (msg, key) = sample_message();
        assert!(msg.verify(&key.verify_key()));
    }

    #[test]
    fn tampered_body_fails() {
        let (mut msg, key) = sample_message();
        if let Body::Dispute {
            disputed_counter, ..
        } = &mut msg.body
        {
            *disputed_counter = 4;
        }
        assert!(!msg.verify(&key.verify_key()));
    }

    #[test]
    fn reply_flag_distinguishes_counters() {
        assert_ne!(
            MsgCounter::request(3).signed_value(),
            MsgCounter::reply_to(3).signed_value()
        );
        assert_ne!(
            MsgCounter::reply_to(1).signed_value(),
            MsgCounter::request(3).signed_value()
        );
    }

    #[test]
    fn kind_bytes_are_distinct() {
        let kinds = [
            MsgKind::MscInit,
            MsgKind::MscInitAck,
            MsgKind::MscConfirm,
            MsgKind::EscInit,
            MsgKind::EscInitAck,
            MsgKind::EscConfirm,
            MsgKind::ChanOpen,
            MsgKind::ChanOpenAck,
            MsgKind::ChanFund,
            MsgKind::Update,
            MsgKind::UpdateSuccess,
            MsgKind::Dispute,
            MsgKind::DisputeEvidence,
            MsgKind::DisputeClose,
            MsgKind::Finalise,
            MsgKind::FinaliseAck,
        ];
        let mut bytes: Vec<u8> = kinds.iter().map(|k| k.byte()).collect();
        bytes.sort_unstable();
        bytes.dedup();
        assert_eq!(bytes.len(), kinds.len());
    }
}
