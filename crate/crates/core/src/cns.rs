//! Credit-Note System: application review, collateral agreements, credit
//! note issuance against a limit, and period-end billing.
//!
//! Participants that pass the merchant's checks can fund channels with
//! merchant-signed credit notes instead of locked coins. The merchant holds
//! time-locked collateral sized to the credit limit; at the end of each
//! billing period the outstanding notes are cleared against it. Rejected
//! applicants can still use the protocol with locked deposits, just not the
//! CNS.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::crypto::{self, Digest, Signature, Value, VerifyKey};
use crate::{Address, EscrowId, NoteId, PartyId, Scid, Uutid};

/// Merchant policy knobs, loaded from the scenario's policy file. The margin
/// is expressed in percent so collateral arithmetic stays exact:
/// `required_collateral = ceil(credit_limit * margin_percent / 100)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnsPolicy {
    #[serde(default)]
    pub blacklist: Vec<String>,
    #[serde(default = "default_margin_percent")]
    pub margin_percent: u64,
    /// Raised-dispute count at which an applicant is grey-listed (and new
    /// credit refused).
    #[serde(default = "default_grey_threshold")]
    pub grey_threshold: u32,
    /// Raised-dispute count at which a party is blacklisted outright.
    #[serde(default = "default_black_threshold")]
    pub black_threshold: u32,
    /// Billing period length in blocks.
    #[serde(default = "default_period_blocks")]
    pub period_blocks: u64,
    /// Collateral time-lock window in blocks.
    #[serde(default = "default_collateral_window")]
    pub collateral_window: u64,
    /// Minimum declared liability for an application to be considered.
    #[serde(default)]
    pub min_liability: u64,
    /// Counterparties verify the merchant's collateral signature during ESC
    /// setup (on by default).
    #[serde(default = "default_true")]
    pub verify_collateral_sig: bool,
}

fn default_margin_percent() -> u64 {
    100
}
fn default_grey_threshold() -> u32 {
    3
}
fn default_black_threshold() -> u32 {
    5
}
fn default_period_blocks() -> u64 {
    100
}
fn default_collateral_window() -> u64 {
    50
}
fn default_true() -> bool {
    true
}

impl Default for CnsPolicy {
    fn default() -> Self {
        Self {
            blacklist: Vec::new(),
            margin_percent: default_margin_percent(),
            grey_threshold: default_grey_threshold(),
            black_threshold: default_black_threshold(),
            period_blocks: default_period_blocks(),
            collateral_window: default_collateral_window(),
            min_liability: 0,
            verify_collateral_sig: true,
        }
    }
}

impl CnsPolicy {
    pub fn required_collateral(&self, credit_limit: u64) -> u64 {
        // ceil(limit * margin / 100) in integer arithmetic
        let product = credit_limit as u128 * self.margin_percent as u128;
        product.div_ceil(100) as u64
    }
}

/// A credit application: supporting documents are opaque blobs checked by a
/// boolean policy predicate; the declared liability bounds the credit limit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditApplication {
    pub applicant: PartyId,
    pub supporting_docs: Vec<u8>,
    pub declared_liability: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    #[error("applicant is blacklisted")]
    Blacklisted,
    #[error("applicant has too many raised disputes")]
    ExcessiveDisputes,
    #[error("declared liability insufficient")]
    InsufficientLiability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum CnsError {
    #[error("credit limit exceeded")]
    CreditLimitExceeded,
    #[error("insufficient funds for collateral")]
    InsufficientFunds,
    #[error("settlement requested before period end")]
    PrematureSettlement,
    #[error("no credit agreement")]
    NoAgreement,
}

/// A merchant-signed credit agreement: the outcome of a successful review,
/// carrying the granted limit and the collateral the applicant must post.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditAgreement {
    pub applicant: Uutid,
    pub merchant: Uutid,
    pub credit_limit: u64,
    pub required_collateral: u64,
    pub valid_until: u64,
    pub merchant_sig: Signature,
}

impl CreditAgreement {
    pub fn canonical_value_unsigned(
        applicant: Uutid,
        merchant: Uutid,
        credit_limit: u64,
        required_collateral: u64,
        valid_until: u64,
    ) -> Value {
        Value::list([
            Value::bytes(b"credit-agreement"),
            Value::bytes(applicant.0),
            Value::bytes(merchant.0),
            Value::U64(credit_limit),
            Value::U64(required_collateral),
            Value::U64(valid_until),
        ])
    }

    pub fn signing_digest(&self) -> Digest {
        crypto::hash_bytes(
            &Self::canonical_value_unsigned(
                self.applicant,
                self.merchant,
                self.credit_limit,
                self.required_collateral,
                self.valid_until,
            )
            .encode(),
        )
    }

    pub fn verify(&self, merchant_vkey: &VerifyKey) -> bool {
        crypto::verify(merchant_vkey, &self.signing_digest(), 0, &self.merchant_sig)
    }
}

/// What the merchant knows about an applicant when reviewing: the true
/// identity disclosed during KYC, the masked on-chain identity, and the
/// dispute count from the registry.
pub struct ReviewContext<'a> {
    pub applicant_name: &'a str,
    pub applicant_uutid: Uutid,
    pub raised_disputes: u32,
}

/// Review an application against the policy. Acceptance yields a signed
/// agreement; rejection carries a reason code. A rejected applicant can
/// still trade with locked deposits.
pub fn review_application(
    app: &CreditApplication,
    ctx: &ReviewContext<'_>,
    merchant_uutid: Uutid,
    merchant_key: &crypto::KeyPair,
    policy: &CnsPolicy,
    height: u64,
) -> Result<CreditAgreement, Rejection> {
    let applicant_uutid = ctx.applicant_uutid;
    if policy.blacklist.iter().any(|b| b == ctx.applicant_name) {
        return Err(Rejection::Blacklisted);
    }
    if ctx.raised_disputes >= policy.grey_threshold {
        return Err(Rejection::ExcessiveDisputes);
    }
    if app.declared_liability < policy.min_liability
        || app.declared_liability == 0
        || app.supporting_docs.is_empty()
    {
        return Err(Rejection::InsufficientLiability);
    }
    let credit_limit = app.declared_liability;
    let required_collateral = policy.required_collateral(credit_limit);
    let valid_until = height + policy.collateral_window;
    let digest = crypto::hash_bytes(
        &CreditAgreement::canonical_value_unsigned(
            applicant_uutid,
            merchant_uutid,
            credit_limit,
            required_collateral,
            valid_until,
        )
        .encode(),
    );
    Ok(CreditAgreement {
        applicant: applicant_uutid,
        merchant: merchant_uutid,
        credit_limit,
        required_collateral,
        valid_until,
        merchant_sig: crypto::sign(merchant_key, &digest, 0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoteStatus {
    /// Funding a live channel.
    Outstanding,
    /// Channel closed; carries the debtor's final channel share and where
    /// any shortfall is owed.
    Finalised,
    /// Cleared at period-end settlement.
    Settled,
}

/// A merchant-signed debit against a participant's credit limit, used as
/// channel funding in place of locked coins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditNote {
    pub note_id: NoteId,
    pub scid: Scid,
    pub debtor: Uutid,
    pub amount: u64,
    pub merchant_sig: Signature,
    pub status: NoteStatus,
    /// Debtor's final channel coin share, set when the channel closes.
    pub final_share: Option<u64>,
    /// Counterparty owed the shortfall (debt = amount - final_share), paid
    /// out of collateral at settlement.
    pub payee: Option<Address>,
}

impl CreditNote {
    pub fn signing_digest(note_id: NoteId, scid: Scid, debtor: Uutid, amount: u64) -> Digest {
        crypto::hash_bytes(&crypto::canonical_encode(&[
            Value::bytes(b"credit-note"),
            Value::U64(note_id.0),
            Value::bytes(scid.0),
            Value::bytes(debtor.0),
            Value::U64(amount),
        ]))
    }

    pub fn canonical_value(&self) -> Value {
        Value::list([
            Value::U64(self.note_id.0),
            Value::bytes(self.scid.0),
            Value::bytes(self.debtor.0),
            Value::U64(self.amount),
            Value::U64(match self.status {
                NoteStatus::Outstanding => 0,
                NoteStatus::Finalised => 1,
                NoteStatus::Settled => 2,
            }),
            Value::list(
                self.final_share
                    .iter()
                    .map(|v| Value::U64(*v))
                    .collect::<Vec<_>>(),
            ),
        ])
    }

    /// Coins the debtor still owes the merchant on this note.
    pub fn debt(&self) -> u64 {
        match self.final_share {
            Some(share) => self.amount.saturating_sub(share),
            None => 0,
        }
    }

    /// Coins the merchant owes the debtor (note closed above its amount).
    pub fn surplus(&self) -> u64 {
        match self.final_share {
            Some(share) => share.saturating_sub(self.amount),
            None => 0,
        }
    }
}

/// Sum of open note amounts for one debtor; must never exceed the limit.
pub fn outstanding_total<'a>(notes: impl Iterator<Item = &'a CreditNote>) -> u64 {
    notes
        .filter(|n| n.status == NoteStatus::Outstanding)
        .map(|n| n.amount)
        .sum()
}

/// Check a new note against the agreement's limit.
pub fn check_note_issuable(
    agreement: &CreditAgreement,
    outstanding: u64,
    amount: u64,
) -> Result<(), CnsError> {
    if outstanding + amount > agreement.credit_limit {
        return Err(CnsError::CreditLimitExceeded);
    }
    Ok(())
}

/// Period-end settlement result: payouts and collateral draws that clear all
/// outstanding notes of the period exactly.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementReport {
    pub merchant: String,
    pub period_end: u64,
    /// Net coin delta per debtor over the period (negative = owed).
    pub nets: Vec<(String, i64)>,
    /// (from, to, amount) coin payouts executed by the merchant.
    pub payouts: Vec<(String, String, u64)>,
    /// (escrow, drawn amount) collateral draws.
    pub collateral_draws: Vec<(EscrowId, u64)>,
    /// (escrow, refunded amount) collateral returned to debtors.
    pub refunds: Vec<(EscrowId, u64)>,
    /// Debt left uncovered by collateral; debtor is blacklisted.
    pub unrecovered: Vec<(String, u64)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::gen_keypair;

    fn policy() -> CnsPolicy {
        CnsPolicy::default()
    }

    fn app(liability: u64) -> CreditApplication {
        CreditApplication {
            applicant: PartyId(0),
            supporting_docs: alloc::vec![1, 2, 3],
            declared_liability: liability,
        }
    }

    #[test]
    fn margin_one_collateral_equals_limit() {
        assert_eq!(policy().required_collateral(1000), 1000);
    }

    #[test]
    fn margin_rounds_up() {
        let p = CnsPolicy {
            margin_percent: 150,
            ..CnsPolicy::default()
        };
        assert_eq!(p.required_collateral(1000), 1500);
        let p = CnsPolicy {
            margin_percent: 101,
            ..CnsPolicy::default()
        };
        // ceil(3 * 1.01) = ceil(3.03) = 4
        assert_eq!(p.required_collateral(3), 4);
    }

    #[test]
    fn blacklisted_applicant_rejected() {
        let p = CnsPolicy {
            blacklist: alloc::vec![alloc::string::String::from("mallory")],
            ..CnsPolicy::default()
        };
        let mk = gen_keypair([1u8; 32]);
        let r = review_application(
            &app(1000),
            &ReviewContext {
                applicant_name: "mallory",
                applicant_uutid: Uutid([1; 16]),
                raised_disputes: 0,
            },
            Uutid([2; 16]),
            &mk,
            &p,
            10,
        );
        assert_eq!(r.unwrap_err(), Rejection::Blacklisted);
    }

    #[test]
    fn dispute_threshold_boundary() {
        let mk = gen_keypair([1u8; 32]);
        let p = policy();
        // at the threshold: rejected
        let r = review_application(
            &app(1000),
            &ReviewContext {
                applicant_name: "bob",
                applicant_uutid: Uutid([1; 16]),
                raised_disputes: p.grey_threshold,
            },
            Uutid([2; 16]),
            &mk,
            &p,
            10,
        );
        assert_eq!(r.unwrap_err(), Rejection::ExcessiveDisputes);
        // one below: accepted
        let r = review_application(
            &app(1000),
            &ReviewContext {
                applicant_name: "bob",
                applicant_uutid: Uutid([1; 16]),
                raised_disputes: p.grey_threshold - 1,
            },
            Uutid([2; 16]),
            &mk,
            &p,
            10,
        );
        assert!(r.is_ok());
    }

    #[test]
    fn accepted_agreement_verifies_and_sizes_collateral() {
        let mk = gen_keypair([1u8; 32]);
        let agreement = review_application(
            &app(1000),
            &ReviewContext {
                applicant_name: "alice",
                applicant_uutid: Uutid([1; 16]),
                raised_disputes: 0,
            },
            Uutid([2; 16]),
            &mk,
            &policy(),
            10,
        )
        .unwrap();
        assert_eq!(agreement.credit_limit, 1000);
        assert_eq!(agreement.required_collateral, 1000);
        assert!(agreement.verify(&mk.verify_key()));
        assert!(!agreement.verify(&gen_keypair([9u8; 32]).verify_key()));
    }

    #[test]
    fn note_limit_boundaries() {
        let mk = gen_keypair([1u8; 32]);
        let agreement = review_application(
            &app(1000),
            &ReviewContext {
                applicant_name: "alice",
                applicant_uutid: Uutid([1; 16]),
                raised_disputes: 0,
            },
            Uutid([2; 16]),
            &mk,
            &policy(),
            10,
        )
        .unwrap();
        // exactly at the limit: issued
        assert!(check_note_issuable(&agreement, 0, 1000).is_ok());
        // over the limit: refused
        assert_eq!(
            check_note_issuable(&agreement, 600, 500),
            Err(CnsError::CreditLimitExceeded)
        );
    }

    #[test]
    fn note_debt_and_surplus() {
        let mut note = CreditNote {
            note_id: NoteId(0),
            scid: Scid([0; 16]),
            debtor: Uutid([1; 16]),
            amount: 100,
            merchant_sig: Signature([0u8; 64]),
            status: NoteStatus::Finalised,
            final_share: Some(60),
            payee: None,
        };
        assert_eq!(note.debt(), 40);
        assert_eq!(note.surplus(), 0);
        note.final_share = Some(125);
        assert_eq!(note.debt(), 0);
        assert_eq!(note.surplus(), 25);
    }
}
