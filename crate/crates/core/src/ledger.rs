//! The ideal ledger: accounts, coin transfers, block height, time-locked
//! escrows, and on-chain storage of MSC/ESC records.
//!
//! Time is block height; one logical clock drives funding locks, dispute
//! deadlines and settlement periods. Coins are unsigned 64-bit integers with
//! no fees, so conservation checks are exact. All mutation happens on the
//! engine's scheduler thread; height watchers fire as the clock advances and
//! are routed back to the engine.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::channel::VersionedState;
use crate::contracts::{CommittedEsc, CommittedMsc, EscRecord, MscRecord};
use crate::crypto::{self, Digest, Signature, VerifyKey};
use crate::{Address, ChannelId, EscrowId, PartyId, Scid, Sid};

/// Authorization for committing an ESC version.
#[derive(Debug, Clone)]
pub enum EscCommitAuth {
    /// Every listed party signed this record version.
    PartySigs(Vec<(VerifyKey, u64, Signature)>),
    /// A co-signed channel state authorizes the change (open, close,
    /// unilateral submission); both parties signed the state.
    ChannelEvidence(VersionedState),
    /// Dispute remarks may be submitted unilaterally by their raiser.
    DisputeSubmission {
        raiser_vkey: VerifyKey,
        counter: u64,
        sig: Signature,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("insufficient funds")]
    InsufficientFunds,
    #[error("bad signature")]
    BadSignature,
    #[error("unknown account")]
    UnknownAccount,
    #[error("unknown escrow")]
    UnknownEscrow,
    #[error("claim before unlock height")]
    PrematureClaim,
    #[error("claim secret does not match credential")]
    BadCredential,
    #[error("escrow already consumed")]
    AlreadyConsumed,
    #[error("refund not authorized")]
    RefundNotAuthorized,
    #[error("duplicate contract id")]
    DuplicateId,
    #[error("unknown contract id")]
    UnknownContract,
    #[error("payout does not match escrowed amount")]
    PayoutMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub balance: u64,
    pub vkey: VerifyKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EscrowStatus {
    Locked,
    Claimed { height: u64 },
    Refunded { height: u64 },
}

/// Coins locked under a time-lock: claimable by the beneficiary with the
/// matching credential preimage once `unlock_height` is reached, refundable
/// to the owner otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Escrow {
    pub id: EscrowId,
    pub owner: Address,
    pub amount: u64,
    pub unlock_height: u64,
    pub beneficiary: Address,
    pub credential_digest: Digest,
    pub status: EscrowStatus,
}

impl Escrow {
    pub fn is_locked(&self) -> bool {
        matches!(self.status, EscrowStatus::Locked)
    }
}

/// Height watchers registered by the protocol layers; fired by `advance`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Watcher {
    /// Channel lifetime timer: auto-close at expiry.
    ChannelTimer { channel: ChannelId },
    /// Dispute deadline `t_end`: unresolved disputes close the channel.
    DisputeDeadline { channel: ChannelId },
    /// Challenge window after a unilateral close submission.
    CloseChallenge { channel: ChannelId },
    /// CNS billing period boundary for a merchant.
    SettlementDue { merchant: PartyId },
}

/// A committed contract version. History is append-only; each version
/// carries the committing height and the signature set it was stored with.
#[derive(Debug, Clone, Serialize)]
pub struct ContractStore {
    pub msc: BTreeMap<Sid, Vec<CommittedMsc>>,
    pub esc: BTreeMap<Scid, Vec<CommittedEsc>>,
}

impl ContractStore {
    fn new() -> Self {
        Self {
            msc: BTreeMap::new(),
            esc: BTreeMap::new(),
        }
    }
}

/// Receipt for a completed transfer, recorded in the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReceipt {
    pub from: Address,
    pub to: Address,
    pub amount: u64,
    pub height: u64,
}

#[derive(Debug)]
pub struct Ledger {
    height: u64,
    accounts: BTreeMap<Address, Account>,
    escrows: BTreeMap<EscrowId, Escrow>,
    store: ContractStore,
    watchers: BTreeMap<u64, Vec<Watcher>>,
    cancelled: BTreeSet<(u64, usize)>,
    total_supply: u64,
    next_escrow: u64,
}

impl Ledger {
    pub fn new() -> Self {
        Self {
            height: 0,
            accounts: BTreeMap::new(),
            escrows: BTreeMap::new(),
            store: ContractStore::new(),
            watchers: BTreeMap::new(),
            cancelled: BTreeSet::new(),
            total_supply: 0,
            next_escrow: 0,
        }
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn total_supply(&self) -> u64 {
        self.total_supply
    }

    /// Genesis-only: register an account with its initial balance.
    pub fn create_account(&mut self, address: Address, vkey: VerifyKey, balance: u64) {
        self.total_supply += balance;
        self.accounts.insert(address, Account { balance, vkey });
    }

    pub fn balance(&self, address: &Address) -> Option<u64> {
        self.accounts.get(address).map(|a| a.balance)
    }

    pub fn escrow(&self, id: EscrowId) -> Option<&Escrow> {
        self.escrows.get(&id)
    }

    pub fn escrows(&self) -> impl Iterator<Item = &Escrow> {
        self.escrows.values()
    }

    // -- clock ---------------------------------------------------------------

    /// Advance the chain by `blocks` (≥ 1), returning every watcher whose
    /// height was reached, in height order.
    pub fn advance(&mut self, blocks: u64) -> Vec<Watcher> {
        debug_assert!(blocks >= 1);
        let target = self.height + blocks;
        let mut fired = Vec::new();
        let due: Vec<u64> = self.watchers.range(..=target).map(|(h, _)| *h).collect();
        for h in due {
            if let Some(ws) = self.watchers.remove(&h) {
                for (idx, w) in ws.into_iter().enumerate() {
                    if !self.cancelled.remove(&(h, idx)) {
                        fired.push(w);
                    }
                }
            }
        }
        self.height = target;
        fired
    }

    /// Register a watcher to fire when `height` is reached. Returns a handle
    /// usable with [`Ledger::cancel_watcher`].
    pub fn register_watcher(&mut self, height: u64, watcher: Watcher) -> (u64, usize) {
        let slot = self.watchers.entry(height).or_default();
        slot.push(watcher);
        (height, slot.len() - 1)
    }

    pub fn cancel_watcher(&mut self, handle: (u64, usize)) {
        if handle.0 > self.height {
            self.cancelled.insert(handle);
        }
    }

    // -- transfers -----------------------------------------------------------

    /// Canonical payload a sender signs to authorize a transfer.
    pub fn transfer_payload(from: &Address, to: &Address, amount: u64, counter: u64) -> Digest {
        crypto::hash_bytes(&crypto::canonical_encode(&[
            crypto::Value::bytes(b"xfer"),
            crypto::Value::bytes(from.0.as_bytes()),
            crypto::Value::bytes(to.0.as_bytes()),
            crypto::Value::U64(amount),
            crypto::Value::U64(counter),
        ]))
    }

    /// Signed transfer between accounts. Zero-amount transfers are valid
    /// no-ops. Balances move atomically; supply is unchanged.
    pub fn transfer(
        &mut self,
        from: &Address,
        to: &Address,
        amount: u64,
        counter: u64,
        sig: &Signature,
    ) -> Result<TransferReceipt, LedgerError> {
        let from_acct = self.accounts.get(from).ok_or(LedgerError::UnknownAccount)?;
        if !self.accounts.contains_key(to) {
            return Err(LedgerError::UnknownAccount);
        }
        let payload = Self::transfer_payload(from, to, amount, counter);
        if !crypto::verify(&from_acct.vkey, &payload, counter, sig) {
            return Err(LedgerError::BadSignature);
        }
        if from_acct.balance < amount {
            return Err(LedgerError::InsufficientFunds);
        }
        self.accounts.get_mut(from).unwrap().balance -= amount;
        self.accounts.get_mut(to).unwrap().balance += amount;
        Ok(TransferReceipt {
            from: from.clone(),
            to: to.clone(),
            amount,
            height: self.height,
        })
    }

    /// Contract-authorized transfer: routes coins per a committed contract
    /// result. Callers must have verified the co-signed evidence referenced
    /// by `evidence` before invoking; the ledger records the association.
    pub(crate) fn contract_transfer(
        &mut self,
        from: &Address,
        to: &Address,
        amount: u64,
        _evidence: Digest,
    ) -> Result<TransferReceipt, LedgerError> {
        let from_acct = self.accounts.get(from).ok_or(LedgerError::UnknownAccount)?;
        if !self.accounts.contains_key(to) {
            return Err(LedgerError::UnknownAccount);
        }
        if from_acct.balance < amount {
            return Err(LedgerError::InsufficientFunds);
        }
        self.accounts.get_mut(from).unwrap().balance -= amount;
        self.accounts.get_mut(to).unwrap().balance += amount;
        Ok(TransferReceipt {
            from: from.clone(),
            to: to.clone(),
            amount,
            height: self.height,
        })
    }

    // -- escrows ---------------------------------------------------------------

    /// Debit `owner` and lock the coins until `unlock_height`. The
    /// beneficiary claims with the credential preimage once the height is
    /// reached; miners refuse earlier claims.
    pub fn lock_escrow(
        &mut self,
        owner: &Address,
        amount: u64,
        unlock_height: u64,
        beneficiary: &Address,
        credential_digest: Digest,
    ) -> Result<EscrowId, LedgerError> {
        let acct = self
            .accounts
            .get_mut(owner)
            .ok_or(LedgerError::UnknownAccount)?;
        if acct.balance < amount {
            return Err(LedgerError::InsufficientFunds);
        }
        acct.balance -= amount;
        let id = EscrowId(self.next_escrow);
        self.next_escrow += 1;
        self.escrows.insert(
            id,
            Escrow {
                id,
                owner: owner.clone(),
                amount,
                unlock_height,
                beneficiary: beneficiary.clone(),
                credential_digest,
                status: EscrowStatus::Locked,
            },
        );
        Ok(id)
    }

    /// Claim an escrow for its beneficiary. Requires the credential preimage
    /// and `height ≥ unlock_height`.
    pub fn claim_escrow(&mut self, id: EscrowId, claim_secret: &[u8]) -> Result<u64, LedgerError> {
        let height = self.height;
        let escrow = self
            .escrows
            .get_mut(&id)
            .ok_or(LedgerError::UnknownEscrow)?;
        if !escrow.is_locked() {
            return Err(LedgerError::AlreadyConsumed);
        }
        if height < escrow.unlock_height {
            return Err(LedgerError::PrematureClaim);
        }
        if crypto::hash_bytes(claim_secret) != escrow.credential_digest {
            return Err(LedgerError::BadCredential);
        }
        escrow.status = EscrowStatus::Claimed { height };
        let amount = escrow.amount;
        let beneficiary = escrow.beneficiary.clone();
        self.accounts
            .get_mut(&beneficiary)
            .ok_or(LedgerError::UnknownAccount)?
            .balance += amount;
        Ok(amount)
    }

    /// Return an escrow to its owner. The beneficiary may release at any
    /// time; the owner may reclaim once the unlock height has passed.
    pub fn refund_escrow(
        &mut self,
        id: EscrowId,
        authorized_by: &Address,
    ) -> Result<u64, LedgerError> {
        let height = self.height;
        let escrow = self
            .escrows
            .get_mut(&id)
            .ok_or(LedgerError::UnknownEscrow)?;
        if !escrow.is_locked() {
            return Err(LedgerError::AlreadyConsumed);
        }
        let by_beneficiary = authorized_by == &escrow.beneficiary;
        let by_owner_after_unlock =
            authorized_by == &escrow.owner && height >= escrow.unlock_height;
        if !(by_beneficiary || by_owner_after_unlock) {
            return Err(LedgerError::RefundNotAuthorized);
        }
        escrow.status = EscrowStatus::Refunded { height };
        let amount = escrow.amount;
        let owner = escrow.owner.clone();
        self.accounts
            .get_mut(&owner)
            .ok_or(LedgerError::UnknownAccount)?
            .balance += amount;
        Ok(amount)
    }

    // -- contracts -------------------------------------------------------------

    /// Store a new MSC record. Every listed party's signature must verify
    /// over the record's canonical encoding.
    pub fn commit_msc(
        &mut self,
        record: MscRecord,
        sigs: &[(VerifyKey, u64, Signature)],
    ) -> Result<Sid, LedgerError> {
        Self::check_record_sigs(&record.canonical_digest(), &record.signer_vkeys(), sigs)?;
        let sid = record.sid;
        let versions = self.store.msc.entry(sid).or_default();
        if record.version as usize != versions.len() {
            return Err(if record.version == 0 {
                LedgerError::DuplicateId
            } else {
                LedgerError::UnknownContract
            });
        }
        versions.push(CommittedMsc {
            record,
            sigs: sigs.to_vec(),
            height: self.height,
        });
        Ok(sid)
    }

    /// Store a new ESC record version. Three authorization paths exist:
    /// fresh signatures from every listed party, an embedded co-signed
    /// channel state (the open/close path, where the state's two signatures
    /// stand in for fresh record signatures), or a single raiser's signature
    /// for dispute submissions.
    pub fn commit_esc(
        &mut self,
        record: EscRecord,
        auth: &EscCommitAuth,
    ) -> Result<Scid, LedgerError> {
        let digest = record.canonical_digest();
        let stored_sigs: Vec<(VerifyKey, u64, Signature)> = match auth {
            EscCommitAuth::PartySigs(sigs) => {
                Self::check_record_sigs(&digest, &record.signer_vkeys(), sigs)?;
                sigs.clone()
            }
            EscCommitAuth::ChannelEvidence(state) => {
                if record.channel(state.channel).is_none() {
                    return Err(LedgerError::UnknownContract);
                }
                if !state.verify(&record.vkey_i, &record.vkey_j) {
                    return Err(LedgerError::BadSignature);
                }
                alloc::vec![
                    (record.vkey_i, state.counter, state.sig_i),
                    (record.vkey_j, state.counter, state.sig_j),
                ]
            }
            EscCommitAuth::DisputeSubmission {
                raiser_vkey,
                counter,
                sig,
            } => {
                if !record.signer_vkeys().contains(raiser_vkey) {
                    return Err(LedgerError::BadSignature);
                }
                if !crypto::verify(raiser_vkey, &digest, *counter, sig) {
                    return Err(LedgerError::BadSignature);
                }
                alloc::vec![(*raiser_vkey, *counter, *sig)]
            }
        };
        let scid = record.scid;
        let versions = self.store.esc.entry(scid).or_default();
        if record.version as usize != versions.len() {
            return Err(if record.version == 0 {
                LedgerError::DuplicateId
            } else {
                LedgerError::UnknownContract
            });
        }
        versions.push(CommittedEsc {
            record,
            sigs: stored_sigs,
            height: self.height,
        });
        Ok(scid)
    }

    fn check_record_sigs(
        digest: &Digest,
        required: &[VerifyKey],
        sigs: &[(VerifyKey, u64, Signature)],
    ) -> Result<(), LedgerError> {
        for vkey in required {
            let ok = sigs
                .iter()
                .any(|(vk, counter, sig)| vk == vkey && crypto::verify(vk, digest, *counter, sig));
            if !ok {
                return Err(LedgerError::BadSignature);
            }
        }
        Ok(())
    }

    pub fn read_msc(&self, sid: Sid) -> Option<&MscRecord> {
        self.store
            .msc
            .get(&sid)
            .and_then(|v| v.last())
            .map(|c| &c.record)
    }

    pub fn read_esc(&self, scid: Scid) -> Option<&EscRecord> {
        self.store
            .esc
            .get(&scid)
            .and_then(|v| v.last())
            .map(|c| &c.record)
    }

    pub fn msc_history(&self, sid: Sid) -> Option<&[CommittedMsc]> {
        self.store.msc.get(&sid).map(|v| v.as_slice())
    }

    pub fn esc_history(&self, scid: Scid) -> Option<&[CommittedEsc]> {
        self.store.esc.get(&scid).map(|v| v.as_slice())
    }

    pub fn store(&self) -> &ContractStore {
        &self.store
    }

    // -- conservation ------------------------------------------------------------

    /// Sum of all account balances plus all still-locked escrow amounts.
    /// Equals the initial supply at every height.
    pub fn circulating_total(&self) -> u128 {
        let accounts: u128 = self.accounts.values().map(|a| a.balance as u128).sum();
        let locked: u128 = self
            .escrows
            .values()
            .filter(|e| e.is_locked())
            .map(|e| e.amount as u128)
            .sum();
        accounts + locked
    }

    pub fn conserves_supply(&self) -> bool {
        self.circulating_total() == self.total_supply as u128
    }

    /// Snapshot of the full ledger state for golden-file tests and reports.
    pub fn dump(&self) -> LedgerDump {
        LedgerDump {
            height: self.height,
            total_supply: self.total_supply,
            accounts: self
                .accounts
                .iter()
                .map(|(addr, acct)| (addr.0.clone(), acct.balance))
                .collect(),
            escrows: self.escrows.values().cloned().collect(),
            contracts: self.store.clone(),
        }
    }
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new()
    }
}

/// JSON-serializable ledger state dump.
#[derive(Debug, Clone, Serialize)]
pub struct LedgerDump {
    pub height: u64,
    pub total_supply: u64,
    pub accounts: BTreeMap<String, u64>,
    pub escrows: Vec<Escrow>,
    pub contracts: ContractStore,
}
