//! Trace events, the chained trace hash, run reports, and the invariant
//! verifier.
//!
//! The verifier consumes the event stream one record at a time, so the same
//! code path powers both the live run (events fed as they are emitted) and
//! offline `verify` over a trace file. A run report therefore always agrees
//! with an offline re-check of its own trace.
//!
//! The trace hash chains SHA-256 over each event's serialized form; the
//! closing `run-end` record carries the hash of everything before it, making
//! a trace file self-authenticating.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cns::SettlementReport;
use crate::crypto::{self, Digest};
use crate::ledger::LedgerDump;

/// One record in the JSON-lines trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub round: u64,
    pub height: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Event {
    Genesis {
        scenario: String,
        seed: u64,
        supply: u64,
        parties: Vec<String>,
        corrupted: Vec<String>,
        accounts: Vec<(String, u64)>,
    },
    /// A scheduled environment action was issued.
    Action {
        desc: String,
    },
    /// An environment request a non-malicious entity answers with ⊥.
    Refused {
        op: String,
        reason: String,
    },
    /// A protocol flow aborted (verification failure or peer silence).
    Aborted {
        flow: String,
        reason: String,
    },
    /// A received message was rejected with an error class; no state change.
    Rejected {
        op: String,
        error: String,
    },
    Sent {
        msg_id: u64,
        sender: String,
        receiver: String,
        kind: String,
        deliver_round: u64,
    },
    Delivered {
        msg_id: u64,
        sender: String,
        receiver: String,
        kind: String,
    },
    LeakObserved {
        sender: String,
        receiver: String,
        payload_length: usize,
    },
    Intercepted {
        msg_id: u64,
        endpoint: String,
        kind: String,
        payload_digest: String,
    },
    Transfer {
        from: String,
        to: String,
        amount: u64,
        contract_authorized: bool,
    },
    EscrowLocked {
        escrow: u64,
        owner: String,
        amount: u64,
        unlock_height: u64,
        beneficiary: String,
    },
    EscrowClaimed {
        escrow: u64,
        amount: u64,
        beneficiary: String,
    },
    EscrowRefunded {
        escrow: u64,
        amount: u64,
        owner: String,
    },
    ContractCommitted {
        kind: String,
        id: String,
        version: u64,
    },
    ChannelOpened {
        channel: String,
        scid: String,
        coins_i: u64,
        coins_j: u64,
        packets_i: u64,
        packets_j: u64,
        credit_i: bool,
        credit_j: bool,
        t_delta: u64,
        expires_at: u64,
    },
    /// A co-signed version stored by one endpoint.
    UpdateAccepted {
        channel: String,
        endpoint: String,
        counter: u64,
        coins_i: u64,
        coins_j: u64,
        packets_i: u64,
        packets_j: u64,
    },
    DisputeRaised {
        channel: String,
        dispute_index: u64,
        raiser: String,
        disputed_counter: u64,
        t_end: u64,
        /// MSC mirrors this dispute must produce (merchants carry no MSC of
        /// their own).
        expected_mirrors: u64,
    },
    DisputeResolved {
        channel: String,
        dispute_index: u64,
        evidence_counter: u64,
    },
    DisputeUnresolved {
        channel: String,
        dispute_index: u64,
    },
    DisputeMirrored {
        channel: String,
        dispute_index: u64,
        sid: String,
    },
    ChannelClosed {
        channel: String,
        trigger: String,
        final_counter: u64,
        coins_i: u64,
        coins_j: u64,
        packets_i: u64,
        packets_j: u64,
    },
    NoteIssued {
        note: u64,
        scid: String,
        debtor: String,
        amount: u64,
        outstanding: u64,
        limit: u64,
    },
    NoteFinalised {
        note: u64,
        final_share: u64,
        debt: u64,
        surplus: u64,
    },
    CreditReviewed {
        applicant: String,
        merchant: String,
        outcome: String,
    },
    CollateralDeposited {
        escrow: u64,
        amount: u64,
        unlock_height: u64,
    },
    SettlementRun {
        merchant: String,
        period_end: u64,
        draws: Vec<(u64, u64)>,
        payouts: Vec<(String, String, u64)>,
        refunds: Vec<(u64, u64)>,
        unrecovered: Vec<(String, u64)>,
    },
    GreyListed {
        party: String,
    },
    BlackListed {
        party: String,
    },
    WatcherFired {
        watcher: String,
    },
    /// An invariant check failed; reported, never thrown.
    InvariantViolation {
        name: String,
        detail: String,
    },
    RunEnd {
        rounds: u64,
        events: u64,
        trace_hash: String,
    },
}

/// Append-only trace with a running chained hash.
#[derive(Debug)]
pub struct Trace {
    events: Vec<TraceEvent>,
    chain: Digest,
}

impl Trace {
    pub fn new() -> Self {
        Self {
            events: Vec::new(),
            chain: crypto::hash_bytes(b"chanforge-trace-v1"),
        }
    }

    pub fn push(&mut self, event: TraceEvent) {
        // the closing record carries the hash, so it is excluded from it
        if !matches!(event.event, Event::RunEnd { .. }) {
            let line = serde_json::to_string(&event).expect("trace events always serialize");
            let mut buf = Vec::with_capacity(64 + line.len());
            buf.extend_from_slice(&self.chain.0);
            buf.extend_from_slice(&crypto::hash_bytes(line.as_bytes()).0);
            self.chain = crypto::hash_bytes(&buf);
        }
        self.events.push(event);
    }

    pub fn next_seq(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn hash_hex(&self) -> String {
        self.chain.to_hex()
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

/// Recompute the chained hash over a slice of events (excluding any
/// `run-end` records).
pub fn compute_trace_hash(events: &[TraceEvent]) -> String {
    let mut trace = Trace::new();
    for e in events {
        if !matches!(e.event, Event::RunEnd { .. }) {
            trace.push(e.clone());
        }
    }
    trace.hash_hex()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantResult {
    pub name: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_violation_seq: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// The invariant names evaluated by every run and by offline verification.
pub const INVARIANT_NAMES: &[&str] = &[
    "conservation",
    "no-negative-balance",
    "escrow-linearity",
    "fifo-order",
    "channel-conservation",
    "monotone-versions",
    "credit-limit",
    "dispute-mirroring",
    "leak-confidentiality",
    "append-only-history",
    "privacy-masking",
];

/// Event-stream invariant checker. Feed events in order, then call
/// [`Verifier::finish`].
#[derive(Debug, Default)]
pub struct Verifier {
    supply: u128,
    balances: BTreeMap<String, i128>,
    locked: BTreeMap<u64, u64>,
    consumed_escrows: BTreeSet<u64>,
    parties: Vec<String>,
    corrupted: BTreeSet<String>,
    // per (sender, receiver): last delivered msg_id
    last_delivered: BTreeMap<(String, String), u64>,
    // per channel: (total coins, total packets)
    channel_totals: BTreeMap<String, (u128, u128)>,
    // per (channel, endpoint): last stored counter
    endpoint_counters: BTreeMap<(String, String), u64>,
    // per channel: closed flag
    closed_channels: BTreeSet<String>,
    // disputes awaiting their MSC mirrors: (channel, index) -> (expected, seen)
    dispute_mirrors: BTreeMap<(String, u64), (u64, u64)>,
    violations: BTreeMap<String, (u64, String)>,
}

impl Verifier {
    pub fn new() -> Self {
        Self::default()
    }

    fn flag(&mut self, name: &str, seq: u64, detail: String) {
        self.violations
            .entry(name.to_string())
            .or_insert((seq, detail));
    }

    /// Record a violation detected outside the event stream (the engine's
    /// direct ledger cross-checks and end-of-run sweeps).
    pub fn flag_external(&mut self, name: &str, seq: u64, detail: String) {
        self.flag(name, seq, detail);
    }

    fn check_conservation(&mut self, seq: u64) {
        let total: i128 = self.balances.values().sum::<i128>()
            + self.locked.values().map(|v| *v as i128).sum::<i128>();
        if total != self.supply as i128 {
            self.flag(
                "conservation",
                seq,
                format!("circulating {total} != supply {}", self.supply),
            );
        }
        for (addr, bal) in &self.balances {
            if *bal < 0 {
                let detail = format!("account {addr} at {bal}");
                self.violations
                    .entry("no-negative-balance".to_string())
                    .or_insert((seq, detail));
            }
        }
    }

    fn scan_onchain_tokens(&mut self, seq: u64, text: &str) {
        let hit = self
            .parties
            .iter()
            .find(|name| !name.is_empty() && text.contains(name.as_str()))
            .cloned();
        if let Some(name) = hit {
            self.flag(
                "privacy-masking",
                seq,
                format!("true identity {name:?} appears in on-chain data"),
            );
        }
    }

    pub fn consume(&mut self, event: &TraceEvent) {
        let seq = event.seq;
        match &event.event {
            Event::Genesis {
                supply,
                parties,
                corrupted,
                accounts,
                ..
            } => {
                self.supply = *supply as u128;
                self.parties = parties.clone();
                self.corrupted = corrupted.iter().cloned().collect();
                for (addr, bal) in accounts {
                    *self.balances.entry(addr.clone()).or_insert(0) += *bal as i128;
                    self.scan_onchain_tokens(seq, addr);
                }
                self.check_conservation(seq);
            }
            Event::Transfer {
                from, to, amount, ..
            } => {
                *self.balances.entry(from.clone()).or_insert(0) -= *amount as i128;
                *self.balances.entry(to.clone()).or_insert(0) += *amount as i128;
                self.scan_onchain_tokens(seq, from);
                self.scan_onchain_tokens(seq, to);
                self.check_conservation(seq);
            }
            Event::EscrowLocked {
                escrow,
                owner,
                amount,
                beneficiary,
                ..
            } => {
                *self.balances.entry(owner.clone()).or_insert(0) -= *amount as i128;
                self.locked.insert(*escrow, *amount);
                self.scan_onchain_tokens(seq, owner);
                self.scan_onchain_tokens(seq, beneficiary);
                self.check_conservation(seq);
            }
            Event::EscrowClaimed {
                escrow,
                amount,
                beneficiary,
            } => {
                if !self.consumed_escrows.insert(*escrow) {
                    self.flag(
                        "escrow-linearity",
                        seq,
                        format!("escrow {escrow} consumed twice"),
                    );
                }
                if self.locked.remove(escrow).is_none() {
                    self.flag(
                        "escrow-linearity",
                        seq,
                        format!("escrow {escrow} claimed while not locked"),
                    );
                }
                *self.balances.entry(beneficiary.clone()).or_insert(0) += *amount as i128;
                self.check_conservation(seq);
            }
            Event::EscrowRefunded {
                escrow,
                amount,
                owner,
            } => {
                if !self.consumed_escrows.insert(*escrow) {
                    self.flag(
                        "escrow-linearity",
                        seq,
                        format!("escrow {escrow} consumed twice"),
                    );
                }
                if self.locked.remove(escrow).is_none() {
                    self.flag(
                        "escrow-linearity",
                        seq,
                        format!("escrow {escrow} refunded while not locked"),
                    );
                }
                *self.balances.entry(owner.clone()).or_insert(0) += *amount as i128;
                self.check_conservation(seq);
            }
            Event::Delivered {
                msg_id,
                sender,
                receiver,
                ..
            } => {
                let key = (sender.clone(), receiver.clone());
                if let Some(last) = self.last_delivered.get(&key) {
                    if msg_id <= last {
                        self.flag(
                            "fifo-order",
                            seq,
                            format!(
                                "message {msg_id} delivered after {last} for {sender}->{receiver}"
                            ),
                        );
                    }
                }
                self.last_delivered.insert(key, *msg_id);
            }
            Event::LeakObserved {
                sender, receiver, ..
            } => {
                if self.corrupted.contains(sender) || self.corrupted.contains(receiver) {
                    self.flag(
                        "leak-confidentiality",
                        seq,
                        format!(
                            "length-only leak logged for corrupted endpoint {sender}->{receiver}"
                        ),
                    );
                }
            }
            Event::Intercepted { endpoint, .. } => {
                if !self.corrupted.contains(endpoint) {
                    self.flag(
                        "leak-confidentiality",
                        seq,
                        format!("full payload observed on honest endpoint {endpoint}"),
                    );
                }
            }
            Event::ContractCommitted { kind, id, version } => {
                let key = (format!("{kind}:{id}"), String::new());
                let expected = self.endpoint_counters.get(&key).map(|v| v + 1).unwrap_or(0);
                if *version != expected {
                    self.flag(
                        "append-only-history",
                        seq,
                        format!("{kind} {id} committed version {version}, expected {expected}"),
                    );
                }
                self.endpoint_counters.insert(key, *version);
                self.scan_onchain_tokens(seq, id);
            }
            Event::ChannelOpened {
                channel,
                coins_i,
                coins_j,
                packets_i,
                packets_j,
                ..
            } => {
                self.channel_totals.insert(
                    channel.clone(),
                    (
                        *coins_i as u128 + *coins_j as u128,
                        *packets_i as u128 + *packets_j as u128,
                    ),
                );
                self.scan_onchain_tokens(seq, channel);
            }
            Event::UpdateAccepted {
                channel,
                endpoint,
                counter,
                coins_i,
                coins_j,
                packets_i,
                packets_j,
            } => {
                if let Some((coins, packets)) = self.channel_totals.get(channel) {
                    let c = *coins_i as u128 + *coins_j as u128;
                    let p = *packets_i as u128 + *packets_j as u128;
                    if c != *coins || p != *packets {
                        self.flag(
                            "channel-conservation",
                            seq,
                            format!(
                                "channel {channel} totals ({c},{p}) != funding ({coins},{packets})"
                            ),
                        );
                    }
                }
                let key = (channel.clone(), endpoint.clone());
                if let Some(last) = self.endpoint_counters.get(&key) {
                    if counter <= last {
                        self.flag(
                            "monotone-versions",
                            seq,
                            format!("channel {channel} endpoint {endpoint} stored {counter} after {last}"),
                        );
                    }
                }
                self.endpoint_counters.insert(key, *counter);
            }
            Event::ChannelClosed {
                channel,
                coins_i,
                coins_j,
                packets_i,
                packets_j,
                ..
            } => {
                if let Some((coins, packets)) = self.channel_totals.get(channel) {
                    let c = *coins_i as u128 + *coins_j as u128;
                    let p = *packets_i as u128 + *packets_j as u128;
                    if c != *coins || p != *packets {
                        self.flag(
                            "channel-conservation",
                            seq,
                            format!("close of {channel} settles ({c},{p}) != funding ({coins},{packets})"),
                        );
                    }
                }
                self.closed_channels.insert(channel.clone());
            }
            Event::NoteIssued {
                outstanding, limit, ..
            } => {
                if outstanding > limit {
                    self.flag(
                        "credit-limit",
                        seq,
                        format!("outstanding {outstanding} over limit {limit}"),
                    );
                }
            }
            Event::DisputeRaised {
                channel,
                dispute_index,
                expected_mirrors,
                ..
            } => {
                self.dispute_mirrors
                    .entry((channel.clone(), *dispute_index))
                    .or_insert((*expected_mirrors, 0))
                    .0 = *expected_mirrors;
            }
            Event::DisputeMirrored {
                channel,
                dispute_index,
                sid,
            } => {
                self.dispute_mirrors
                    .entry((channel.clone(), *dispute_index))
                    .or_insert((0, 0))
                    .1 += 1;
                self.scan_onchain_tokens(seq, sid);
            }
            _ => {}
        }
    }

    pub fn finish(mut self, final_seq: u64) -> Vec<InvariantResult> {
        let unmirrored: Vec<String> = self
            .dispute_mirrors
            .iter()
            .filter(|(_, (expected, seen))| seen < expected)
            .map(|((ch, idx), (expected, seen))| {
                format!("{ch}#{idx} has {seen} of {expected} MSC mirrors")
            })
            .collect();
        if let Some(first) = unmirrored.first() {
            self.flag("dispute-mirroring", final_seq, first.clone());
        }
        INVARIANT_NAMES
            .iter()
            .map(|name| match self.violations.get(*name) {
                Some((seq, detail)) => InvariantResult {
                    name: name.to_string(),
                    pass: false,
                    first_violation_seq: Some(*seq),
                    detail: Some(detail.clone()),
                },
                None => InvariantResult {
                    name: name.to_string(),
                    pass: true,
                    first_violation_seq: None,
                    detail: None,
                },
            })
            .collect()
    }

    /// Names that currently have a recorded violation.
    pub fn violated_names(&self) -> Vec<String> {
        self.violations.keys().cloned().collect()
    }
}

/// Offline re-check of a trace: runs the verifier over the events and
/// cross-checks the self-authenticating hash in the `run-end` record.
pub fn verify_trace(events: &[TraceEvent]) -> (Vec<InvariantResult>, Option<String>) {
    let mut verifier = Verifier::new();
    for e in events {
        verifier.consume(e);
    }
    let final_seq = events.last().map(|e| e.seq).unwrap_or(0);
    let results = verifier.finish(final_seq);
    let hash_mismatch = events.iter().find_map(|e| match &e.event {
        Event::RunEnd { trace_hash, .. } => {
            let actual = compute_trace_hash(events);
            (actual != *trace_hash).then(|| format!("recorded {trace_hash}, recomputed {actual}"))
        }
        _ => None,
    });
    (results, hash_mismatch)
}

/// Final run outcome: invariant verdicts, settlement reports, ledger dump,
/// and the trace hash.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub rounds: u64,
    pub event_count: u64,
    pub trace_hash: String,
    pub invariants: Vec<InvariantResult>,
    pub refusals: u64,
    pub aborts: u64,
    pub settlements: Vec<SettlementReport>,
    pub final_ledger: LedgerDump,
}

impl RunReport {
    pub fn all_pass(&self) -> bool {
        self.invariants.iter().all(|i| i.pass)
    }

    pub fn invariant(&self, name: &str) -> Option<&InvariantResult> {
        self.invariants.iter().find(|i| i.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(seq: u64, event: Event) -> TraceEvent {
        TraceEvent {
            seq,
            round: 0,
            height: 0,
            actor: None,
            event,
        }
    }

    fn genesis(accounts: &[(&str, u64)]) -> TraceEvent {
        ev(
            0,
            Event::Genesis {
                scenario: "t".to_string(),
                seed: 1,
                supply: accounts.iter().map(|(_, b)| b).sum(),
                parties: alloc::vec!["alice".to_string(), "bob".to_string()],
                corrupted: Vec::new(),
                accounts: accounts.iter().map(|(a, b)| (a.to_string(), *b)).collect(),
            },
        )
    }

    #[test]
    fn clean_stream_passes_all() {
        let events = [
            genesis(&[("addr1", 100), ("addr2", 50)]),
            ev(
                1,
                Event::Transfer {
                    from: "addr1".to_string(),
                    to: "addr2".to_string(),
                    amount: 30,
                    contract_authorized: false,
                },
            ),
        ];
        let (results, hash) = verify_trace(&events);
        assert!(results.iter().all(|r| r.pass), "{results:?}");
        assert!(hash.is_none());
    }

    #[test]
    fn edited_amount_breaks_conservation() {
        let events = [
            genesis(&[("addr1", 100)]),
            // claims to credit more than it debits anywhere
            ev(
                1,
                Event::EscrowClaimed {
                    escrow: 7,
                    amount: 40,
                    beneficiary: "addr1".to_string(),
                },
            ),
        ];
        let (results, _) = verify_trace(&events);
        let conservation = results.iter().find(|r| r.name == "conservation").unwrap();
        assert!(!conservation.pass);
        assert_eq!(conservation.first_violation_seq, Some(1));
    }

    #[test]
    fn double_consume_flagged() {
        let events = [
            genesis(&[("addr1", 100)]),
            ev(
                1,
                Event::EscrowLocked {
                    escrow: 0,
                    owner: "addr1".to_string(),
                    amount: 50,
                    unlock_height: 5,
                    beneficiary: "addr2".to_string(),
                },
            ),
            ev(
                2,
                Event::EscrowRefunded {
                    escrow: 0,
                    amount: 50,
                    owner: "addr1".to_string(),
                },
            ),
            ev(
                3,
                Event::EscrowRefunded {
                    escrow: 0,
                    amount: 50,
                    owner: "addr1".to_string(),
                },
            ),
        ];
        let (results, _) = verify_trace(&events);
        assert!(
            !results
                .iter()
                .find(|r| r.name == "escrow-linearity")
                .unwrap()
                .pass
        );
    }

    #[test]
    fn fifo_violation_flagged() {
        let mk = |seq, id| {
            ev(
                seq,
                Event::Delivered {
                    msg_id: id,
                    sender: "alice".to_string(),
                    receiver: "bob".to_string(),
                    kind: "update".to_string(),
                },
            )
        };
        let events = [genesis(&[]), mk(1, 5), mk(2, 3)];
        let (results, _) = verify_trace(&events);
        assert!(
            !results
                .iter()
                .find(|r| r.name == "fifo-order")
                .unwrap()
                .pass
        );
    }

    #[test]
    fn true_name_on_chain_flagged() {
        let events = [
            genesis(&[("addr1", 10)]),
            ev(
                1,
                Event::Transfer {
                    from: "addr1".to_string(),
                    to: "acct-of-alice".to_string(),
                    amount: 0,
                    contract_authorized: false,
                },
            ),
        ];
        let (results, _) = verify_trace(&events);
        assert!(
            !results
                .iter()
                .find(|r| r.name == "privacy-masking")
                .unwrap()
                .pass
        );
    }

    #[test]
    fn trace_hash_is_deterministic_and_self_authenticating() {
        let mut t1 = Trace::new();
        let mut t2 = Trace::new();
        for t in [&mut t1, &mut t2] {
            t.push(genesis(&[("a", 1)]));
        }
        assert_eq!(t1.hash_hex(), t2.hash_hex());

        let mut events = t1.into_events();
        let hash = compute_trace_hash(&events);
        events.push(ev(
            1,
            Event::RunEnd {
                rounds: 0,
                events: 1,
                trace_hash: hash,
            },
        ));
        let (_, mismatch) = verify_trace(&events);
        assert!(mismatch.is_none());

        // tamper: hash check fails
        if let Event::Genesis { supply, .. } = &mut events[0].event {
            *supply = 999;
        }
        let (_, mismatch) = verify_trace(&events);
        assert!(mismatch.is_some());
    }
}
