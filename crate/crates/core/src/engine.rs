//! The deterministic scenario engine: a single-threaded round scheduler
//! driving party state machines over the simulated network and ledger.
//!
//! One engine instance owns everything — parties, merchant books, the
//! ledger, the network with its adversary, the trace — and shares nothing,
//! so engines can run in parallel threads with independent RNG streams.
//! A scenario plus a seed fully determines the trace: all collections are
//! ordered, all randomness comes from the seeded ChaCha20 stream, and
//! delivery order is fixed by (sender id, msg id).
//!
//! Invariants are checked eagerly after every emitted event, so a report
//! pinpoints the first violating event; violations are reported, never
//! thrown.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::channel::{
    ActiveDispute, BalancePair, ChannelError, CloseTrigger, CoinsPackets, Endpoint, FundingSource,
    PendingUpdate, Phase, Side, VersionedState,
};
use crate::cns::{self, CreditApplication, CreditNote, NoteStatus, SettlementReport};
use crate::contracts::{
    self, DisputeOutcome, DisputeRecord, EscRecord, FinaliseEvidence, MscRecord,
};
use crate::crypto::{self, Digest, KeyPair, Nonce, NonceRegistry, Signature, Value, VerifyKey};
use crate::ledger::{EscCommitAuth, Ledger, Watcher};
use crate::marketplace::{self, MarketRole};
use crate::message::{Body, CollateralNotice, MsgCounter, ProtocolMessage};
use crate::network::{DelayRule, Envelope, Network};
use crate::scenario::{Action, AdvAction, ConfigError, FundingSpec, Mode, ScenarioConfig};
use crate::trace::{Event, RunReport, Trace, TraceEvent, Verifier};
use crate::{Address, ChannelId, EscrowId, NoteId, PartyId, Scid, Sid, Uutid};

// ---------------------------------------------------------------------------
// Internal state
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct Party {
    name: String,
    uutid: Uutid,
    address: Address,
    keys: KeyPair,
    role: MarketRole,
    /// Energy packets available for channel funding.
    packets: u64,
    msg_counter: u64,
    /// MSC per merchant this party contracted with.
    mscs: BTreeMap<PartyId, Sid>,
    /// Fresh key pair per ESC.
    esc_keys: BTreeMap<Scid, KeyPair>,
    /// Credit agreements per merchant.
    agreements: BTreeMap<PartyId, cns::CreditAgreement>,
    endpoints: BTreeMap<ChannelId, Endpoint>,
    corrupted: bool,
    stalled_from: Option<u64>,
}

impl Party {
    fn next_counter(&mut self) -> u64 {
        let c = self.msg_counter;
        self.msg_counter += 1;
        c
    }

    fn is_stalled(&self, round: u64) -> bool {
        self.corrupted && self.stalled_from.map(|r| round >= r).unwrap_or(false)
    }
}

#[derive(Debug, Clone)]
struct CollateralState {
    escrow: EscrowId,
    claim_secret: [u8; 32],
}

#[derive(Debug)]
struct AgreementState {
    agreement: cns::CreditAgreement,
    collateral: Option<CollateralState>,
}

#[derive(Debug)]
struct MerchantBook {
    policy: cns::CnsPolicy,
    period_start: u64,
    dynamic_blacklist: BTreeSet<String>,
    agreements: BTreeMap<PartyId, AgreementState>,
    /// True identities disclosed during setup, kept off-chain.
    known_identities: BTreeMap<Uutid, String>,
    session_counter: u64,
    next_note: u64,
}

#[derive(Debug)]
struct EscMeta {
    party_i: PartyId,
    party_j: PartyId,
    address: Address,
    open_channel: Option<ChannelId>,
    last_channel: Option<ChannelId>,
    channel_counter: u64,
}

#[derive(Debug, Clone)]
struct PendingCloseMeta {
    state: VersionedState,
    trigger: CloseTrigger,
}

#[derive(Debug, Clone)]
struct DisputeMeta {
    raiser: PartyId,
    disputed_counter: u64,
    t_end: u64,
    index: u64,
    watcher: (u64, usize),
}

#[derive(Debug)]
struct ChannelMeta {
    scid: Scid,
    party_i: PartyId,
    party_j: PartyId,
    funding_i: FundingSource,
    funding_j: FundingSource,
    t_delta: u64,
    expires_at: u64,
    timer_watcher: Option<(u64, usize)>,
    challenge_watcher: Option<(u64, usize)>,
    pending_close: Option<PendingCloseMeta>,
    dispute: Option<DisputeMeta>,
    closed: bool,
}

impl ChannelMeta {
    fn funding_totals(&self) -> BalancePair {
        BalancePair::new(self.funding_i.amounts(), self.funding_j.amounts())
    }

    fn side_of(&self, party: PartyId) -> Side {
        if party == self.party_i {
            Side::I
        } else {
            Side::J
        }
    }

    fn other(&self, party: PartyId) -> PartyId {
        if party == self.party_i {
            self.party_j
        } else {
            self.party_i
        }
    }
}

/// In-flight multi-message protocol flows, with abort deadlines.
#[derive(Debug)]
enum Flow {
    MscInit {
        participant: PartyId,
        merchant: PartyId,
        record: Option<MscRecord>,
        merchant_sig: Option<(u64, Signature)>,
        deadline: u64,
    },
    EscInit {
        initiator: PartyId,
        peer: PartyId,
        /// Present on the initiator's side only; the peer never holds it.
        initiator_key: Option<KeyPair>,
        /// On the peer's side: the initiator's fresh key as carried in the
        /// setup message, the only key material the peer trusts.
        initiator_vkey: Option<VerifyKey>,
        scid: Option<Scid>,
        deadline: u64,
    },
    ChanOpen {
        initiator: PartyId,
        responder: PartyId,
        scid: Scid,
        channel: ChannelId,
        funding_initiator: FundingSource,
        responder_spec: FundingSpec,
        balances: BalancePair,
        state_nonce: Nonce,
        state_hstate: Digest,
        initiator_sig: Signature,
        t_delta: u64,
        deadline: u64,
    },
    Update {
        proposer: PartyId,
        channel: ChannelId,
        deadline: u64,
    },
    Close {
        initiator: PartyId,
        channel: ChannelId,
        state: VersionedState,
        trigger: CloseTrigger,
        deadline: u64,
    },
}

impl Flow {
    fn deadline(&self) -> u64 {
        match self {
            Flow::MscInit { deadline, .. }
            | Flow::EscInit { deadline, .. }
            | Flow::ChanOpen { deadline, .. }
            | Flow::Update { deadline, .. }
            | Flow::Close { deadline, .. } => *deadline,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Flow::MscInit { .. } => "msc-init",
            Flow::EscInit { .. } => "esc-init",
            Flow::ChanOpen { .. } => "chan-open",
            Flow::Update { .. } => "update",
            Flow::Close { .. } => "close",
        }
    }

    fn initiator(&self) -> PartyId {
        match self {
            Flow::MscInit { participant, .. } => *participant,
            Flow::EscInit { initiator, .. } => *initiator,
            Flow::ChanOpen { initiator, .. } => *initiator,
            Flow::Update { proposer, .. } => *proposer,
            Flow::Close { initiator, .. } => *initiator,
        }
    }
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

pub struct Engine {
    cfg: ScenarioConfig,
    rng: crypto::EngineRng,
    nonces: NonceRegistry,
    ledger: Ledger,
    net: Network,
    parties: Vec<Party>,
    merchants: BTreeMap<PartyId, MerchantBook>,
    escs: BTreeMap<Scid, EscMeta>,
    channels: BTreeMap<ChannelId, ChannelMeta>,
    pair_counters: BTreeMap<(PartyId, PartyId), u64>,
    flows: Vec<Flow>,
    /// Escrows from opens that never completed, released by the timer.
    orphaned_escrows: BTreeMap<ChannelId, Vec<(EscrowId, Address)>>,
    raised_disputes: BTreeMap<PartyId, u32>,
    blacklisted: BTreeSet<PartyId>,
    /// Cumulative closed-channel finals per (merchant, participant); the
    /// (m, m) entry tracks a merchant's own trading finals.
    msc_finals: BTreeMap<(PartyId, PartyId), CoinsPackets>,
    settlements: Vec<SettlementReport>,
    trace: Trace,
    verifier: Verifier,
    refusals: u64,
    aborts: u64,
    schedule_idx: usize,
    schedule: Vec<(u64, Action)>,
    adv_timed: Vec<AdvAction>,
}

impl Engine {
    pub fn new(cfg: ScenarioConfig) -> Result<Engine, ConfigError> {
        cfg.validate()?;
        let mut rng = crypto::rng_from_master_seed(cfg.seed);
        let mut ledger = Ledger::new();
        let mut net = Network::new(cfg.max_adversary_delay);
        let mut parties = Vec::new();
        let mut merchants = BTreeMap::new();

        for (idx, pc) in cfg.parties.iter().enumerate() {
            let id = PartyId(idx as u32);
            let mut uutid = [0u8; 16];
            rand_core::RngCore::fill_bytes(&mut rng, &mut uutid);
            let uutid = Uutid(uutid);
            let keys = crypto::gen_keypair_from_rng(&mut rng);
            let address = derive_address(&uutid);
            ledger.create_account(address.clone(), keys.verify_key(), pc.balance);
            net.register_party(id);
            if let Some(policy) = &pc.merchant {
                merchants.insert(
                    id,
                    MerchantBook {
                        policy: policy.clone(),
                        period_start: 0,
                        dynamic_blacklist: BTreeSet::new(),
                        agreements: BTreeMap::new(),
                        known_identities: BTreeMap::new(),
                        session_counter: 0,
                        next_note: 0,
                    },
                );
            }
            parties.push(Party {
                name: pc.name.clone(),
                uutid,
                address,
                keys,
                role: pc.role,
                packets: pc.packets,
                msg_counter: 0,
                mscs: BTreeMap::new(),
                esc_keys: BTreeMap::new(),
                agreements: BTreeMap::new(),
                endpoints: BTreeMap::new(),
                corrupted: false,
                stalled_from: None,
            });
        }

        // non-adaptive corruption and delay rules apply before round 0
        let mut adv_timed = Vec::new();
        for action in &cfg.adversary.actions {
            match action {
                AdvAction::Corrupt { target } => {
                    let idx = parties
                        .iter()
                        .position(|p| &p.name == target)
                        .expect("validated config");
                    let seed = parties[idx].keys.signing_seed();
                    net.corrupt(PartyId(idx as u32), seed)
                        .expect("corruption before round 0");
                    parties[idx].corrupted = true;
                }
                AdvAction::Delay {
                    target,
                    from_round,
                    to_round,
                    extra,
                } => {
                    let idx = parties
                        .iter()
                        .position(|p| &p.name == target)
                        .expect("validated config");
                    net.add_delay_rule(DelayRule {
                        sender: PartyId(idx as u32),
                        from_round: *from_round,
                        to_round: *to_round,
                        extra: *extra,
                    });
                }
                other => adv_timed.push(other.clone()),
            }
        }
        net.start();

        let mut schedule: Vec<(u64, Action)> = cfg
            .schedule
            .iter()
            .map(|s| (s.round, s.action.clone()))
            .collect();
        schedule.sort_by_key(|(r, _)| *r);

        let mut engine = Engine {
            rng,
            nonces: NonceRegistry::new(),
            ledger,
            net,
            parties,
            merchants,
            escs: BTreeMap::new(),
            channels: BTreeMap::new(),
            pair_counters: BTreeMap::new(),
            flows: Vec::new(),
            orphaned_escrows: BTreeMap::new(),
            raised_disputes: BTreeMap::new(),
            blacklisted: BTreeSet::new(),
            msc_finals: BTreeMap::new(),
            settlements: Vec::new(),
            trace: Trace::new(),
            verifier: Verifier::new(),
            refusals: 0,
            aborts: 0,
            schedule_idx: 0,
            schedule,
            adv_timed,
            cfg,
        };
        engine.emit_genesis();
        Ok(engine)
    }

    /// Build and run a scenario to completion.
    pub fn run(cfg: ScenarioConfig) -> Result<(RunReport, Vec<TraceEvent>), ConfigError> {
        let mut engine = Engine::new(cfg)?;
        let report = engine.run_to_completion();
        Ok((report, engine.trace.into_events()))
    }

    pub fn trace_events(&self) -> &[TraceEvent] {
        self.trace.events()
    }

    /// The adversary's full-payload view of corrupted-endpoint traffic, for
    /// trace-inspection oracles.
    pub fn adversary_intercepts(&self) -> &[Envelope] {
        &self.net.adversary.intercepted
    }

    /// The adversary's metadata-only view of honest traffic.
    pub fn adversary_leaks(&self) -> &[crate::network::LeakageView] {
        &self.net.adversary.observed_leaks
    }

    // -- event emission -------------------------------------------------------

    fn name_of(&self, pid: PartyId) -> String {
        self.parties[pid.0 as usize].name.clone()
    }

    fn emit_for(&mut self, actor: Option<PartyId>, event: Event) {
        let seq = self.trace.next_seq();
        match &event {
            Event::Refused { .. } => self.refusals += 1,
            Event::Aborted { .. } => self.aborts += 1,
            _ => {}
        }
        let record = TraceEvent {
            seq,
            round: self.net.round(),
            height: self.ledger.height(),
            actor: actor.map(|p| self.name_of(p)),
            event,
        };
        let before: BTreeSet<String> = self.verifier.violated_names().into_iter().collect();
        self.verifier.consume(&record);
        self.trace.push(record);
        // cross-check the ledger itself against the event-replay view
        if !self.ledger.conserves_supply() {
            self.verifier.flag_external(
                "conservation",
                seq,
                format!(
                    "ledger circulating {} != supply {}",
                    self.ledger.circulating_total(),
                    self.ledger.total_supply()
                ),
            );
        }
        let after = self.verifier.violated_names();
        for name in after {
            if !before.contains(&name) {
                let seq2 = self.trace.next_seq();
                self.trace.push(TraceEvent {
                    seq: seq2,
                    round: self.net.round(),
                    height: self.ledger.height(),
                    actor: None,
                    event: Event::InvariantViolation {
                        name,
                        detail: "first violation at this point in the trace".to_string(),
                    },
                });
            }
        }
    }

    fn emit_genesis(&mut self) {
        let accounts: Vec<(String, u64)> = self
            .parties
            .iter()
            .map(|p| {
                (
                    p.address.0.clone(),
                    self.ledger.balance(&p.address).unwrap(),
                )
            })
            .collect();
        let corrupted = self
            .parties
            .iter()
            .filter(|p| p.corrupted)
            .map(|p| p.name.clone())
            .collect();
        let event = Event::Genesis {
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            supply: self.ledger.total_supply(),
            parties: self.parties.iter().map(|p| p.name.clone()).collect(),
            corrupted,
            accounts,
        };
        self.emit_for(None, event);
    }

    fn refuse(&mut self, actor: PartyId, op: &str, reason: &str) {
        self.emit_for(
            Some(actor),
            Event::Refused {
                op: op.to_string(),
                reason: reason.to_string(),
            },
        );
    }

    fn reject(&mut self, actor: PartyId, op: &str, error: &str) {
        self.emit_for(
            Some(actor),
            Event::Rejected {
                op: op.to_string(),
                error: error.to_string(),
            },
        );
    }

    // -- lookup helpers ----------------------------------------------------------

    fn party_by_name(&self, name: &str) -> PartyId {
        PartyId(
            self.parties
                .iter()
                .position(|p| p.name == name)
                .expect("validated config") as u32,
        )
    }

    fn party_by_uutid(&self, uutid: Uutid) -> Option<PartyId> {
        self.parties
            .iter()
            .position(|p| p.uutid == uutid)
            .map(|i| PartyId(i as u32))
    }

    fn pair_key(&self, a: PartyId, b: PartyId) -> (PartyId, PartyId) {
        (a.min(b), a.max(b))
    }

    fn esc_for_pair(&self, a: PartyId, b: PartyId) -> Option<Scid> {
        let key = self.pair_key(a, b);
        self.escs
            .iter()
            .find(|(_, m)| (m.party_i, m.party_j) == key)
            .map(|(scid, _)| *scid)
    }

    fn open_channel_for(&self, a: PartyId, b: PartyId) -> Option<(ChannelId, Scid)> {
        let scid = self.esc_for_pair(a, b)?;
        let channel = self.escs[&scid].open_channel?;
        Some((channel, scid))
    }

    fn fresh_nonce(&mut self) -> Nonce {
        self.nonces.issue(&mut self.rng)
    }

    /// Backed by an MSC, or a merchant (trivially backed).
    fn msc_backed(&self, pid: PartyId) -> bool {
        !self.parties[pid.0 as usize].mscs.is_empty() || self.merchants.contains_key(&pid)
    }

    /// The key a party signs a given message kind with: identity keys for
    /// contract setup, per-ESC fresh keys for everything channel-scoped.
    fn signing_key_for(&self, sender: PartyId, body: &Body) -> KeyPair {
        let party = &self.parties[sender.0 as usize];
        let by_scid = |scid: &Scid| {
            party
                .esc_keys
                .get(scid)
                .cloned()
                .unwrap_or(party.keys.clone())
        };
        match body {
            Body::ChanOpen { scid, .. } | Body::Dispute { scid, .. } => by_scid(scid),
            Body::ChanOpenAck { channel, .. }
            | Body::ChanFund { channel, .. }
            | Body::Update { channel, .. }
            | Body::UpdateSuccess { channel, .. }
            | Body::DisputeEvidence { channel, .. }
            | Body::DisputeClose { channel, .. }
            | Body::Finalise { channel, .. }
            | Body::FinaliseAck { channel, .. } => match self.channels.get(channel) {
                Some(meta) => by_scid(&meta.scid),
                None => party.keys.clone(),
            },
            _ => party.keys.clone(),
        }
    }

    fn transport_vkey(&self, sender: PartyId, body: &Body) -> VerifyKey {
        self.signing_key_for(sender, body).verify_key()
    }

    fn send(&mut self, sender: PartyId, receiver: PartyId, body: Body) {
        let counter = MsgCounter::request(self.parties[sender.0 as usize].next_counter());
        self.send_with_counter(sender, receiver, body, counter);
    }

    /// Answers carry the request's counter tagged as a reply (the i'
    /// convention).
    fn send_reply(&mut self, sender: PartyId, receiver: PartyId, body: Body, request: MsgCounter) {
        self.send_with_counter(sender, receiver, body, MsgCounter::reply_to(request.value));
    }

    fn send_with_counter(
        &mut self,
        sender: PartyId,
        receiver: PartyId,
        body: Body,
        counter: MsgCounter,
    ) {
        let key = self.signing_key_for(sender, &body);
        let nonce = self.fresh_nonce();
        let msg = ProtocolMessage::build(sender, counter, nonce, body, &key);
        self.send_prebuilt(sender, receiver, msg);
    }

    fn send_prebuilt(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let kind = msg.kind().label().to_string();
        match self.net.send_secure(sender, receiver, msg) {
            Ok((msg_id, deliver_round)) => {
                let event = Event::Sent {
                    msg_id,
                    sender: self.name_of(sender),
                    receiver: self.name_of(receiver),
                    kind,
                    deliver_round,
                };
                self.emit_for(Some(sender), event);
                // mirror the adversary's observation into the trace
                if self.net.is_corrupted(sender) || self.net.is_corrupted(receiver) {
                    if let Some(env) = self.net.adversary.intercepted.last().cloned() {
                        let endpoint = if self.net.is_corrupted(sender) {
                            self.name_of(sender)
                        } else {
                            self.name_of(receiver)
                        };
                        let digest =
                            crypto::hash_bytes(&env.payload.body.canonical_value().encode());
                        self.emit_for(
                            None,
                            Event::Intercepted {
                                msg_id: env.msg_id,
                                endpoint,
                                kind: env.payload.kind().label().to_string(),
                                payload_digest: digest.to_hex(),
                            },
                        );
                    }
                } else if let Some(leak) = self.net.adversary.observed_leaks.last().cloned() {
                    let event = Event::LeakObserved {
                        sender: self.name_of(leak.sender),
                        receiver: self.name_of(leak.receiver),
                        payload_length: leak.payload_length,
                    };
                    self.emit_for(None, event);
                }
            }
            Err(e) => self.reject(sender, "send", &e.to_string()),
        }
    }

    // -- main loop ----------------------------------------------------------------

    pub fn run_to_completion(&mut self) -> RunReport {
        loop {
            let round = self.net.round();
            // 1. environment actions scheduled for this round
            while self.schedule_idx < self.schedule.len()
                && self.schedule[self.schedule_idx].0 == round
            {
                let action = self.schedule[self.schedule_idx].1.clone();
                self.schedule_idx += 1;
                self.execute_action(action);
            }
            // 2. adversary script actions for this round
            let due: Vec<AdvAction> = self
                .adv_timed
                .iter()
                .filter(|a| adv_round(a) == Some(round))
                .cloned()
                .collect();
            for action in due {
                self.execute_adversary(action);
            }
            // 3. advance the network round
            let delivered = self.net.step_round();
            // 4. ledger advances; watchers fire before deliveries, so dispute
            //    evidence arriving exactly at the deadline is late
            let fired = self.ledger.advance(self.cfg.blocks_per_round);
            for watcher in fired {
                self.handle_watcher(watcher);
            }
            // 5. deliveries
            for env in delivered {
                self.handle_delivery(env);
            }
            // 6. flow timeouts
            self.expire_flows();
            // 7. stop conditions
            if self.net.round() >= self.cfg.max_rounds || self.quiescent() {
                break;
            }
        }
        self.finalize()
    }

    fn quiescent(&self) -> bool {
        self.schedule_idx >= self.schedule.len()
            && self.net.pending() == 0
            && self.flows.is_empty()
            && !self
                .adv_timed
                .iter()
                .any(|a| adv_round(a).map(|r| r >= self.net.round()).unwrap_or(false))
            && self.channels.values().all(|m| m.closed)
            // funding from aborted opens is still awaiting its release timer
            && self.orphaned_escrows.is_empty()
    }

    fn expire_flows(&mut self) {
        let round = self.net.round();
        let mut expired = Vec::new();
        let mut keep = Vec::new();
        for flow in self.flows.drain(..) {
            if flow.deadline() <= round {
                expired.push(flow);
            } else {
                keep.push(flow);
            }
        }
        self.flows = keep;
        for flow in expired {
            let (label, actor) = (flow.label(), flow.initiator());
            match &flow {
                // a note issued for an open that never completed is voided
                Flow::ChanOpen {
                    funding_initiator: FundingSource::CreditNote { note, .. },
                    initiator,
                    ..
                } => {
                    self.void_note(*initiator, *note);
                }
                // an unanswered proposal is dropped; both sides stay on the
                // old version
                Flow::Update {
                    proposer, channel, ..
                } => {
                    if let Some(ep) = self.parties[proposer.0 as usize].endpoints.get_mut(channel) {
                        ep.pending = None;
                    }
                }
                _ => {}
            }
            self.emit_for(
                Some(actor),
                Event::Aborted {
                    flow: label.to_string(),
                    reason: "peer did not answer within the timeout".to_string(),
                },
            );
        }
    }

    fn finalize(&mut self) -> RunReport {
        // end-of-run privacy sweep over the ledger dump
        let dump = self.ledger.dump();
        let dump_json = serde_json::to_string(&dump).expect("dump serializes");
        let names: Vec<String> = self.parties.iter().map(|p| p.name.clone()).collect();
        let final_seq = self.trace.next_seq();
        for name in &names {
            if dump_json.contains(name.as_str()) {
                self.verifier.flag_external(
                    "privacy-masking",
                    final_seq,
                    format!("true identity {name:?} appears in the ledger dump"),
                );
            }
        }
        let rounds = self.net.round();
        let events = self.trace.next_seq();
        let hash = self.trace.hash_hex();
        self.trace.push(TraceEvent {
            seq: events,
            round: rounds,
            height: self.ledger.height(),
            actor: None,
            event: Event::RunEnd {
                rounds,
                events,
                trace_hash: hash.clone(),
            },
        });
        let verifier = core::mem::take(&mut self.verifier);
        RunReport {
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            rounds,
            event_count: events,
            trace_hash: hash,
            invariants: verifier.finish(final_seq),
            refusals: self.refusals,
            aborts: self.aborts,
            settlements: self.settlements.clone(),
            final_ledger: self.ledger.dump(),
        }
    }

    // -- scheduled actions ----------------------------------------------------------

    fn execute_action(&mut self, action: Action) {
        let desc = action_desc(&action);
        self.emit_for(None, Event::Action { desc });
        match action {
            Action::ApplyCredit {
                applicant,
                merchant,
                liability,
            } => {
                let (a, m) = (
                    self.party_by_name(&applicant),
                    self.party_by_name(&merchant),
                );
                self.act_apply_credit(a, m, liability);
            }
            Action::MscInit {
                participant,
                merchant,
                use_cns,
            } => {
                let (p, m) = (
                    self.party_by_name(&participant),
                    self.party_by_name(&merchant),
                );
                self.act_msc_init(p, m, use_cns);
            }
            Action::EscInit { initiator, peer } => {
                let (i, p) = (self.party_by_name(&initiator), self.party_by_name(&peer));
                self.act_esc_init(i, p);
            }
            Action::OpenChannel {
                initiator,
                peer,
                funding_initiator,
                funding_peer,
                t_delta,
            } => {
                let (i, p) = (self.party_by_name(&initiator), self.party_by_name(&peer));
                let t = t_delta.unwrap_or(self.cfg.t_delta);
                self.act_open_channel(i, p, funding_initiator, funding_peer, t);
            }
            Action::TransferCoins { from, to, coins } => {
                let (f, t) = (self.party_by_name(&from), self.party_by_name(&to));
                self.act_transfer(f, t, coins);
            }
            Action::TradeEnergy {
                seller,
                buyer,
                packets,
                unit_price,
            } => {
                let (s, b) = (self.party_by_name(&seller), self.party_by_name(&buyer));
                self.act_trade(s, b, packets, unit_price);
            }
            Action::RaiseDispute {
                raiser,
                peer,
                disputed_version,
            } => {
                let (r, p) = (self.party_by_name(&raiser), self.party_by_name(&peer));
                self.act_raise_dispute(r, p, disputed_version);
            }
            Action::CloseChannel {
                initiator,
                peer,
                cooperative,
                use_version,
            } => {
                let (i, p) = (self.party_by_name(&initiator), self.party_by_name(&peer));
                self.act_close(i, p, cooperative, use_version);
            }
            Action::SettlePeriod { merchant } => {
                let m = self.party_by_name(&merchant);
                self.act_settle_period(m);
            }
        }
    }

    fn act_apply_credit(&mut self, applicant: PartyId, merchant: PartyId, liability: u64) {
        let app = CreditApplication {
            applicant,
            supporting_docs: alloc::vec![1, 2, 3],
            declared_liability: liability,
        };
        let raised = *self.raised_disputes.get(&applicant).unwrap_or(&0);
        let applicant_name = self.name_of(applicant);
        let applicant_uutid = self.parties[applicant.0 as usize].uutid;
        let merchant_uutid = self.parties[merchant.0 as usize].uutid;
        let merchant_keys = self.parties[merchant.0 as usize].keys.clone();
        let merchant_name = self.name_of(merchant);
        let height = self.ledger.height();
        let book = self
            .merchants
            .get_mut(&merchant)
            .expect("validated merchant");
        let result = if book.dynamic_blacklist.contains(&applicant_name) {
            Err(cns::Rejection::Blacklisted)
        } else {
            cns::review_application(
                &app,
                &cns::ReviewContext {
                    applicant_name: &applicant_name,
                    applicant_uutid,
                    raised_disputes: raised,
                },
                merchant_uutid,
                &merchant_keys,
                &book.policy,
                height,
            )
        };
        let outcome = match result {
            Ok(agreement) => {
                book.agreements.insert(
                    applicant,
                    AgreementState {
                        agreement: agreement.clone(),
                        collateral: None,
                    },
                );
                self.parties[applicant.0 as usize]
                    .agreements
                    .insert(merchant, agreement);
                "accepted".to_string()
            }
            Err(rejection) => rejection.to_string(),
        };
        self.emit_for(
            Some(applicant),
            Event::CreditReviewed {
                applicant: applicant_name,
                merchant: merchant_name,
                outcome,
            },
        );
    }

    fn act_msc_init(&mut self, participant: PartyId, merchant: PartyId, use_cns: bool) {
        if self.parties[participant.0 as usize]
            .mscs
            .contains_key(&merchant)
        {
            self.refuse(participant, "msc-init", "contract already exists");
            return;
        }
        let mut collateral_escrow = None;
        let mut claim_secret = None;
        if use_cns {
            let Some(agreement) = self.parties[participant.0 as usize]
                .agreements
                .get(&merchant)
                .cloned()
            else {
                self.refuse(participant, "msc-init", "no credit agreement");
                return;
            };
            // deposit collateral: a time-locked escrow for the merchant,
            // claimable only with the secret sent over the secure channel
            let window = self.merchants[&merchant].policy.collateral_window;
            let unlock = self.ledger.height() + window;
            let owner = self.parties[participant.0 as usize].address.clone();
            let beneficiary = self.parties[merchant.0 as usize].address.clone();
            let credential = crypto::TimelockCredential::generate(&mut self.rng, unlock, merchant);
            match self.ledger.lock_escrow(
                &owner,
                agreement.required_collateral,
                unlock,
                &beneficiary,
                credential.credential_digest(),
            ) {
                Ok(escrow) => {
                    self.emit_for(
                        Some(participant),
                        Event::EscrowLocked {
                            escrow: escrow.0,
                            owner: owner.0.clone(),
                            amount: agreement.required_collateral,
                            unlock_height: unlock,
                            beneficiary: beneficiary.0.clone(),
                        },
                    );
                    self.emit_for(
                        Some(participant),
                        Event::CollateralDeposited {
                            escrow: escrow.0,
                            amount: agreement.required_collateral,
                            unlock_height: unlock,
                        },
                    );
                    collateral_escrow = Some(escrow);
                    claim_secret = Some(credential.claim_secret);
                }
                Err(e) => {
                    self.reject(participant, "deposit-collateral", &e.to_string());
                    return;
                }
            }
        }
        let p = &self.parties[participant.0 as usize];
        let body = Body::MscInit {
            participant: p.uutid,
            merchant: self.parties[merchant.0 as usize].uutid,
            participant_vkey: p.keys.verify_key(),
            true_identity: p.name.clone(),
            use_cns,
            collateral_escrow,
            claim_secret,
        };
        let deadline = self.net.round() + self.cfg.abort_timeout_rounds;
        self.flows.push(Flow::MscInit {
            participant,
            merchant,
            record: None,
            merchant_sig: None,
            deadline,
        });
        self.send(participant, merchant, body);
    }

    fn act_esc_init(&mut self, initiator: PartyId, peer: PartyId) {
        if self.blacklisted.contains(&initiator) || self.blacklisted.contains(&peer) {
            self.refuse(
                initiator,
                "esc-init",
                "party is blacklisted for raised disputes",
            );
            return;
        }
        if !self.msc_backed(initiator) || !self.msc_backed(peer) {
            self.refuse(
                initiator,
                "esc-init",
                "both parties must be backed by a contract",
            );
            return;
        }
        if self.flows.iter().any(|f| {
            matches!(f, Flow::EscInit { initiator: i, peer: p, .. } if (*i, *p) == (initiator, peer))
        }) {
            self.refuse(initiator, "esc-init", "setup already in flight");
            return;
        }
        let fresh = crypto::gen_keypair_from_rng(&mut self.rng);
        let notice = self.collateral_notice_for(initiator);
        let body = Body::EscInit {
            initiator: self.parties[initiator.0 as usize].uutid,
            peer: self.parties[peer.0 as usize].uutid,
            fresh_vkey: fresh.verify_key(),
            collateral_notice: notice,
        };
        let deadline = self.net.round() + self.cfg.abort_timeout_rounds;
        self.flows.push(Flow::EscInit {
            initiator,
            peer,
            initiator_key: Some(fresh),
            initiator_vkey: None,
            scid: None,
            deadline,
        });
        self.send(initiator, peer, body);
    }

    fn collateral_notice_for(&self, party: PartyId) -> Option<CollateralNotice> {
        for (merchant, book) in &self.merchants {
            if let Some(state) = book.agreements.get(&party) {
                if let Some(coll) = &state.collateral {
                    return Some(CollateralNotice {
                        agreement: state.agreement.clone(),
                        escrow: coll.escrow,
                        merchant_vkey: self.parties[merchant.0 as usize].keys.verify_key(),
                    });
                }
            }
        }
        None
    }

    fn act_open_channel(
        &mut self,
        initiator: PartyId,
        peer: PartyId,
        funding_initiator: FundingSpec,
        funding_peer: FundingSpec,
        t_delta: u64,
    ) {
        let Some(scid) = self.esc_for_pair(initiator, peer) else {
            self.refuse(initiator, "open-channel", "no entity contract for the pair");
            return;
        };
        if self.escs[&scid].open_channel.is_some() {
            self.refuse(
                initiator,
                "open-channel",
                "a channel is already open for the pair",
            );
            return;
        }
        let dispute_count = self
            .ledger
            .read_esc(scid)
            .map(|r| r.dispute_list.len())
            .unwrap_or(0);
        if dispute_count >= self.cfg.dispute_black_threshold as usize {
            self.refuse(
                initiator,
                "open-channel",
                "too many disputes remarked in the entity contract",
            );
            return;
        }
        let index = {
            let meta = self.escs.get_mut(&scid).unwrap();
            let i = meta.channel_counter;
            meta.channel_counter += 1;
            i
        };
        let channel = derive_channel_id(scid, index);

        // the initiator funds now; the timer releases a never-completed open
        let Some(funding) = self.fund_side(initiator, scid, channel, &funding_initiator, t_delta)
        else {
            return;
        };
        let initiator_is_i = initiator < peer;
        let (init_cp, peer_cp) = (
            CoinsPackets::new(funding_initiator.coins, funding_initiator.packets),
            CoinsPackets::new(funding_peer.coins, funding_peer.packets),
        );
        let balances = if initiator_is_i {
            BalancePair::new(init_cp, peer_cp)
        } else {
            BalancePair::new(peer_cp, init_cp)
        };
        let nonce = self.fresh_nonce();
        let hstate = VersionedState::compute_hstate(channel, 0, &balances, &nonce);
        let key = self.parties[initiator.0 as usize].esc_keys[&scid].clone();
        let sig = crypto::sign(&key, &hstate, 0);
        let body = Body::ChanOpen {
            scid,
            channel,
            initiator_funding: funding,
            responder_coins: funding_peer.coins,
            responder_packets: funding_peer.packets,
            state_counter: 0,
            balances,
            state_nonce: nonce,
            state_hstate: hstate,
            initiator_state_sig: sig,
            identity: self.parties[initiator.0 as usize].uutid,
            t_delta,
        };
        let deadline = self.net.round() + self.cfg.abort_timeout_rounds;
        self.flows.push(Flow::ChanOpen {
            initiator,
            responder: peer,
            scid,
            channel,
            funding_initiator: funding,
            responder_spec: funding_peer,
            balances,
            state_nonce: nonce,
            state_hstate: hstate,
            initiator_sig: sig,
            t_delta,
            deadline,
        });
        // cleanup watcher in case the open never completes
        let expires = self.ledger.height() + t_delta;
        self.ledger
            .register_watcher(expires, Watcher::ChannelTimer { channel });
        if let FundingSource::Deposit { escrow, .. } = funding {
            let owner = self.parties[initiator.0 as usize].address.clone();
            self.orphaned_escrows
                .entry(channel)
                .or_default()
                .push((escrow, owner));
        }
        self.send(initiator, peer, body);
    }

    /// Lock a deposit or draw a credit note for one side of a channel.
    fn fund_side(
        &mut self,
        party: PartyId,
        scid: Scid,
        channel: ChannelId,
        spec: &FundingSpec,
        t_delta: u64,
    ) -> Option<FundingSource> {
        if self.parties[party.0 as usize].packets < spec.packets {
            self.reject(party, "open-channel", "insufficient energy packets");
            return None;
        }
        let source = if spec.credit {
            let merchant = self
                .merchants
                .iter()
                .find(|(_, book)| book.agreements.contains_key(&party))
                .map(|(m, _)| *m);
            let Some(merchant) = merchant else {
                self.reject(
                    party,
                    "open-channel",
                    "no credit agreement for note funding",
                );
                return None;
            };
            match self.issue_credit_note(merchant, party, scid, spec.coins) {
                Ok(note) => FundingSource::CreditNote {
                    note,
                    coins: spec.coins,
                    packets: spec.packets,
                },
                Err(e) => {
                    self.reject(party, "open-channel", &e.to_string());
                    return None;
                }
            }
        } else {
            let owner = self.parties[party.0 as usize].address.clone();
            let esc_address = self.escs[&scid].address.clone();
            let unlock = self.ledger.height() + t_delta;
            let credential =
                crypto::hash_bytes(&[b"channel-funding".as_slice(), &channel.0].concat());
            match self
                .ledger
                .lock_escrow(&owner, spec.coins, unlock, &esc_address, credential)
            {
                Ok(escrow) => {
                    self.emit_for(
                        Some(party),
                        Event::EscrowLocked {
                            escrow: escrow.0,
                            owner: owner.0.clone(),
                            amount: spec.coins,
                            unlock_height: unlock,
                            beneficiary: esc_address.0.clone(),
                        },
                    );
                    FundingSource::Deposit {
                        escrow,
                        coins: spec.coins,
                        packets: spec.packets,
                    }
                }
                Err(e) => {
                    self.reject(party, "open-channel", &e.to_string());
                    return None;
                }
            }
        };
        self.parties[party.0 as usize].packets -= spec.packets;
        Some(source)
    }

    /// Merchant signs a new credit note against the agreement's limit and
    /// registers it in the MSC's debit ledger.
    fn issue_credit_note(
        &mut self,
        merchant: PartyId,
        debtor: PartyId,
        scid: Scid,
        amount: u64,
    ) -> Result<NoteId, cns::CnsError> {
        let sid = *self.parties[debtor.0 as usize]
            .mscs
            .get(&merchant)
            .ok_or(cns::CnsError::NoAgreement)?;
        let msc = self
            .ledger
            .read_msc(sid)
            .ok_or(cns::CnsError::NoAgreement)?
            .clone();
        let outstanding = cns::outstanding_total(msc.debit_ledger.iter());
        let agreement = self
            .merchants
            .get(&merchant)
            .and_then(|b| b.agreements.get(&debtor))
            .map(|a| a.agreement.clone())
            .ok_or(cns::CnsError::NoAgreement)?;
        cns::check_note_issuable(&agreement, outstanding, amount)?;
        let note_id = {
            let book = self.merchants.get_mut(&merchant).unwrap();
            let id = NoteId(book.next_note);
            book.next_note += 1;
            id
        };
        let debtor_uutid = self.parties[debtor.0 as usize].uutid;
        let digest = CreditNote::signing_digest(note_id, scid, debtor_uutid, amount);
        let merchant_keys = self.parties[merchant.0 as usize].keys.clone();
        let sig_counter = self.parties[merchant.0 as usize].next_counter();
        let note = CreditNote {
            note_id,
            scid,
            debtor: debtor_uutid,
            amount,
            merchant_sig: crypto::sign(&merchant_keys, &digest, sig_counter),
            status: NoteStatus::Outstanding,
            final_share: None,
            payee: None,
        };
        let mut next = msc.bump();
        next.debit_ledger.push(note);
        let outstanding_after = cns::outstanding_total(next.debit_ledger.iter());
        self.commit_msc_update(merchant, next);
        self.emit_for(
            Some(debtor),
            Event::NoteIssued {
                note: note_id.0,
                scid: hex::encode(scid.0),
                debtor: debtor_uutid.to_hex(),
                amount,
                outstanding: outstanding_after,
                limit: agreement.credit_limit,
            },
        );
        Ok(note_id)
    }

    /// Cancel a note whose channel open never completed.
    fn void_note(&mut self, debtor: PartyId, note: NoteId) {
        let Some((merchant, sid)) = self.find_note_msc(debtor, note) else {
            return;
        };
        let msc = self.ledger.read_msc(sid).unwrap().clone();
        let mut next = msc.bump();
        if let Some(n) = next.debit_ledger.iter_mut().find(|n| n.note_id == note) {
            n.status = NoteStatus::Settled;
            n.final_share = Some(n.amount);
        }
        self.commit_msc_update(merchant, next);
    }

    fn find_note_msc(&self, debtor: PartyId, note: NoteId) -> Option<(PartyId, Sid)> {
        for (merchant, sid) in &self.parties[debtor.0 as usize].mscs {
            if let Some(msc) = self.ledger.read_msc(*sid) {
                if msc.debit_ledger.iter().any(|n| n.note_id == note) {
                    return Some((*merchant, *sid));
                }
            }
        }
        None
    }

    /// Merchant-signed MSC version commit.
    fn commit_msc_update(&mut self, merchant: PartyId, record: MscRecord) {
        let digest = record.canonical_digest();
        let keys = self.parties[merchant.0 as usize].keys.clone();
        let counter = self.parties[merchant.0 as usize].next_counter();
        let sig = crypto::sign(&keys, &digest, counter);
        let sid = record.sid;
        let version = record.version;
        self.ledger
            .commit_msc(record, &[(keys.verify_key(), counter, sig)])
            .expect("merchant-signed update commits");
        self.emit_for(
            Some(merchant),
            Event::ContractCommitted {
                kind: "msc".to_string(),
                id: hex::encode(sid.0),
                version,
            },
        );
    }

    fn act_transfer(&mut self, from: PartyId, to: PartyId, coins: u64) {
        let Some((channel, _)) = self.open_channel_for(from, to) else {
            self.refuse(from, "update", "no open channel for the pair");
            return;
        };
        if self.channels[&channel].pending_close.is_some() {
            self.refuse(from, "update", "close already submitted");
            return;
        }
        let from_side = self.channels[&channel].side_of(from);
        let Some(endpoint) = self.parties[from.0 as usize]
            .endpoints
            .get(&channel)
            .cloned()
        else {
            self.refuse(from, "update", "no open channel for the pair");
            return;
        };
        match endpoint.phase {
            Phase::Disputed => {
                self.refuse(from, "update", "channel is in a dispute");
                return;
            }
            Phase::Closed => {
                self.refuse(from, "update", "channel is not open");
                return;
            }
            _ => {}
        }
        if endpoint.pending.is_some() {
            self.reject(from, "update", "a proposal is already pending");
            return;
        }
        if self.ledger.height() >= endpoint.expires_at {
            self.reject(from, "update", "timer-elapsed");
            return;
        }
        let mut balances = endpoint.latest.balances;
        let (src, dst) = match from_side {
            Side::I => (&mut balances.party_i, &mut balances.party_j),
            Side::J => (&mut balances.party_j, &mut balances.party_i),
        };
        if src.coins < coins {
            // overdrawing note funding would need more credit than the note
            // provides; a deposit simply lacks the funds
            let err = if endpoint_funding(&endpoint, from_side).is_credit() {
                "credit-limit-exceeded"
            } else {
                "insufficient-funds"
            };
            self.reject(from, "update", err);
            return;
        }
        src.coins -= coins;
        dst.coins += coins;
        self.propose_update(from, channel, balances);
    }

    fn act_trade(&mut self, seller: PartyId, buyer: PartyId, packets: u64, unit_price: u64) {
        if self.cfg.mode != Mode::Marketplace {
            self.refuse(seller, "trade", "marketplace mode is off");
            return;
        }
        let seller_role = self.parties[seller.0 as usize].role;
        let buyer_role = self.parties[buyer.0 as usize].role;
        if let Err(e) = marketplace::check_roles(seller_role, buyer_role) {
            self.reject(seller, "trade", &e.to_string());
            return;
        }
        let Some((channel, _)) = self.open_channel_for(seller, buyer) else {
            self.refuse(seller, "trade", "no open channel for the pair");
            return;
        };
        if self.channels[&channel].pending_close.is_some() {
            self.refuse(seller, "trade", "close already submitted");
            return;
        }
        let seller_side = self.channels[&channel].side_of(seller);
        let Some(endpoint) = self.parties[seller.0 as usize]
            .endpoints
            .get(&channel)
            .cloned()
        else {
            self.refuse(seller, "trade", "no open channel for the pair");
            return;
        };
        if endpoint.phase != Phase::Active {
            self.refuse(seller, "trade", "channel is not active");
            return;
        }
        if endpoint.pending.is_some() {
            self.reject(seller, "trade", "a proposal is already pending");
            return;
        }
        if self.ledger.height() >= endpoint.expires_at {
            self.reject(seller, "trade", "timer-elapsed");
            return;
        }
        match marketplace::fill_balances(
            &endpoint.latest.balances,
            seller_side,
            packets,
            unit_price,
        ) {
            Ok(balances) => self.propose_update(seller, channel, balances),
            Err(e) => self.reject(seller, "trade", &e.to_string()),
        }
    }

    /// Sign and send an update proposal for the next version counter.
    fn propose_update(&mut self, proposer: PartyId, channel: ChannelId, balances: BalancePair) {
        let (scid, peer, t_delta) = {
            let meta = &self.channels[&channel];
            (meta.scid, meta.other(proposer), meta.t_delta)
        };
        let counter = self.parties[proposer.0 as usize].endpoints[&channel]
            .latest
            .counter
            + 1;
        let nonce = self.fresh_nonce();
        let hstate = VersionedState::compute_hstate(channel, counter, &balances, &nonce);
        let key = self.parties[proposer.0 as usize].esc_keys[&scid].clone();
        let sig = crypto::sign(&key, &hstate, counter);
        self.parties[proposer.0 as usize]
            .endpoints
            .get_mut(&channel)
            .unwrap()
            .pending = Some(PendingUpdate {
            counter,
            balances,
            nonce,
            hstate,
            own_sig: sig,
        });
        let deadline = self.net.round() + self.cfg.abort_timeout_rounds;
        self.flows.push(Flow::Update {
            proposer,
            channel,
            deadline,
        });
        let body = Body::Update {
            channel,
            state_counter: counter,
            balances,
            state_nonce: nonce,
            state_hstate: hstate,
            proposer_state_sig: sig,
            t_delta,
        };
        self.send(proposer, peer, body);
    }

    fn act_raise_dispute(&mut self, raiser: PartyId, peer: PartyId, version: Option<u64>) {
        let Some((channel, scid)) = self.open_channel_for(raiser, peer) else {
            self.refuse(raiser, "dispute", "no open channel for the pair");
            return;
        };
        if self.channels[&channel].dispute.is_some() {
            self.refuse(raiser, "dispute", "a dispute is already raised");
            return;
        }
        let Some(endpoint) = self.parties[raiser.0 as usize]
            .endpoints
            .get(&channel)
            .cloned()
        else {
            self.refuse(raiser, "dispute", "no open channel for the pair");
            return;
        };
        if endpoint.phase == Phase::Closed {
            self.refuse(raiser, "dispute", "channel is closed");
            return;
        }
        if endpoint.phase == Phase::Disputed {
            self.refuse(raiser, "dispute", "a dispute is already raised");
            return;
        }
        let counter = version.unwrap_or(endpoint.latest.counter);
        let Some(disputed) = endpoint.version(counter).cloned() else {
            self.reject(raiser, "dispute", "unknown-tx");
            return;
        };
        let height = self.ledger.height();
        let t_delta = self.channels[&channel].t_delta;
        let t_end = height + t_delta;
        let esc = self.ledger.read_esc(scid).unwrap().clone();
        let index = esc.dispute_list.len() as u64;
        let raiser_uutid = self.parties[raiser.0 as usize].uutid;
        let dispute = DisputeRecord::open(raiser_uutid, disputed.hstate, height, t_delta);
        let next = esc.with_dispute(dispute.clone());
        self.commit_esc_dispute(raiser, scid, next);
        let watcher = self
            .ledger
            .register_watcher(t_end, Watcher::DisputeDeadline { channel });
        self.channels.get_mut(&channel).unwrap().dispute = Some(DisputeMeta {
            raiser,
            disputed_counter: counter,
            t_end,
            index,
            watcher,
        });
        if let Some(ep) = self.parties[raiser.0 as usize].endpoints.get_mut(&channel) {
            ep.phase = Phase::Disputed;
            ep.dispute = Some(ActiveDispute {
                raiser,
                disputed_tx: disputed.hstate,
                disputed_counter: counter,
                t_start: height,
                t_end,
            });
        }
        let expected_mirrors = self.mirror_dispute(channel, index, &dispute);
        self.emit_for(
            Some(raiser),
            Event::DisputeRaised {
                channel: hex::encode(channel.0),
                dispute_index: index,
                raiser: raiser_uutid.to_hex(),
                disputed_counter: counter,
                t_end,
                expected_mirrors,
            },
        );
        self.note_raised_dispute(raiser);
        let body = Body::Dispute {
            scid,
            channel,
            disputed_tx: disputed.hstate,
            disputed_counter: counter,
        };
        self.send(raiser, peer, body);
    }

    /// Raiser-signed ESC commit for dispute records.
    fn commit_esc_dispute(&mut self, raiser: PartyId, scid: Scid, record: EscRecord) {
        let digest = record.canonical_digest();
        let key = self.parties[raiser.0 as usize].esc_keys[&scid].clone();
        let counter = self.parties[raiser.0 as usize].next_counter();
        let sig = crypto::sign(&key, &digest, counter);
        let version = record.version;
        self.ledger
            .commit_esc(
                record,
                &EscCommitAuth::DisputeSubmission {
                    raiser_vkey: key.verify_key(),
                    counter,
                    sig,
                },
            )
            .expect("raiser-signed dispute commit");
        self.emit_for(
            Some(raiser),
            Event::ContractCommitted {
                kind: "esc".to_string(),
                id: hex::encode(scid.0),
                version,
            },
        );
    }

    /// Mirror a dispute record into both parties' merchant contracts,
    /// returning how many mirrors were written (merchants carry no MSC of
    /// their own).
    fn mirror_dispute(&mut self, channel: ChannelId, index: u64, dispute: &DisputeRecord) -> u64 {
        let mut mirrored = 0;
        let (pi, pj) = {
            let meta = &self.channels[&channel];
            (meta.party_i, meta.party_j)
        };
        for pid in [pi, pj] {
            let mscs: Vec<(PartyId, Sid)> = self.parties[pid.0 as usize]
                .mscs
                .iter()
                .map(|(m, s)| (*m, *s))
                .collect();
            for (merchant, sid) in mscs {
                let msc = self.ledger.read_msc(sid).unwrap().clone();
                let mut next = msc.bump();
                next.dispute_list.push(dispute.clone());
                self.commit_msc_update(merchant, next);
                self.emit_for(
                    Some(pid),
                    Event::DisputeMirrored {
                        channel: hex::encode(channel.0),
                        dispute_index: index,
                        sid: hex::encode(sid.0),
                    },
                );
                mirrored += 1;
            }
        }
        mirrored
    }

    fn mirror_dispute_outcome(
        &mut self,
        channel: ChannelId,
        outcome: DisputeOutcome,
        counter: u64,
    ) {
        let (pi, pj) = {
            let meta = &self.channels[&channel];
            (meta.party_i, meta.party_j)
        };
        for pid in [pi, pj] {
            let mscs: Vec<(PartyId, Sid)> = self.parties[pid.0 as usize]
                .mscs
                .iter()
                .map(|(m, s)| (*m, *s))
                .collect();
            for (merchant, sid) in mscs {
                let msc = self.ledger.read_msc(sid).unwrap().clone();
                let mut next = msc.bump();
                if let Some(d) = next
                    .dispute_list
                    .iter_mut()
                    .rev()
                    .find(|d| d.outcome == DisputeOutcome::Pending)
                {
                    d.outcome = outcome;
                    d.evidence_counter = counter;
                }
                self.commit_msc_update(merchant, next);
            }
        }
    }

    fn note_raised_dispute(&mut self, raiser: PartyId) {
        let count = {
            let c = self.raised_disputes.entry(raiser).or_insert(0);
            *c += 1;
            *c
        };
        let name = self.name_of(raiser);
        if count == self.cfg.dispute_grey_threshold {
            self.emit_for(
                Some(raiser),
                Event::GreyListed {
                    party: name.clone(),
                },
            );
        }
        if count == self.cfg.dispute_black_threshold {
            self.blacklisted.insert(raiser);
            self.emit_for(Some(raiser), Event::BlackListed { party: name });
        }
    }

    fn act_close(
        &mut self,
        initiator: PartyId,
        peer: PartyId,
        cooperative: bool,
        use_version: Option<u64>,
    ) {
        let Some(scid) = self.esc_for_pair(initiator, peer) else {
            self.refuse(initiator, "close", "no entity contract for the pair");
            return;
        };
        let channel = {
            let meta = &self.escs[&scid];
            meta.open_channel.or(meta.last_channel)
        };
        let Some(channel) = channel else {
            self.refuse(initiator, "close", "no channel for the pair");
            return;
        };
        if self.channels[&channel].closed {
            self.refuse(initiator, "close", "channel already closed");
            return;
        }
        let Some(endpoint) = self.parties[initiator.0 as usize]
            .endpoints
            .get(&channel)
            .cloned()
        else {
            self.refuse(initiator, "close", "no channel endpoint");
            return;
        };
        let state = match use_version {
            Some(v) if v < endpoint.latest.counter => {
                // a newer co-signed state exists: a non-malicious party
                // refuses to close on the old one
                self.refuse(initiator, "close", "newer co-signed state exists");
                return;
            }
            Some(v) => match endpoint.version(v) {
                Some(s) => s.clone(),
                None => {
                    self.reject(initiator, "close", "unknown version");
                    return;
                }
            },
            None => endpoint.latest.clone(),
        };
        let trigger = if state.balances.party_i.coins == 0 || state.balances.party_j.coins == 0 {
            CloseTrigger::FundsDepleted
        } else {
            CloseTrigger::TradeComplete
        };
        if cooperative {
            let deadline = self.net.round() + self.cfg.abort_timeout_rounds;
            self.flows.push(Flow::Close {
                initiator,
                channel,
                state: state.clone(),
                trigger,
                deadline,
            });
            let body = Body::Finalise {
                channel,
                trigger,
                state,
            };
            self.send(initiator, peer, body);
        } else {
            self.submit_unilateral_close(initiator, channel, state, trigger);
        }
    }

    /// Put a co-signed state on chain and start the challenge window. The
    /// counterparty sees the submission and supersedes it with a newer
    /// co-signed state if it holds one.
    fn submit_unilateral_close(
        &mut self,
        submitter: PartyId,
        channel: ChannelId,
        state: VersionedState,
        trigger: CloseTrigger,
    ) {
        let (scid, t_delta, closed, prior_counter) = {
            let meta = &self.channels[&channel];
            (
                meta.scid,
                meta.t_delta,
                meta.closed,
                meta.pending_close.as_ref().map(|p| p.state.counter),
            )
        };
        if closed {
            self.refuse(submitter, "close", "channel already closed");
            return;
        }
        if let Some(prior) = prior_counter {
            if prior >= state.counter {
                self.refuse(
                    submitter,
                    "close",
                    "newer co-signed state already submitted",
                );
                return;
            }
        }
        let challenge_end = self.ledger.height() + t_delta;
        let esc = self.ledger.read_esc(scid).unwrap().clone();
        let next = esc.with_pending_close(contracts::PendingClose {
            channel,
            evidence_counter: state.counter,
            challenge_end,
        });
        self.commit_esc_evidence(submitter, scid, next, &state);
        let first_submission = prior_counter.is_none();
        {
            let meta = self.channels.get_mut(&channel).unwrap();
            meta.pending_close = Some(PendingCloseMeta {
                state: state.clone(),
                trigger,
            });
        }
        if first_submission {
            let watcher = self
                .ledger
                .register_watcher(challenge_end, Watcher::CloseChallenge { channel });
            self.channels.get_mut(&channel).unwrap().challenge_watcher = Some(watcher);
        }
        let other = self.channels[&channel].other(submitter);
        let newer = self.parties[other.0 as usize]
            .endpoints
            .get(&channel)
            .filter(|ep| ep.latest.counter > state.counter)
            .map(|ep| ep.latest.clone());
        if let Some(newer_state) = newer {
            if !self.parties[other.0 as usize].is_stalled(self.net.round()) {
                self.refuse(submitter, "close", "stale close superseded by newer state");
                self.submit_unilateral_close(other, channel, newer_state, trigger);
            }
        }
    }

    /// Evidence-authorized ESC commit: the embedded co-signed state stands in
    /// for fresh party signatures.
    fn commit_esc_evidence(
        &mut self,
        submitter: PartyId,
        scid: Scid,
        record: EscRecord,
        evidence: &VersionedState,
    ) {
        let version = record.version;
        match self
            .ledger
            .commit_esc(record, &EscCommitAuth::ChannelEvidence(evidence.clone()))
        {
            Ok(_) => {
                self.emit_for(
                    Some(submitter),
                    Event::ContractCommitted {
                        kind: "esc".to_string(),
                        id: hex::encode(scid.0),
                        version,
                    },
                );
            }
            Err(e) => self.reject(submitter, "commit-esc", &e.to_string()),
        }
    }

    fn act_settle_period(&mut self, merchant: PartyId) {
        let period_end = {
            let book = &self.merchants[&merchant];
            book.period_start + book.policy.period_blocks
        };
        if self.ledger.height() < period_end {
            self.reject(merchant, "settle-period", "premature-settlement");
            return;
        }
        self.run_settlement(merchant, period_end);
    }

    // -- adversary ----------------------------------------------------------------

    fn execute_adversary(&mut self, action: AdvAction) {
        match action {
            AdvAction::Stall { target, from_round } => {
                let pid = self.party_by_name(&target);
                self.parties[pid.0 as usize].stalled_from = Some(from_round);
            }
            AdvAction::ForgeUpdate {
                target, peer, take, ..
            } => {
                let (a, v) = (self.party_by_name(&target), self.party_by_name(&peer));
                self.adv_forge_update(a, v, take);
            }
            AdvAction::ReplayUpdate {
                target,
                peer,
                counter,
                ..
            } => {
                let (a, v) = (self.party_by_name(&target), self.party_by_name(&peer));
                self.adv_replay_update(a, v, counter);
            }
            AdvAction::StaleClose {
                target,
                peer,
                counter,
                ..
            } => {
                let (a, v) = (self.party_by_name(&target), self.party_by_name(&peer));
                self.adv_stale_close(a, v, counter);
            }
            AdvAction::Corrupt { .. } | AdvAction::Delay { .. } => {}
        }
    }

    fn adv_forge_update(&mut self, attacker: PartyId, victim: PartyId, take: u64) {
        if !self.parties[attacker.0 as usize].corrupted {
            return;
        }
        let Some((channel, scid)) = self.open_channel_for(attacker, victim) else {
            return;
        };
        let Some(endpoint) = self.parties[attacker.0 as usize]
            .endpoints
            .get(&channel)
            .cloned()
        else {
            return;
        };
        let attacker_side = self.channels[&channel].side_of(attacker);
        let mut balances = endpoint.latest.balances;
        let (own, other) = match attacker_side {
            Side::I => (&mut balances.party_i, &mut balances.party_j),
            Side::J => (&mut balances.party_j, &mut balances.party_i),
        };
        let take = take.min(other.coins);
        other.coins -= take;
        own.coins += take;
        let counter = endpoint.latest.counter + 1;
        let nonce = self.fresh_nonce();
        let hstate = VersionedState::compute_hstate(channel, counter, &balances, &nonce);
        let key = self.parties[attacker.0 as usize].esc_keys[&scid].clone();
        // the attacker signs for itself but must forge the victim's
        // signature, which cannot verify under the victim's key
        let own_sig = crypto::sign(&key, &hstate, counter);
        let forged_sig = crypto::sign(&key, &crypto::hash_bytes(b"forged"), counter);
        let (sig_i, sig_j) = match attacker_side {
            Side::I => (own_sig, forged_sig),
            Side::J => (forged_sig, own_sig),
        };
        let state = VersionedState {
            channel,
            counter,
            balances,
            nonce,
            hstate,
            sig_i,
            sig_j,
        };
        let t_delta = self.channels[&channel].t_delta;
        let body = Body::UpdateSuccess {
            channel,
            state,
            t_delta,
        };
        self.send(attacker, victim, body);
    }

    fn adv_replay_update(&mut self, attacker: PartyId, victim: PartyId, counter: u64) {
        if !self.parties[attacker.0 as usize].corrupted {
            return;
        }
        let replayed = self.net.adversary.intercepted.iter().find_map(|env| {
            if env.sender != attacker || env.receiver != victim {
                return None;
            }
            match &env.payload.body {
                Body::Update { state_counter, .. } if *state_counter == counter => {
                    Some(env.payload.clone())
                }
                _ => None,
            }
        });
        if let Some(msg) = replayed {
            self.send_prebuilt(attacker, victim, msg);
        }
    }

    fn adv_stale_close(&mut self, attacker: PartyId, victim: PartyId, counter: u64) {
        if !self.parties[attacker.0 as usize].corrupted {
            return;
        }
        let Some((channel, _)) = self.open_channel_for(attacker, victim) else {
            return;
        };
        let stale = self.parties[attacker.0 as usize]
            .endpoints
            .get(&channel)
            .and_then(|ep| ep.version(counter).cloned());
        if let Some(state) = stale {
            self.submit_unilateral_close(attacker, channel, state, CloseTrigger::TradeComplete);
        }
    }

    // -- delivery dispatch ----------------------------------------------------------

    fn handle_delivery(&mut self, env: Envelope) {
        let (sender, receiver) = (env.sender, env.receiver);
        let delivered = Event::Delivered {
            msg_id: env.msg_id,
            sender: self.name_of(sender),
            receiver: self.name_of(receiver),
            kind: env.payload.kind().label().to_string(),
        };
        self.emit_for(Some(receiver), delivered);
        if self.parties[receiver.0 as usize].is_stalled(self.net.round()) {
            return;
        }
        let msg = env.payload;
        if msg.sender != sender {
            self.reject(receiver, "receive", "bad-signature");
            return;
        }
        let vkey = self.transport_vkey(sender, &msg.body);
        if !msg.verify(&vkey) {
            self.reject(receiver, "receive", "bad-signature");
            return;
        }
        match &msg.body {
            Body::MscInit { .. } => self.on_msc_init(sender, receiver, msg),
            Body::MscInitAck { .. } => self.on_msc_init_ack(sender, receiver, msg),
            Body::MscConfirm { .. } => self.on_msc_confirm(sender, receiver, msg),
            Body::EscInit { .. } => self.on_esc_init(sender, receiver, msg),
            Body::EscInitAck { .. } => self.on_esc_init_ack(sender, receiver, msg),
            Body::EscConfirm { .. } => self.on_esc_confirm(sender, receiver, msg),
            Body::ChanOpen { .. } => self.on_chan_open(sender, receiver, msg),
            Body::ChanOpenAck { .. } => self.on_chan_open_ack(sender, receiver, msg),
            Body::ChanFund { .. } => self.on_chan_fund(sender, receiver, msg),
            Body::Update { .. } => self.on_update(sender, receiver, msg),
            Body::UpdateSuccess { .. } => self.on_update_success(sender, receiver, msg),
            Body::Dispute { .. } => self.on_dispute(sender, receiver, msg),
            Body::DisputeEvidence { .. } => self.on_dispute_evidence(sender, receiver, msg),
            Body::DisputeClose { .. } => self.on_dispute_close(sender, receiver, msg),
            Body::Finalise { .. } => self.on_finalise(sender, receiver, msg),
            Body::FinaliseAck { .. } => self.on_finalise_ack(sender, receiver, msg),
        }
    }

    // -- MSC flow ----------------------------------------------------------------

    fn on_msc_init(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::MscInit {
            participant,
            merchant,
            participant_vkey,
            true_identity,
            use_cns,
            collateral_escrow,
            claim_secret,
        } = msg.body
        else {
            return;
        };
        if !self.merchants.contains_key(&receiver)
            || self.parties[receiver.0 as usize].uutid != merchant
            || self.parties[sender.0 as usize].uutid != participant
            || self.parties[sender.0 as usize].keys.verify_key() != participant_vkey
        {
            self.reject(receiver, "msc-init", "identity mismatch");
            return;
        }
        let mut collateral_ref = None;
        if use_cns {
            let Some(agreement) = self.merchants[&receiver]
                .agreements
                .get(&sender)
                .map(|a| a.agreement.clone())
            else {
                self.emit_for(
                    Some(receiver),
                    Event::Aborted {
                        flow: "msc-init".to_string(),
                        reason: "no credit agreement on file".to_string(),
                    },
                );
                return;
            };
            let (Some(escrow_id), Some(secret)) = (collateral_escrow, claim_secret) else {
                self.emit_for(
                    Some(receiver),
                    Event::Aborted {
                        flow: "msc-init".to_string(),
                        reason: "collateral missing".to_string(),
                    },
                );
                return;
            };
            // the escrow must actually secure this agreement: right owner,
            // amount, beneficiary, and a credential matching the secret
            let merchant_addr = self.parties[receiver.0 as usize].address.clone();
            let valid = self.ledger.escrow(escrow_id).is_some_and(|e| {
                e.owner == self.parties[sender.0 as usize].address
                    && e.amount == agreement.required_collateral
                    && e.beneficiary == merchant_addr
                    && e.credential_digest == crypto::hash_bytes(&secret)
                    && e.is_locked()
            });
            if !valid {
                self.emit_for(
                    Some(receiver),
                    Event::Aborted {
                        flow: "msc-init".to_string(),
                        reason: "collateral escrow does not match the agreement".to_string(),
                    },
                );
                return;
            }
            let book = self.merchants.get_mut(&receiver).unwrap();
            if let Some(state) = book.agreements.get_mut(&sender) {
                state.collateral = Some(CollateralState {
                    escrow: escrow_id,
                    claim_secret: secret,
                });
            }
            collateral_ref = Some(escrow_id);
        }
        let (sid, record) = {
            let book = self.merchants.get_mut(&receiver).unwrap();
            book.known_identities.insert(participant, true_identity);
            let session = book.session_counter;
            book.session_counter += 1;
            let m_uutid = self.parties[receiver.0 as usize].uutid;
            let sid = derive_sid(m_uutid, participant, session);
            let record = MscRecord::new(
                sid,
                m_uutid,
                participant,
                self.parties[receiver.0 as usize].keys.verify_key(),
                participant_vkey,
                collateral_ref,
            );
            (sid, record)
        };
        let digest = record.canonical_digest();
        let keys = self.parties[receiver.0 as usize].keys.clone();
        let counter = self.parties[receiver.0 as usize].next_counter();
        let sig = crypto::sign(&keys, &digest, counter);
        let deadline = self.net.round() + self.cfg.abort_timeout_rounds;
        self.flows.push(Flow::MscInit {
            participant: sender,
            merchant: receiver,
            record: Some(record),
            merchant_sig: Some((counter, sig)),
            deadline,
        });
        let body = Body::MscInitAck {
            sid,
            merchant_vkey: keys.verify_key(),
            record_digest: digest,
            merchant_record_sig: sig,
            merchant_sig_counter: counter,
        };
        self.send_reply(receiver, sender, body, msg.counter);
    }

    fn on_msc_init_ack(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::MscInitAck {
            sid,
            merchant_vkey,
            record_digest,
            merchant_record_sig,
            merchant_sig_counter,
        } = msg.body
        else {
            return;
        };
        let Some(pos) = self.flows.iter().position(|f| {
            matches!(f, Flow::MscInit { participant, merchant, record: None, .. }
                if *participant == receiver && *merchant == sender)
        }) else {
            self.reject(receiver, "msc-init-ack", "no pending setup");
            return;
        };
        let real_vkey = self.parties[sender.0 as usize].keys.verify_key();
        if merchant_vkey != real_vkey
            || !crypto::verify(
                &real_vkey,
                &record_digest,
                merchant_sig_counter,
                &merchant_record_sig,
            )
        {
            self.flows.remove(pos);
            self.emit_for(
                Some(receiver),
                Event::Aborted {
                    flow: "msc-init".to_string(),
                    reason: "merchant signature does not verify".to_string(),
                },
            );
            return;
        }
        self.flows.remove(pos);
        // countersign the record digest and hand it back for commit
        let keys = self.parties[receiver.0 as usize].keys.clone();
        let counter = self.parties[receiver.0 as usize].next_counter();
        let sig = crypto::sign(&keys, &record_digest, counter);
        self.parties[receiver.0 as usize].mscs.insert(sender, sid);
        let body = Body::MscConfirm {
            sid,
            participant_record_sig: sig,
            participant_sig_counter: counter,
        };
        self.send_reply(receiver, sender, body, msg.counter);
    }

    fn on_msc_confirm(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::MscConfirm {
            sid,
            participant_record_sig,
            participant_sig_counter,
        } = msg.body
        else {
            return;
        };
        let Some(pos) = self.flows.iter().position(|f| {
            matches!(f, Flow::MscInit { participant, merchant, record: Some(r), .. }
                if *participant == sender && *merchant == receiver && r.sid == sid)
        }) else {
            self.reject(receiver, "msc-confirm", "no pending setup");
            return;
        };
        let Flow::MscInit {
            record: Some(record),
            merchant_sig: Some((m_counter, m_sig)),
            ..
        } = self.flows.remove(pos)
        else {
            return;
        };
        let sigs = [
            (record.merchant_vkey, m_counter, m_sig),
            (
                record.participant_vkey,
                participant_sig_counter,
                participant_record_sig,
            ),
        ];
        match self.ledger.commit_msc(record, &sigs) {
            Ok(_) => {
                self.emit_for(
                    Some(receiver),
                    Event::ContractCommitted {
                        kind: "msc".to_string(),
                        id: hex::encode(sid.0),
                        version: 0,
                    },
                );
            }
            Err(e) => self.reject(receiver, "msc-commit", &e.to_string()),
        }
    }

    // -- ESC flow ----------------------------------------------------------------

    fn on_esc_init(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::EscInit {
            initiator,
            peer,
            fresh_vkey,
            collateral_notice,
        } = msg.body
        else {
            return;
        };
        if self.parties[sender.0 as usize].uutid != initiator
            || self.parties[receiver.0 as usize].uutid != peer
        {
            self.reject(receiver, "esc-init", "identity mismatch");
            return;
        }
        if self.blacklisted.contains(&sender) {
            self.refuse(
                receiver,
                "esc-init",
                "peer is blacklisted for raised disputes",
            );
            return;
        }
        if !self.msc_backed(sender) || !self.msc_backed(receiver) {
            self.refuse(
                receiver,
                "esc-init",
                "both parties must be backed by a contract",
            );
            return;
        }
        if let Some(notice) = &collateral_notice {
            if !self.verify_collateral_notice(receiver, notice) {
                return;
            }
        }
        // the responding party assigns the contract id from the pair counter
        let pair = self.pair_key(sender, receiver);
        let n = *self.pair_counters.get(&pair).unwrap_or(&0);
        self.pair_counters.insert(pair, n + 1);
        let (ua, ub) = (
            self.parties[pair.0 .0 as usize].uutid,
            self.parties[pair.1 .0 as usize].uutid,
        );
        let scid = derive_scid(ua, ub, n);
        let fresh = crypto::gen_keypair_from_rng(&mut self.rng);
        self.parties[receiver.0 as usize]
            .esc_keys
            .insert(scid, fresh.clone());
        let own_notice = self.collateral_notice_for(receiver);
        let deadline = self.net.round() + self.cfg.abort_timeout_rounds;
        self.flows.push(Flow::EscInit {
            initiator: sender,
            peer: receiver,
            initiator_key: None,
            initiator_vkey: Some(fresh_vkey),
            scid: Some(scid),
            deadline,
        });
        let body = Body::EscInitAck {
            scid,
            fresh_vkey: fresh.verify_key(),
            collateral_notice: own_notice,
        };
        self.send_reply(receiver, sender, body, msg.counter);
    }

    fn verify_collateral_notice(&mut self, receiver: PartyId, notice: &CollateralNotice) -> bool {
        let Some(merchant_pid) = self.party_by_uutid(notice.agreement.merchant) else {
            self.emit_for(
                Some(receiver),
                Event::Aborted {
                    flow: "esc-init".to_string(),
                    reason: "collateral notice references an unknown merchant".to_string(),
                },
            );
            return false;
        };
        let should_verify = self
            .merchants
            .get(&merchant_pid)
            .map(|b| b.policy.verify_collateral_sig)
            .unwrap_or(true);
        if !should_verify {
            return true;
        }
        let real_vkey = self.parties[merchant_pid.0 as usize].keys.verify_key();
        if notice.merchant_vkey != real_vkey || !notice.agreement.verify(&real_vkey) {
            self.emit_for(
                Some(receiver),
                Event::Aborted {
                    flow: "esc-init".to_string(),
                    reason: "collateral signature does not verify".to_string(),
                },
            );
            return false;
        }
        true
    }

    fn on_esc_init_ack(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::EscInitAck {
            scid,
            fresh_vkey,
            collateral_notice,
        } = msg.body
        else {
            return;
        };
        let Some(pos) = self.flows.iter().position(|f| {
            matches!(f, Flow::EscInit { initiator, peer, scid: None, .. }
                if *initiator == receiver && *peer == sender)
        }) else {
            self.reject(receiver, "esc-init-ack", "no pending setup");
            return;
        };
        if let Some(notice) = &collateral_notice {
            if !self.verify_collateral_notice(receiver, notice) {
                self.flows.remove(pos);
                return;
            }
        }
        let Flow::EscInit {
            initiator_key: Some(initiator_key),
            ..
        } = self.flows.remove(pos)
        else {
            return;
        };
        self.parties[receiver.0 as usize]
            .esc_keys
            .insert(scid, initiator_key.clone());
        // build the record from this side's own key and the key the peer
        // carried in the answer, sign, and send for commit
        let record = self.build_esc_record(
            receiver,
            sender,
            scid,
            initiator_key.verify_key(),
            fresh_vkey,
        );
        let digest = record.canonical_digest();
        let counter = self.parties[receiver.0 as usize].next_counter();
        let sig = crypto::sign(&initiator_key, &digest, counter);
        let body = Body::EscConfirm {
            scid,
            record_digest: digest,
            record_sig: sig,
            record_sig_counter: counter,
        };
        self.send_reply(receiver, sender, body, msg.counter);
    }

    /// Assemble the contract record from each side's key material as known
    /// to the caller (own keys plus whatever the counterparty carried in
    /// its messages).
    fn build_esc_record(
        &self,
        a: PartyId,
        b: PartyId,
        scid: Scid,
        vkey_a: VerifyKey,
        vkey_b: VerifyKey,
    ) -> EscRecord {
        let (pi, pj) = self.pair_key(a, b);
        let (vkey_i, vkey_j) = if pi == a {
            (vkey_a, vkey_b)
        } else {
            (vkey_b, vkey_a)
        };
        EscRecord::new(
            scid,
            self.parties[pi.0 as usize].uutid,
            self.parties[pj.0 as usize].uutid,
            vkey_i,
            vkey_j,
        )
    }

    fn on_esc_confirm(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::EscConfirm {
            scid,
            record_digest,
            record_sig,
            record_sig_counter,
        } = msg.body
        else {
            return;
        };
        let Some(pos) = self.flows.iter().position(|f| {
            matches!(f, Flow::EscInit { initiator, peer, scid: Some(s), .. }
                if *initiator == sender && *peer == receiver && *s == scid)
        }) else {
            self.reject(receiver, "esc-confirm", "no pending setup");
            return;
        };
        let Flow::EscInit {
            initiator_vkey: Some(initiator_vkey),
            ..
        } = self.flows.remove(pos)
        else {
            return;
        };
        // rebuild the record from this side's own key and the key the
        // initiator carried in the setup message; a mismatch means the
        // initiator lied about its key material
        let own_vkey = self.parties[receiver.0 as usize].esc_keys[&scid].verify_key();
        let record = self.build_esc_record(sender, receiver, scid, initiator_vkey, own_vkey);
        if record.canonical_digest() != record_digest {
            self.reject(receiver, "esc-confirm", "record mismatch");
            return;
        }
        if !crypto::verify(
            &initiator_vkey,
            &record_digest,
            record_sig_counter,
            &record_sig,
        ) {
            self.reject(receiver, "esc-confirm", "bad-signature");
            return;
        }
        let own_key = self.parties[receiver.0 as usize].esc_keys[&scid].clone();
        let own_counter = self.parties[receiver.0 as usize].next_counter();
        let own_sig = crypto::sign(&own_key, &record_digest, own_counter);
        let sigs = alloc::vec![
            (initiator_vkey, record_sig_counter, record_sig),
            (own_key.verify_key(), own_counter, own_sig),
        ];
        // the contract gets its own unusable ledger account to hold funding
        let esc_address = derive_contract_address(scid);
        self.ledger.create_account(
            esc_address.clone(),
            VerifyKey(crypto::hash_bytes(&scid.0).0),
            0,
        );
        match self
            .ledger
            .commit_esc(record, &EscCommitAuth::PartySigs(sigs))
        {
            Ok(_) => {
                let (pi, pj) = self.pair_key(sender, receiver);
                self.escs.insert(
                    scid,
                    EscMeta {
                        party_i: pi,
                        party_j: pj,
                        address: esc_address,
                        open_channel: None,
                        last_channel: None,
                        channel_counter: 0,
                    },
                );
                self.emit_for(
                    Some(receiver),
                    Event::ContractCommitted {
                        kind: "esc".to_string(),
                        id: hex::encode(scid.0),
                        version: 0,
                    },
                );
                // both parties' merchant contracts learn about the new ESC
                self.update_mscs_with_scid(sender, scid);
                self.update_mscs_with_scid(receiver, scid);
            }
            Err(e) => self.reject(receiver, "esc-commit", &e.to_string()),
        }
    }

    fn update_mscs_with_scid(&mut self, party: PartyId, scid: Scid) {
        let mscs: Vec<(PartyId, Sid)> = self.parties[party.0 as usize]
            .mscs
            .iter()
            .map(|(m, s)| (*m, *s))
            .collect();
        for (merchant, sid) in mscs {
            let msc = self.ledger.read_msc(sid).unwrap().clone();
            let mut next = msc.bump();
            next.esc_refs.push(scid);
            self.commit_msc_update(merchant, next);
        }
    }

    // -- channel open flow ------------------------------------------------------------

    fn on_chan_open(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::ChanOpen {
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
        } = msg.body
        else {
            return;
        };
        let (esc_known, already_open, party_i) = match self.escs.get(&scid) {
            Some(m) => (true, m.open_channel.is_some(), m.party_i),
            None => (false, false, PartyId(0)),
        };
        if !esc_known {
            self.reject(receiver, "chan-open", "unknown contract");
            return;
        }
        if already_open {
            self.refuse(
                receiver,
                "chan-open",
                "a channel is already open for the pair",
            );
            return;
        }
        if self.parties[sender.0 as usize].uutid != identity {
            self.reject(receiver, "chan-open", "identity mismatch");
            return;
        }
        // validate version 0: counter, funding-matching balances,
        // recomputable hstate, initiator signature
        let sender_side = if sender == party_i { Side::I } else { Side::J };
        let expect_hstate =
            VersionedState::compute_hstate(channel, state_counter, &balances, &state_nonce);
        let initiator_vkey = self.parties[sender.0 as usize].esc_keys[&scid].verify_key();
        if state_counter != 0
            || expect_hstate != state_hstate
            || !crypto::verify(
                &initiator_vkey,
                &state_hstate,
                state_counter,
                &initiator_state_sig,
            )
        {
            self.reject(receiver, "chan-open", "bad-signature");
            return;
        }
        let init_amounts = balances.side(sender_side);
        let resp_amounts = balances.side(sender_side.other());
        if init_amounts.coins != initiator_funding.coins()
            || init_amounts.packets != initiator_funding.packets()
            || resp_amounts.coins != responder_coins
            || resp_amounts.packets != responder_packets
        {
            self.reject(receiver, "chan-open", "funding mismatch");
            return;
        }
        if !self.validate_funding_onchain(sender, scid, &initiator_funding) {
            self.reject(receiver, "chan-open", "funding not found on chain");
            return;
        }
        // fund own side per the arrangement (the responder's funding kind
        // was agreed out of band; it rides in the initiator's open flow)
        let spec = self
            .flows
            .iter()
            .find_map(|f| match f {
                Flow::ChanOpen {
                    channel: c,
                    responder_spec,
                    ..
                } if *c == channel => Some(*responder_spec),
                _ => None,
            })
            .unwrap_or(FundingSpec {
                coins: responder_coins,
                packets: responder_packets,
                credit: false,
            });
        let Some(funding) = self.fund_side(receiver, scid, channel, &spec, t_delta) else {
            return;
        };
        if let FundingSource::Deposit { escrow, .. } = funding {
            let owner = self.parties[receiver.0 as usize].address.clone();
            self.orphaned_escrows
                .entry(channel)
                .or_default()
                .push((escrow, owner));
        }
        // countersign version 0
        let own_key = self.parties[receiver.0 as usize].esc_keys[&scid].clone();
        let own_sig = crypto::sign(&own_key, &state_hstate, state_counter);
        let body = Body::ChanOpenAck {
            channel,
            responder_funding: funding,
            responder_state_sig: own_sig,
        };
        self.send_reply(receiver, sender, body, msg.counter);
    }

    fn validate_funding_onchain(
        &self,
        party: PartyId,
        scid: Scid,
        funding: &FundingSource,
    ) -> bool {
        match funding {
            FundingSource::Deposit { escrow, coins, .. } => {
                self.ledger.escrow(*escrow).is_some_and(|e| {
                    e.owner == self.parties[party.0 as usize].address
                        && e.amount == *coins
                        && e.is_locked()
                })
            }
            FundingSource::CreditNote { note, coins, .. } => {
                self.parties[party.0 as usize].mscs.values().any(|sid| {
                    self.ledger.read_msc(*sid).is_some_and(|msc| {
                        msc.debit_ledger.iter().any(|n| {
                            n.note_id == *note
                                && n.scid == scid
                                && n.amount == *coins
                                && n.status == NoteStatus::Outstanding
                        })
                    })
                })
            }
        }
    }

    fn on_chan_open_ack(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::ChanOpenAck {
            channel,
            responder_funding,
            responder_state_sig,
        } = msg.body
        else {
            return;
        };
        let Some(pos) = self.flows.iter().position(|f| {
            matches!(f, Flow::ChanOpen { channel: c, initiator, responder, .. }
                if *c == channel && *initiator == receiver && *responder == sender)
        }) else {
            self.reject(receiver, "chan-open-ack", "no pending open");
            return;
        };
        let Flow::ChanOpen {
            initiator,
            responder,
            scid,
            funding_initiator,
            balances,
            state_nonce,
            state_hstate,
            initiator_sig,
            t_delta,
            ..
        } = self.flows.remove(pos)
        else {
            return;
        };
        let responder_vkey = self.parties[responder.0 as usize].esc_keys[&scid].verify_key();
        if !crypto::verify(&responder_vkey, &state_hstate, 0, &responder_state_sig) {
            self.reject(receiver, "chan-open-ack", "bad-signature");
            return;
        }
        if !self.validate_funding_onchain(responder, scid, &responder_funding) {
            self.reject(receiver, "chan-open-ack", "funding not found on chain");
            return;
        }
        let (pi, pj) = self.pair_key(initiator, responder);
        let initiator_is_i = initiator == pi;
        let (sig_i, sig_j) = if initiator_is_i {
            (initiator_sig, responder_state_sig)
        } else {
            (responder_state_sig, initiator_sig)
        };
        let state0 = VersionedState {
            channel,
            counter: 0,
            balances,
            nonce: state_nonce,
            hstate: state_hstate,
            sig_i,
            sig_j,
        };
        let (funding_i, funding_j) = if initiator_is_i {
            (funding_initiator, responder_funding)
        } else {
            (responder_funding, funding_initiator)
        };
        // funding complete: the channel enters the contract, authorized by
        // the co-signed version 0
        let esc = self.ledger.read_esc(scid).unwrap().clone();
        let funding_totals = BalancePair::new(funding_i.amounts(), funding_j.amounts());
        let next = esc.with_channel_opened(channel, state0.hstate, funding_totals);
        self.commit_esc_evidence(initiator, scid, next, &state0);

        let expires_at = self.ledger.height() + t_delta;
        let timer = self
            .ledger
            .register_watcher(expires_at, Watcher::ChannelTimer { channel });
        self.channels.insert(
            channel,
            ChannelMeta {
                scid,
                party_i: pi,
                party_j: pj,
                funding_i,
                funding_j,
                t_delta,
                expires_at,
                timer_watcher: Some(timer),
                challenge_watcher: None,
                pending_close: None,
                dispute: None,
                closed: false,
            },
        );
        {
            let esc_meta = self.escs.get_mut(&scid).unwrap();
            esc_meta.open_channel = Some(channel);
            esc_meta.last_channel = Some(channel);
        }
        self.install_endpoint(initiator, channel, state0);
        self.emit_for(
            Some(initiator),
            Event::ChannelOpened {
                channel: hex::encode(channel.0),
                scid: hex::encode(scid.0),
                coins_i: funding_totals.party_i.coins,
                coins_j: funding_totals.party_j.coins,
                packets_i: funding_totals.party_i.packets,
                packets_j: funding_totals.party_j.packets,
                credit_i: funding_i.is_credit(),
                credit_j: funding_j.is_credit(),
                t_delta,
                expires_at,
            },
        );
        let esc_version = self.ledger.read_esc(scid).unwrap().version;
        let body = Body::ChanFund {
            channel,
            esc_version,
        };
        self.send(initiator, responder, body);
    }

    fn install_endpoint(&mut self, party: PartyId, channel: ChannelId, state0: VersionedState) {
        let meta = &self.channels[&channel];
        let side = meta.side_of(party);
        let endpoint = Endpoint {
            channel,
            scid: meta.scid,
            side,
            peer: meta.other(party),
            phase: Phase::Active,
            history: alloc::vec![state0.clone()],
            latest: state0.clone(),
            pending: None,
            funding: (meta.funding_i, meta.funding_j),
            t_delta: meta.t_delta,
            expires_at: meta.expires_at,
            dispute: None,
        };
        self.parties[party.0 as usize]
            .endpoints
            .insert(channel, endpoint);
        self.emit_update_stored(party, channel, &state0);
    }

    fn emit_update_stored(&mut self, party: PartyId, channel: ChannelId, state: &VersionedState) {
        let event = Event::UpdateAccepted {
            channel: hex::encode(channel.0),
            endpoint: self.name_of(party),
            counter: state.counter,
            coins_i: state.balances.party_i.coins,
            coins_j: state.balances.party_j.coins,
            packets_i: state.balances.party_i.packets,
            packets_j: state.balances.party_j.packets,
        };
        self.emit_for(Some(party), event);
    }

    fn on_chan_fund(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::ChanFund { channel, .. } = msg.body else {
            return;
        };
        let Some(meta) = self.channels.get(&channel) else {
            self.reject(receiver, "chan-fund", "unknown channel");
            return;
        };
        if meta.closed {
            return;
        }
        let scid = meta.scid;
        if self
            .ledger
            .read_esc(scid)
            .and_then(|r| r.channel(channel))
            .is_none()
        {
            self.reject(receiver, "chan-fund", "channel not in contract");
            return;
        }
        // the responder countersigned version 0 during the open exchange;
        // its endpoint starts from the same co-signed state the initiator's
        // did
        let state0 = self.parties[sender.0 as usize]
            .endpoints
            .get(&channel)
            .map(|ep| ep.history[0].clone());
        if let Some(state0) = state0 {
            self.install_endpoint(receiver, channel, state0);
        }
    }

    // -- update flow ----------------------------------------------------------------

    fn on_update(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::Update {
            channel,
            state_counter,
            balances,
            state_nonce,
            state_hstate,
            proposer_state_sig,
            ..
        } = msg.body
        else {
            return;
        };
        let Some(meta) = self.channels.get(&channel) else {
            self.reject(receiver, "update", "unknown channel");
            return;
        };
        let (scid, sender_side) = (meta.scid, meta.side_of(sender));
        if !self.parties[receiver.0 as usize]
            .endpoints
            .contains_key(&channel)
        {
            self.reject(receiver, "update", "unknown channel");
            return;
        }
        // simultaneous proposals: the lower party id's proposal wins; the
        // loser's is rejected as stale and may be re-proposed
        let own_pending_counter = self.parties[receiver.0 as usize].endpoints[&channel]
            .pending
            .as_ref()
            .map(|p| p.counter);
        if own_pending_counter == Some(state_counter) {
            if sender < receiver {
                self.reject(receiver, "update-propose", "stale-counter");
                self.parties[receiver.0 as usize]
                    .endpoints
                    .get_mut(&channel)
                    .unwrap()
                    .pending = None;
                self.flows.retain(|f| {
                    !matches!(f, Flow::Update { proposer, channel: c, .. }
                        if *proposer == receiver && *c == channel)
                });
            } else {
                self.reject(receiver, "update", "stale-counter");
                return;
            }
        }
        let endpoint = self.parties[receiver.0 as usize].endpoints[&channel].clone();
        if let Err(e) = endpoint.validate_update(state_counter, &balances, self.ledger.height()) {
            self.reject(receiver, "update", &channel_error_label(e));
            return;
        }
        // verify the proposer's state signature over the recomputed hstate
        let expect =
            VersionedState::compute_hstate(channel, state_counter, &balances, &state_nonce);
        let proposer_vkey = self.parties[sender.0 as usize].esc_keys[&scid].verify_key();
        if expect != state_hstate
            || !crypto::verify(
                &proposer_vkey,
                &state_hstate,
                state_counter,
                &proposer_state_sig,
            )
        {
            self.reject(receiver, "update", "bad-signature");
            return;
        }
        // with the second signature the transaction becomes valid and the
        // new balance is saved into the channel
        let own_key = self.parties[receiver.0 as usize].esc_keys[&scid].clone();
        let own_sig = crypto::sign(&own_key, &state_hstate, state_counter);
        let (sig_i, sig_j) = match sender_side {
            Side::I => (proposer_state_sig, own_sig),
            Side::J => (own_sig, proposer_state_sig),
        };
        let state = VersionedState {
            channel,
            counter: state_counter,
            balances,
            nonce: state_nonce,
            hstate: state_hstate,
            sig_i,
            sig_j,
        };
        self.parties[receiver.0 as usize]
            .endpoints
            .get_mut(&channel)
            .unwrap()
            .store_version(state.clone());
        self.emit_update_stored(receiver, channel, &state);
        let t_delta = self.channels[&channel].t_delta;
        let body = Body::UpdateSuccess {
            channel,
            state,
            t_delta,
        };
        self.send_reply(receiver, sender, body, msg.counter);
    }

    fn on_update_success(&mut self, _sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::UpdateSuccess { channel, state, .. } = msg.body else {
            return;
        };
        let Some(meta) = self.channels.get(&channel) else {
            self.reject(receiver, "update-success", "unknown channel");
            return;
        };
        let scid = meta.scid;
        let esc = self.ledger.read_esc(scid).unwrap();
        // verify both signatures first: a forged counter-signature surfaces
        // as bad-signature regardless of the pending bookkeeping
        if state.channel != channel || !state.verify(&esc.vkey_i, &esc.vkey_j) {
            self.reject(receiver, "update-success", "bad-signature");
            return;
        }
        let Some(endpoint) = self.parties[receiver.0 as usize].endpoints.get(&channel) else {
            self.reject(receiver, "update-success", "unknown channel");
            return;
        };
        // the state carries both signatures, including this endpoint's own,
        // so a verifying successor is stored even when the local proposal
        // bookkeeping expired (a delayed answer must not leave the honest
        // endpoints diverged)
        if let Err(e) =
            endpoint.validate_update(state.counter, &state.balances, self.ledger.height())
        {
            self.reject(receiver, "update-success", &channel_error_label(e));
            return;
        }
        self.parties[receiver.0 as usize]
            .endpoints
            .get_mut(&channel)
            .unwrap()
            .store_version(state.clone());
        self.flows.retain(|f| {
            !matches!(f, Flow::Update { proposer, channel: c, .. }
                if *proposer == receiver && *c == channel)
        });
        self.emit_update_stored(receiver, channel, &state);
    }

    // -- dispute flow ----------------------------------------------------------------

    fn on_dispute(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::Dispute {
            channel,
            disputed_tx,
            disputed_counter,
            ..
        } = msg.body
        else {
            return;
        };
        let Some(endpoint) = self.parties[receiver.0 as usize]
            .endpoints
            .get(&channel)
            .cloned()
        else {
            self.reject(receiver, "dispute", "unknown channel");
            return;
        };
        if endpoint.dispute.is_some() {
            self.reject(receiver, "dispute", "duplicate-dispute");
            return;
        }
        let t_end = self
            .channels
            .get(&channel)
            .and_then(|m| m.dispute.as_ref())
            .map(|d| d.t_end)
            .unwrap_or(0);
        {
            let ep = self.parties[receiver.0 as usize]
                .endpoints
                .get_mut(&channel)
                .unwrap();
            ep.phase = Phase::Disputed;
            ep.dispute = Some(ActiveDispute {
                raiser: sender,
                disputed_tx,
                disputed_counter,
                t_start: self.ledger.height(),
                t_end,
            });
        }
        // answer with the latest co-signed state as evidence
        let body = Body::DisputeEvidence {
            channel,
            state: endpoint.latest.clone(),
        };
        self.send_reply(receiver, sender, body, msg.counter);
    }

    fn on_dispute_evidence(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::DisputeEvidence { channel, state } = msg.body else {
            return;
        };
        let Some(meta) = self.channels.get(&channel) else {
            self.reject(receiver, "dispute-evidence", "unknown channel");
            return;
        };
        let Some(dispute) = meta.dispute.clone() else {
            self.reject(receiver, "dispute-evidence", "no dispute open");
            return;
        };
        if dispute.raiser != receiver {
            self.reject(receiver, "dispute-evidence", "not the raiser");
            return;
        }
        let scid = meta.scid;
        let esc = self.ledger.read_esc(scid).unwrap().clone();
        // evidence must verify and cover at least the disputed version
        if state.channel != channel
            || !state.verify(&esc.vkey_i, &esc.vkey_j)
            || state.counter < dispute.disputed_counter
        {
            self.reject(receiver, "dispute-evidence", "bad-signature");
            return;
        }
        // resolved: record the outcome, cancel the deadline, and continue
        // the channel
        self.ledger.cancel_watcher(dispute.watcher);
        let next = esc.with_dispute_outcome(DisputeOutcome::Resolved, state.counter);
        self.commit_esc_dispute(receiver, scid, next);
        self.mirror_dispute_outcome(channel, DisputeOutcome::Resolved, state.counter);
        self.channels.get_mut(&channel).unwrap().dispute = None;
        for pid in [receiver, sender] {
            if let Some(ep) = self.parties[pid.0 as usize].endpoints.get_mut(&channel) {
                ep.phase = Phase::Active;
                ep.dispute = None;
            }
        }
        self.emit_for(
            Some(receiver),
            Event::DisputeResolved {
                channel: hex::encode(channel.0),
                dispute_index: dispute.index,
                evidence_counter: state.counter,
            },
        );
        let body = Body::DisputeClose {
            channel,
            resolved: true,
            evidence_counter: state.counter,
        };
        self.send_reply(receiver, sender, body, msg.counter);
    }

    fn on_dispute_close(&mut self, _sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::DisputeClose {
            channel, resolved, ..
        } = msg.body
        else {
            return;
        };
        if resolved {
            if let Some(ep) = self.parties[receiver.0 as usize]
                .endpoints
                .get_mut(&channel)
            {
                if ep.phase == Phase::Disputed {
                    ep.phase = Phase::Active;
                    ep.dispute = None;
                }
            }
        }
    }

    // -- close flow ----------------------------------------------------------------

    fn on_finalise(&mut self, sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::Finalise { channel, state, .. } = msg.body else {
            return;
        };
        let Some(meta) = self.channels.get(&channel) else {
            self.reject(receiver, "finalise", "unknown channel");
            return;
        };
        if meta.closed {
            self.refuse(receiver, "finalise", "channel already closed");
            return;
        }
        let scid = meta.scid;
        let esc = self.ledger.read_esc(scid).unwrap();
        if state.channel != channel || !state.verify(&esc.vkey_i, &esc.vkey_j) {
            self.reject(receiver, "finalise", "bad-signature");
            return;
        }
        let Some(endpoint) = self.parties[receiver.0 as usize].endpoints.get(&channel) else {
            self.reject(receiver, "finalise", "unknown channel");
            return;
        };
        if state.counter < endpoint.latest.counter {
            // a newer co-signed state exists; refuse the stale close
            self.refuse(receiver, "finalise", "newer co-signed state exists");
            return;
        }
        let body = Body::FinaliseAck {
            channel,
            state_counter: state.counter,
        };
        self.send_reply(receiver, sender, body, msg.counter);
    }

    fn on_finalise_ack(&mut self, _sender: PartyId, receiver: PartyId, msg: ProtocolMessage) {
        let Body::FinaliseAck { channel, .. } = msg.body else {
            return;
        };
        let Some(pos) = self.flows.iter().position(|f| {
            matches!(f, Flow::Close { initiator, channel: c, .. }
                if *initiator == receiver && *c == channel)
        }) else {
            self.reject(receiver, "finalise-ack", "no pending close");
            return;
        };
        let Flow::Close { state, trigger, .. } = self.flows.remove(pos) else {
            return;
        };
        self.settle_channel(channel, state, trigger);
    }

    // -- watchers ----------------------------------------------------------------

    fn handle_watcher(&mut self, watcher: Watcher) {
        let event = Event::WatcherFired {
            watcher: format!("{watcher:?}"),
        };
        self.emit_for(None, event);
        match watcher {
            Watcher::ChannelTimer { channel } => self.on_channel_timer(channel),
            Watcher::DisputeDeadline { channel } => self.on_dispute_deadline(channel),
            Watcher::CloseChallenge { channel } => self.on_close_challenge(channel),
            Watcher::SettlementDue { merchant } => {
                if let Some(book) = self.merchants.get(&merchant) {
                    let period_end = book.period_start + book.policy.period_blocks;
                    self.run_settlement(merchant, period_end);
                }
            }
        }
    }

    fn on_channel_timer(&mut self, channel: ChannelId) {
        match self.channels.get(&channel) {
            Some(meta) if !meta.closed => {
                if meta.pending_close.is_some() {
                    // the challenge watcher settles it
                    return;
                }
                if self.ledger.height() < meta.expires_at {
                    // superseded by the watcher registered at funding time
                    return;
                }
                // the timer elapsed on a live channel: the contract closes it
                // automatically on the newest co-signed state the honest
                // endpoints hold
                if let Some(state) = self.best_honest_state(channel) {
                    self.settle_channel(channel, state, CloseTrigger::TimerElapsed);
                }
            }
            Some(_) => {}
            None => {
                // an open that never completed: release any locked funding
                if let Some(orphans) = self.orphaned_escrows.remove(&channel) {
                    for (escrow, owner) in orphans {
                        let locked = self
                            .ledger
                            .escrow(escrow)
                            .map(|e| e.is_locked())
                            .unwrap_or(false);
                        if locked {
                            if let Ok(amount) = self.ledger.refund_escrow(escrow, &owner) {
                                self.emit_for(
                                    None,
                                    Event::EscrowRefunded {
                                        escrow: escrow.0,
                                        amount,
                                        owner: owner.0.clone(),
                                    },
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    fn best_honest_state(&self, channel: ChannelId) -> Option<VersionedState> {
        let meta = self.channels.get(&channel)?;
        let pick = |corrupted_ok: bool| {
            let mut best: Option<VersionedState> = None;
            for pid in [meta.party_i, meta.party_j] {
                if !corrupted_ok && self.parties[pid.0 as usize].corrupted {
                    continue;
                }
                if let Some(ep) = self.parties[pid.0 as usize].endpoints.get(&channel) {
                    if best
                        .as_ref()
                        .map(|b| ep.latest.counter > b.counter)
                        .unwrap_or(true)
                    {
                        best = Some(ep.latest.clone());
                    }
                }
            }
            best
        };
        pick(false).or_else(|| pick(true))
    }

    fn on_dispute_deadline(&mut self, channel: ChannelId) {
        let dispute = match self.channels.get(&channel) {
            Some(meta) if !meta.closed => meta.dispute.clone(),
            _ => None,
        };
        let Some(dispute) = dispute else {
            return;
        };
        let scid = self.channels[&channel].scid;
        // the deadline passed without valid evidence: unresolved; the
        // contract closes the channel automatically on the last co-signed
        // state
        let esc = self.ledger.read_esc(scid).unwrap().clone();
        let next = esc.with_dispute_outcome(DisputeOutcome::Unresolved, dispute.disputed_counter);
        self.commit_esc_dispute(dispute.raiser, scid, next);
        self.mirror_dispute_outcome(
            channel,
            DisputeOutcome::Unresolved,
            dispute.disputed_counter,
        );
        self.emit_for(
            Some(dispute.raiser),
            Event::DisputeUnresolved {
                channel: hex::encode(channel.0),
                dispute_index: dispute.index,
            },
        );
        self.channels.get_mut(&channel).unwrap().dispute = None;
        if let Some(state) = self.best_honest_state(channel) {
            self.settle_channel(channel, state, CloseTrigger::DisputeUnresolved);
        }
    }

    fn on_close_challenge(&mut self, channel: ChannelId) {
        let pending = match self.channels.get(&channel) {
            Some(meta) if !meta.closed => meta.pending_close.clone(),
            _ => None,
        };
        if let Some(pending) = pending {
            self.settle_channel(channel, pending.state, pending.trigger);
        }
    }

    // -- settlement ----------------------------------------------------------------

    /// Execute a channel's final state: commit the close to the ESC, release
    /// deposits, route the net delta, finalise credit notes, and update both
    /// parties' merchant contracts.
    fn settle_channel(&mut self, channel: ChannelId, state: VersionedState, trigger: CloseTrigger) {
        let (scid, pi, pj, funding, funding_i, funding_j, closed) = {
            let meta = &self.channels[&channel];
            (
                meta.scid,
                meta.party_i,
                meta.party_j,
                meta.funding_totals(),
                meta.funding_i,
                meta.funding_j,
                meta.closed,
            )
        };
        if closed {
            self.refuse(pi, "close", "channel already closed");
            return;
        }
        let esc = self.ledger.read_esc(scid).unwrap().clone();
        let finalise_tx = crypto::hash_bytes(
            &Value::list([
                Value::bytes(b"finalise"),
                Value::bytes(channel.0),
                Value::U64(state.counter),
                Value::bytes(state.hstate.0),
            ])
            .encode(),
        );
        let evidence = FinaliseEvidence {
            channel,
            state: state.clone(),
            funding,
            finalise_tx,
        };
        let next = match contracts::apply_channel_result(&esc, &evidence) {
            Ok(next) => next,
            Err(e) => {
                self.refuse(pi, "close", &e.to_string());
                return;
            }
        };
        self.commit_esc_evidence(pi, scid, next, &state);

        let esc_address = self.escs[&scid].address.clone();
        // release deposits back to their owners; finalise credit notes
        for (pid, fund, final_side) in [
            (pi, funding_i, state.balances.party_i),
            (pj, funding_j, state.balances.party_j),
        ] {
            match fund {
                FundingSource::Deposit { escrow, .. } => {
                    if let Ok(amount) = self.ledger.refund_escrow(escrow, &esc_address) {
                        let owner = self.parties[pid.0 as usize].address.0.clone();
                        self.emit_for(
                            None,
                            Event::EscrowRefunded {
                                escrow: escrow.0,
                                amount,
                                owner,
                            },
                        );
                    }
                }
                FundingSource::CreditNote { note, .. } => {
                    let other = if pid == pi { pj } else { pi };
                    self.finalise_note(pid, other, note, final_side.coins);
                }
            }
            // energy packets return to the party's pool
            self.parties[pid.0 as usize].packets += final_side.packets;
        }
        // net delta routing: a deposit-funded loser pays the winner now; a
        // note-funded loser's debt is collected by the merchant at period end
        let delta_i = state.balances.party_i.coins as i128 - funding.party_i.coins as i128;
        if delta_i != 0 {
            let (loser, winner, amount, loser_fund) = if delta_i < 0 {
                (pi, pj, (-delta_i) as u64, funding_i)
            } else {
                (pj, pi, delta_i as u64, funding_j)
            };
            if !loser_fund.is_credit() {
                let from = self.parties[loser.0 as usize].address.clone();
                let to = self.parties[winner.0 as usize].address.clone();
                match self
                    .ledger
                    .contract_transfer(&from, &to, amount, state.hstate)
                {
                    Ok(_) => {
                        self.emit_for(
                            None,
                            Event::Transfer {
                                from: from.0,
                                to: to.0,
                                amount,
                                contract_authorized: true,
                            },
                        );
                    }
                    Err(e) => self.reject(loser, "close-settle", &e.to_string()),
                }
            }
        }
        // merchants trading on their own behalf track their finals first, so
        // participant contract updates see them
        for (pid, final_side) in [(pi, state.balances.party_i), (pj, state.balances.party_j)] {
            if self.merchants.contains_key(&pid) {
                let acc = self
                    .msc_finals
                    .entry((pid, pid))
                    .or_insert(CoinsPackets::new(0, 0));
                acc.coins += final_side.coins;
                acc.packets += final_side.packets;
            }
        }
        // both parties' merchant contracts learn the finals
        for (pid, final_side) in [(pi, state.balances.party_i), (pj, state.balances.party_j)] {
            let mscs: Vec<(PartyId, Sid)> = self.parties[pid.0 as usize]
                .mscs
                .iter()
                .map(|(m, s)| (*m, *s))
                .collect();
            for (merchant, sid) in mscs {
                let totals = {
                    let acc = self
                        .msc_finals
                        .entry((merchant, pid))
                        .or_insert(CoinsPackets::new(0, 0));
                    acc.coins += final_side.coins;
                    acc.packets += final_side.packets;
                    *acc
                };
                let merchant_final = self
                    .msc_finals
                    .get(&(merchant, merchant))
                    .copied()
                    .unwrap_or(CoinsPackets::new(0, 0));
                let msc = self.ledger.read_msc(sid).unwrap().clone();
                let mut nextm = msc.bump();
                nextm.balances = (nextm.balances.0, totals.coins);
                if self.cfg.mode == Mode::Marketplace {
                    // the final quantities are written alongside the coin
                    // amounts
                    nextm.final_quantity = Some((merchant_final.packets, totals.packets));
                }
                self.commit_msc_update(merchant, nextm);
            }
        }
        // close both endpoints and clean up
        {
            let meta = self.channels.get_mut(&channel).unwrap();
            meta.closed = true;
            meta.pending_close = None;
            let watchers = [
                meta.timer_watcher.take(),
                meta.challenge_watcher.take(),
                meta.dispute.take().map(|d| d.watcher),
            ];
            for w in watchers.into_iter().flatten() {
                self.ledger.cancel_watcher(w);
            }
        }
        self.escs.get_mut(&scid).unwrap().open_channel = None;
        self.orphaned_escrows.remove(&channel);
        for pid in [pi, pj] {
            if let Some(ep) = self.parties[pid.0 as usize].endpoints.get_mut(&channel) {
                ep.phase = Phase::Closed;
                ep.pending = None;
            }
        }
        self.emit_for(
            None,
            Event::ChannelClosed {
                channel: hex::encode(channel.0),
                trigger: close_trigger_label(trigger).to_string(),
                final_counter: state.counter,
                coins_i: state.balances.party_i.coins,
                coins_j: state.balances.party_j.coins,
                packets_i: state.balances.party_i.packets,
                packets_j: state.balances.party_j.packets,
            },
        );
    }

    /// The merchant recalculates and signs the note's final amount; any
    /// shortfall is owed to the counterparty and cleared at settlement.
    fn finalise_note(
        &mut self,
        debtor: PartyId,
        counterparty: PartyId,
        note: NoteId,
        final_share: u64,
    ) {
        let Some((merchant, sid)) = self.find_note_msc(debtor, note) else {
            return;
        };
        let msc = self.ledger.read_msc(sid).unwrap().clone();
        let mut next = msc.bump();
        let mut debt = 0;
        let mut surplus = 0;
        if let Some(n) = next.debit_ledger.iter_mut().find(|n| n.note_id == note) {
            n.status = NoteStatus::Finalised;
            n.final_share = Some(final_share);
            n.payee = Some(self.parties[counterparty.0 as usize].address.clone());
            debt = n.debt();
            surplus = n.surplus();
        }
        self.commit_msc_update(merchant, next);
        self.emit_for(
            Some(debtor),
            Event::NoteFinalised {
                note: note.0,
                final_share,
                debt,
                surplus,
            },
        );
    }

    /// Period-end billing: clear every finalised note against collateral,
    /// pay counterparties, refund remainders, and write the final balances.
    fn run_settlement(&mut self, merchant: PartyId, period_end: u64) {
        let merchant_addr = self.parties[merchant.0 as usize].address.clone();
        let mut report = SettlementReport {
            merchant: self.name_of(merchant),
            period_end,
            ..SettlementReport::default()
        };
        let participants: Vec<PartyId> = self.merchants[&merchant]
            .agreements
            .keys()
            .copied()
            .collect();
        for debtor in participants {
            let Some(sid) = self.parties[debtor.0 as usize].mscs.get(&merchant).copied() else {
                continue;
            };
            let msc = self.ledger.read_msc(sid).unwrap().clone();
            let finalised: Vec<CreditNote> = msc
                .debit_ledger
                .iter()
                .filter(|n| n.status == NoteStatus::Finalised)
                .cloned()
                .collect();
            let debt_total: u64 = finalised.iter().map(|n| n.debt()).sum();
            let surplus_total: u64 = finalised.iter().map(|n| n.surplus()).sum();
            let debtor_name = self.name_of(debtor);
            report.nets.push((
                debtor_name.clone(),
                surplus_total as i64 - debt_total as i64,
            ));

            let collateral = self.merchants[&merchant]
                .agreements
                .get(&debtor)
                .and_then(|a| a.collateral.clone());
            if debt_total > 0 {
                let Some(coll) = collateral else {
                    report.unrecovered.push((debtor_name.clone(), debt_total));
                    self.blacklist_debtor(merchant, debtor);
                    continue;
                };
                match self.ledger.claim_escrow(coll.escrow, &coll.claim_secret) {
                    Ok(claimed) => {
                        self.emit_for(
                            Some(merchant),
                            Event::EscrowClaimed {
                                escrow: coll.escrow.0,
                                amount: claimed,
                                beneficiary: merchant_addr.0.clone(),
                            },
                        );
                        let draw = debt_total.min(claimed);
                        report.collateral_draws.push((coll.escrow, draw));
                        // pay each shortfall to its counterparty
                        let mut remaining = draw;
                        for note in &finalised {
                            let owed = note.debt().min(remaining);
                            if owed == 0 {
                                continue;
                            }
                            let Some(payee) = &note.payee else {
                                continue;
                            };
                            let evidence = CreditNote::signing_digest(
                                note.note_id,
                                note.scid,
                                note.debtor,
                                note.amount,
                            );
                            if self
                                .ledger
                                .contract_transfer(&merchant_addr, payee, owed, evidence)
                                .is_ok()
                            {
                                self.emit_for(
                                    Some(merchant),
                                    Event::Transfer {
                                        from: merchant_addr.0.clone(),
                                        to: payee.0.clone(),
                                        amount: owed,
                                        contract_authorized: true,
                                    },
                                );
                                report.payouts.push((
                                    merchant_addr.0.clone(),
                                    payee.0.clone(),
                                    owed,
                                ));
                            }
                            remaining -= owed;
                        }
                        // the remainder of the collateral refunds to the
                        // debtor
                        let refund = claimed - draw;
                        if refund > 0 {
                            let debtor_addr = self.parties[debtor.0 as usize].address.clone();
                            if self
                                .ledger
                                .contract_transfer(
                                    &merchant_addr,
                                    &debtor_addr,
                                    refund,
                                    Digest([0u8; 32]),
                                )
                                .is_ok()
                            {
                                self.emit_for(
                                    Some(merchant),
                                    Event::Transfer {
                                        from: merchant_addr.0.clone(),
                                        to: debtor_addr.0.clone(),
                                        amount: refund,
                                        contract_authorized: true,
                                    },
                                );
                            }
                        }
                        report.refunds.push((coll.escrow, refund));
                        if debt_total > claimed {
                            report
                                .unrecovered
                                .push((debtor_name.clone(), debt_total - claimed));
                            self.blacklist_debtor(merchant, debtor);
                        }
                    }
                    Err(e) => {
                        self.reject(merchant, "settle-period", &e.to_string());
                        continue;
                    }
                }
            } else if let Some(coll) = collateral {
                // zero net debt: the collateral returns to the applicant
                // intact
                let locked = self
                    .ledger
                    .escrow(coll.escrow)
                    .map(|e| e.is_locked())
                    .unwrap_or(false);
                if locked {
                    if let Ok(amount) = self.ledger.refund_escrow(coll.escrow, &merchant_addr) {
                        let owner = self.parties[debtor.0 as usize].address.0.clone();
                        self.emit_for(
                            Some(merchant),
                            Event::EscrowRefunded {
                                escrow: coll.escrow.0,
                                amount,
                                owner,
                            },
                        );
                        report.refunds.push((coll.escrow, amount));
                    }
                }
            }
            // settle the notes and write the final balances exactly once
            let msc = self.ledger.read_msc(sid).unwrap().clone();
            let mut next = msc.bump();
            for n in next.debit_ledger.iter_mut() {
                if n.status == NoteStatus::Finalised {
                    n.status = NoteStatus::Settled;
                }
            }
            if next.final_balance.is_none() {
                let totals = self
                    .msc_finals
                    .get(&(merchant, debtor))
                    .copied()
                    .unwrap_or(CoinsPackets::new(0, 0));
                next.final_balance = Some((0, totals.coins));
            }
            self.commit_msc_update(merchant, next);
            // the collateral slot clears for the next period
            if let Some(state) = self
                .merchants
                .get_mut(&merchant)
                .unwrap()
                .agreements
                .get_mut(&debtor)
            {
                state.collateral = None;
            }
        }
        self.merchants.get_mut(&merchant).unwrap().period_start = period_end;
        let event = Event::SettlementRun {
            merchant: self.name_of(merchant),
            period_end,
            draws: report
                .collateral_draws
                .iter()
                .map(|(e, a)| (e.0, *a))
                .collect(),
            payouts: report.payouts.clone(),
            refunds: report.refunds.iter().map(|(e, a)| (e.0, *a)).collect(),
            unrecovered: report.unrecovered.clone(),
        };
        self.emit_for(Some(merchant), event);
        self.settlements.push(report);
    }

    fn blacklist_debtor(&mut self, merchant: PartyId, debtor: PartyId) {
        let name = self.name_of(debtor);
        self.merchants
            .get_mut(&merchant)
            .unwrap()
            .dynamic_blacklist
            .insert(name.clone());
        self.emit_for(Some(debtor), Event::BlackListed { party: name });
    }
}

// ---------------------------------------------------------------------------
// Free helpers
// ---------------------------------------------------------------------------

fn derive_address(uutid: &Uutid) -> Address {
    let h = crypto::hash_bytes(&[b"addr".as_slice(), &uutid.0].concat());
    Address(format!("acct:{}", hex::encode(&h.0[..8])))
}

fn derive_contract_address(scid: Scid) -> Address {
    let h = crypto::hash_bytes(&[b"contract".as_slice(), &scid.0].concat());
    Address(format!("esc:{}", hex::encode(&h.0[..8])))
}

fn derive_sid(merchant: Uutid, participant: Uutid, session: u64) -> Sid {
    let h = crypto::hash_bytes(
        &[
            b"sid".as_slice(),
            &merchant.0,
            &participant.0,
            &session.to_be_bytes(),
        ]
        .concat(),
    );
    let mut id = [0u8; 16];
    id.copy_from_slice(&h.0[..16]);
    Sid(id)
}

fn derive_scid(a: Uutid, b: Uutid, n: u64) -> Scid {
    let h = crypto::hash_bytes(&[b"scid".as_slice(), &a.0, &b.0, &n.to_be_bytes()].concat());
    let mut id = [0u8; 16];
    id.copy_from_slice(&h.0[..16]);
    Scid(id)
}

fn derive_channel_id(scid: Scid, index: u64) -> ChannelId {
    let h = crypto::hash_bytes(&[b"chan".as_slice(), &scid.0, &index.to_be_bytes()].concat());
    let mut id = [0u8; 16];
    id.copy_from_slice(&h.0[..16]);
    ChannelId(id)
}

fn adv_round(action: &AdvAction) -> Option<u64> {
    match action {
        AdvAction::Stall { from_round, .. } => Some(*from_round),
        AdvAction::ForgeUpdate { round, .. }
        | AdvAction::ReplayUpdate { round, .. }
        | AdvAction::StaleClose { round, .. } => Some(*round),
        AdvAction::Corrupt { .. } | AdvAction::Delay { .. } => None,
    }
}

fn action_desc(action: &Action) -> String {
    match action {
        Action::ApplyCredit {
            applicant,
            merchant,
            liability,
        } => format!("apply-credit {applicant} -> {merchant} (liability {liability})"),
        Action::MscInit {
            participant,
            merchant,
            use_cns,
        } => format!("msc-init {participant} -> {merchant} (cns {use_cns})"),
        Action::EscInit { initiator, peer } => format!("esc-init {initiator} <-> {peer}"),
        Action::OpenChannel {
            initiator, peer, ..
        } => {
            format!("open-channel {initiator} <-> {peer}")
        }
        Action::TransferCoins { from, to, coins } => format!("transfer {coins} {from} -> {to}"),
        Action::TradeEnergy {
            seller,
            buyer,
            packets,
            unit_price,
        } => format!("trade {packets} packets @ {unit_price} {seller} -> {buyer}"),
        Action::RaiseDispute { raiser, peer, .. } => format!("dispute {raiser} vs {peer}"),
        Action::CloseChannel {
            initiator,
            peer,
            cooperative,
            ..
        } => format!("close {initiator} <-> {peer} (cooperative {cooperative})"),
        Action::SettlePeriod { merchant } => format!("settle-period {merchant}"),
    }
}

fn channel_error_label(e: ChannelError) -> String {
    match e {
        ChannelError::BadSignature => "bad-signature",
        ChannelError::StaleCounter => "stale-counter",
        ChannelError::NonConservingBalance => "non-conserving-balance",
        ChannelError::TimerElapsed => "timer-elapsed",
        ChannelError::ChannelDisputed => "channel-disputed",
        ChannelError::CreditLimitExceeded => "credit-limit-exceeded",
        ChannelError::InsufficientFunds => "insufficient-funds",
        ChannelError::NotActive => "not-active",
        ChannelError::AlreadyClosed => "already-closed",
        ChannelError::StaleClose => "stale-close",
        ChannelError::DuplicateDispute => "duplicate-dispute",
        ChannelError::UnknownTx => "unknown-tx",
        ChannelError::Refused => "refused",
    }
    .to_string()
}

fn close_trigger_label(t: CloseTrigger) -> &'static str {
    match t {
        CloseTrigger::FundsDepleted => "funds-depleted",
        CloseTrigger::TradeComplete => "trade-complete",
        CloseTrigger::TimerElapsed => "timer-elapsed",
        CloseTrigger::DisputeUnresolved => "dispute-unresolved",
    }
}

fn endpoint_funding(endpoint: &Endpoint, side: Side) -> FundingSource {
    match side {
        Side::I => endpoint.funding.0,
        Side::J => endpoint.funding.1,
    }
}
