//! Scenario configuration: parties, merchant policies, the per-round action
//! schedule, adversary scripts, and the built-in scenarios the acceptance
//! suite runs.
//!
//! Built-ins are embedded so the test suite needs zero setup; external
//! configs load from JSON with the same schema.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cns::CnsPolicy;
use crate::marketplace::MarketRole;
use crate::network::DEFAULT_MAX_ADVERSARY_DELAY;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown party {0:?} referenced")]
    UnknownParty(String),
    #[error("party {0:?} declared twice")]
    DuplicateParty(String),
    #[error("{0:?} is not a merchant")]
    NotAMerchant(String),
    #[error("max_rounds must be positive")]
    NoRounds,
    #[error("blocks_per_round must be positive")]
    NoBlocks,
    #[error("schedule entry at round {0} is beyond max_rounds")]
    ActionBeyondEnd(u64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Plain,
    Marketplace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyConfig {
    pub name: String,
    #[serde(default = "default_role")]
    pub role: MarketRole,
    #[serde(default)]
    pub balance: u64,
    /// Energy packets available for channel funding (marketplace mode).
    #[serde(default)]
    pub packets: u64,
    /// Present if this party acts as a merchant; carries its CNS policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merchant: Option<CnsPolicy>,
}

fn default_role() -> MarketRole {
    MarketRole::Prosumer
}

/// How a party funds its side of a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FundingSpec {
    pub coins: u64,
    #[serde(default)]
    pub packets: u64,
    /// Fund with a credit note instead of a locked deposit.
    #[serde(default)]
    pub credit: bool,
}

impl FundingSpec {
    pub fn deposit(coins: u64) -> Self {
        Self {
            coins,
            packets: 0,
            credit: false,
        }
    }

    pub fn deposit_with_packets(coins: u64, packets: u64) -> Self {
        Self {
            coins,
            packets,
            credit: false,
        }
    }

    pub fn credit(coins: u64) -> Self {
        Self {
            coins,
            packets: 0,
            credit: true,
        }
    }
}

/// Environment requests issued to the protocol parties on a given round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Action {
    /// Apply for credit with a merchant (CNS review).
    ApplyCredit {
        applicant: String,
        merchant: String,
        liability: u64,
    },
    MscInit {
        participant: String,
        merchant: String,
        #[serde(default)]
        use_cns: bool,
    },
    EscInit {
        initiator: String,
        peer: String,
    },
    OpenChannel {
        initiator: String,
        peer: String,
        funding_initiator: FundingSpec,
        funding_peer: FundingSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t_delta: Option<u64>,
    },
    /// Propose and co-sign a channel update moving coins between the pair.
    TransferCoins {
        from: String,
        to: String,
        coins: u64,
    },
    /// One fill step of an energy offer inside the pair's channel.
    TradeEnergy {
        seller: String,
        buyer: String,
        packets: u64,
        unit_price: u64,
    },
    RaiseDispute {
        raiser: String,
        peer: String,
        /// Version under dispute; defaults to the raiser's latest.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        disputed_version: Option<u64>,
    },
    CloseChannel {
        initiator: String,
        peer: String,
        #[serde(default = "default_true")]
        cooperative: bool,
        /// Close on an explicit (possibly stale) version instead of latest.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        use_version: Option<u64>,
    },
    SettlePeriod {
        merchant: String,
    },
}

fn default_true() -> bool {
    true
}

impl Action {
    /// Party names this action references, for config validation.
    pub fn referenced_parties(&self) -> Vec<&str> {
        match self {
            Action::ApplyCredit {
                applicant,
                merchant,
                ..
            } => {
                alloc::vec![applicant.as_str(), merchant.as_str()]
            }
            Action::MscInit {
                participant,
                merchant,
                ..
            } => {
                alloc::vec![participant.as_str(), merchant.as_str()]
            }
            Action::EscInit { initiator, peer } => alloc::vec![initiator.as_str(), peer.as_str()],
            Action::OpenChannel {
                initiator, peer, ..
            } => {
                alloc::vec![initiator.as_str(), peer.as_str()]
            }
            Action::TransferCoins { from, to, .. } => alloc::vec![from.as_str(), to.as_str()],
            Action::TradeEnergy { seller, buyer, .. } => {
                alloc::vec![seller.as_str(), buyer.as_str()]
            }
            Action::RaiseDispute { raiser, peer, .. } => {
                alloc::vec![raiser.as_str(), peer.as_str()]
            }
            Action::CloseChannel {
                initiator, peer, ..
            } => {
                alloc::vec![initiator.as_str(), peer.as_str()]
            }
            Action::SettlePeriod { merchant } => alloc::vec![merchant.as_str()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledAction {
    pub round: u64,
    #[serde(flatten)]
    pub action: Action,
}

/// Declarative adversary script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum AdvAction {
    /// Non-adaptive corruption; applied before round 0.
    Corrupt { target: String },
    /// Extra delivery delay on messages `target` sends in a round range.
    Delay {
        target: String,
        from_round: u64,
        to_round: u64,
        extra: u64,
    },
    /// Corrupted party stops participating from this round on
    /// (drop-equivalent stall; honest messages are never dropped).
    Stall { target: String, from_round: u64 },
    /// Corrupted party emits an update-success carrying a forged
    /// counterparty signature, granting itself `take` extra coins.
    ForgeUpdate {
        target: String,
        peer: String,
        round: u64,
        take: u64,
    },
    /// Corrupted party re-sends its captured `update` message for the given
    /// channel version.
    ReplayUpdate {
        target: String,
        peer: String,
        round: u64,
        counter: u64,
    },
    /// Corrupted party submits a unilateral close on a stale version.
    StaleClose {
        target: String,
        peer: String,
        round: u64,
        counter: u64,
    },
}

impl AdvAction {
    pub fn referenced_parties(&self) -> Vec<&str> {
        match self {
            AdvAction::Corrupt { target } | AdvAction::Stall { target, .. } => {
                alloc::vec![target.as_str()]
            }
            AdvAction::Delay { target, .. } => alloc::vec![target.as_str()],
            AdvAction::ForgeUpdate { target, peer, .. }
            | AdvAction::ReplayUpdate { target, peer, .. }
            | AdvAction::StaleClose { target, peer, .. } => {
                alloc::vec![target.as_str(), peer.as_str()]
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryScript {
    #[serde(default)]
    pub actions: Vec<AdvAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    /// The pre-agreed timer used for funding locks, dispute deadlines and
    /// challenge windows, unless an open overrides it.
    #[serde(default = "default_t_delta")]
    pub t_delta: u64,
    #[serde(default = "default_blocks_per_round")]
    pub blocks_per_round: u64,
    pub max_rounds: u64,
    #[serde(default = "default_max_delay")]
    pub max_adversary_delay: u64,
    /// Rounds a party waits for a protocol answer before aborting.
    #[serde(default = "default_abort_timeout")]
    pub abort_timeout_rounds: u64,
    /// Raised-dispute count at which a party is grey-listed.
    #[serde(default = "default_grey")]
    pub dispute_grey_threshold: u32,
    /// Raised-dispute count at which a party is blacklisted and new ESCs
    /// with it are refused.
    #[serde(default = "default_black")]
    pub dispute_black_threshold: u32,
    pub parties: Vec<PartyConfig>,
    #[serde(default)]
    pub adversary: AdversaryScript,
    #[serde(default)]
    pub schedule: Vec<ScheduledAction>,
}

fn default_t_delta() -> u64 {
    50
}
fn default_blocks_per_round() -> u64 {
    1
}
fn default_max_delay() -> u64 {
    DEFAULT_MAX_ADVERSARY_DELAY
}
fn default_abort_timeout() -> u64 {
    3
}
fn default_grey() -> u32 {
    3
}
fn default_black() -> u32 {
    5
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_rounds == 0 {
            return Err(ConfigError::NoRounds);
        }
        if self.blocks_per_round == 0 {
            return Err(ConfigError::NoBlocks);
        }
        let mut names: Vec<&str> = Vec::new();
        for p in &self.parties {
            if names.contains(&p.name.as_str()) {
                return Err(ConfigError::DuplicateParty(p.name.clone()));
            }
            names.push(&p.name);
        }
        let known = |n: &str| names.contains(&n);
        for entry in &self.schedule {
            if entry.round >= self.max_rounds {
                return Err(ConfigError::ActionBeyondEnd(entry.round));
            }
            for name in entry.action.referenced_parties() {
                if !known(name) {
                    return Err(ConfigError::UnknownParty(name.to_string()));
                }
            }
            let merchant_ref = match &entry.action {
                Action::ApplyCredit { merchant, .. }
                | Action::MscInit { merchant, .. }
                | Action::SettlePeriod { merchant } => Some(merchant),
                _ => None,
            };
            if let Some(m) = merchant_ref {
                let is_merchant = self
                    .parties
                    .iter()
                    .any(|p| &p.name == m && p.merchant.is_some());
                if !is_merchant {
                    return Err(ConfigError::NotAMerchant(m.clone()));
                }
            }
        }
        for adv in &self.adversary.actions {
            for name in adv.referenced_parties() {
                if !known(name) {
                    return Err(ConfigError::UnknownParty(name.to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn party_names(&self) -> Vec<String> {
        self.parties.iter().map(|p| p.name.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Built-in scenarios
// ---------------------------------------------------------------------------

pub const BUILTIN_NAMES: &[&str] = &[
    "honest-trade",
    "griefing-stall",
    "forge-update",
    "replay",
    "stale-close",
    "dispute-storm",
    "cns-default",
    "cns-rejected-fallback",
    "env-rules",
    "energy-trade",
    "energy-partial-fill",
    "energy-tso",
];

pub fn builtin(name: &str) -> Option<ScenarioConfig> {
    match name {
        "honest-trade" => Some(honest_trade()),
        "griefing-stall" => Some(griefing_stall()),
        "forge-update" => Some(forge_update()),
        "replay" => Some(replay()),
        "stale-close" => Some(stale_close()),
        "dispute-storm" => Some(dispute_storm()),
        "cns-default" => Some(cns_default()),
        "cns-rejected-fallback" => Some(cns_rejected_fallback()),
        "env-rules" => Some(env_rules()),
        "energy-trade" => Some(energy_trade()),
        "energy-partial-fill" => Some(energy_partial_fill()),
        "energy-tso" => Some(energy_tso()),
        _ => None,
    }
}

fn base_parties() -> Vec<PartyConfig> {
    alloc::vec![
        PartyConfig {
            name: "acme".to_string(),
            role: MarketRole::Distributor,
            balance: 1000,
            packets: 0,
            merchant: Some(CnsPolicy::default()),
        },
        PartyConfig {
            name: "alice".to_string(),
            role: MarketRole::Prosumer,
            balance: 500,
            packets: 0,
            merchant: None,
        },
        PartyConfig {
            name: "bob".to_string(),
            role: MarketRole::Prosumer,
            balance: 500,
            packets: 0,
            merchant: None,
        },
    ]
}

fn at(round: u64, action: Action) -> ScheduledAction {
    ScheduledAction { round, action }
}

fn msc_and_esc_prelude() -> Vec<ScheduledAction> {
    alloc::vec![
        at(
            0,
            Action::MscInit {
                participant: "alice".to_string(),
                merchant: "acme".to_string(),
                use_cns: false,
            }
        ),
        at(
            0,
            Action::MscInit {
                participant: "bob".to_string(),
                merchant: "acme".to_string(),
                use_cns: false,
            }
        ),
        at(
            4,
            Action::EscInit {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
            }
        ),
    ]
}

fn honest_trade() -> ScenarioConfig {
    let mut schedule = msc_and_esc_prelude();
    schedule.push(at(
        8,
        Action::OpenChannel {
            initiator: "alice".to_string(),
            peer: "bob".to_string(),
            funding_initiator: FundingSpec::deposit(100),
            funding_peer: FundingSpec::deposit(100),
            t_delta: None,
        },
    ));
    // five co-signed updates, net 25 alice -> bob
    for (k, (from, to, coins)) in [
        ("alice", "bob", 10u64),
        ("bob", "alice", 5),
        ("alice", "bob", 10),
        ("alice", "bob", 15),
        ("bob", "alice", 5),
    ]
    .iter()
    .enumerate()
    {
        schedule.push(at(
            12 + 3 * k as u64,
            Action::TransferCoins {
                from: from.to_string(),
                to: to.to_string(),
                coins: *coins,
            },
        ));
    }
    schedule.push(at(
        28,
        Action::CloseChannel {
            initiator: "alice".to_string(),
            peer: "bob".to_string(),
            cooperative: true,
            use_version: None,
        },
    ));
    ScenarioConfig {
        name: "honest-trade".to_string(),
        seed: 42,
        mode: Mode::Plain,
        t_delta: 50,
        blocks_per_round: 1,
        max_rounds: 40,
        max_adversary_delay: DEFAULT_MAX_ADVERSARY_DELAY,
        abort_timeout_rounds: 3,
        dispute_grey_threshold: 3,
        dispute_black_threshold: 5,
        parties: base_parties(),
        adversary: AdversaryScript::default(),
        schedule,
    }
}

fn griefing_stall() -> ScenarioConfig {
    let mut cfg = honest_trade();
    cfg.name = "griefing-stall".to_string();
    cfg.t_delta = 20;
    cfg.max_rounds = 60;
    // one update completes, then bob goes silent; alice's later proposal gets
    // no answer and the channel timer releases her funds
    cfg.schedule = msc_and_esc_prelude();
    cfg.schedule.push(at(
        8,
        Action::OpenChannel {
            initiator: "alice".to_string(),
            peer: "bob".to_string(),
            funding_initiator: FundingSpec::deposit(100),
            funding_peer: FundingSpec::deposit(100),
            t_delta: Some(20),
        },
    ));
    cfg.schedule.push(at(
        12,
        Action::TransferCoins {
            from: "alice".to_string(),
            to: "bob".to_string(),
            coins: 10,
        },
    ));
    cfg.schedule.push(at(
        16,
        Action::TransferCoins {
            from: "alice".to_string(),
            to: "bob".to_string(),
            coins: 5,
        },
    ));
    cfg.adversary = AdversaryScript {
        actions: alloc::vec![
            AdvAction::Corrupt {
                target: "bob".to_string()
            },
            AdvAction::Stall {
                target: "bob".to_string(),
                from_round: 15
            },
        ],
    };
    cfg
}

fn forge_update() -> ScenarioConfig {
    let mut cfg = honest_trade();
    cfg.name = "forge-update".to_string();
    cfg.max_rounds = 60;
    cfg.schedule = msc_and_esc_prelude();
    cfg.schedule.push(at(
        8,
        Action::OpenChannel {
            initiator: "alice".to_string(),
            peer: "bob".to_string(),
            funding_initiator: FundingSpec::deposit(100),
            funding_peer: FundingSpec::deposit(100),
            t_delta: Some(25),
        },
    ));
    cfg.schedule.push(at(
        12,
        Action::TransferCoins {
            from: "alice".to_string(),
            to: "bob".to_string(),
            coins: 10,
        },
    ));
    cfg.adversary = AdversaryScript {
        actions: alloc::vec![
            AdvAction::Corrupt {
                target: "bob".to_string()
            },
            AdvAction::ForgeUpdate {
                target: "bob".to_string(),
                peer: "alice".to_string(),
                round: 16,
                take: 50,
            },
            AdvAction::Stall {
                target: "bob".to_string(),
                from_round: 17
            },
        ],
    };
    cfg
}

fn replay() -> ScenarioConfig {
    let mut cfg = honest_trade();
    cfg.name = "replay".to_string();
    cfg.max_rounds = 70;
    cfg.schedule = msc_and_esc_prelude();
    cfg.schedule.push(at(
        8,
        Action::OpenChannel {
            initiator: "alice".to_string(),
            peer: "bob".to_string(),
            funding_initiator: FundingSpec::deposit(100),
            funding_peer: FundingSpec::deposit(100),
            t_delta: Some(30),
        },
    ));
    for (k, coins) in [10u64, 5, 8].iter().enumerate() {
        cfg.schedule.push(at(
            12 + 3 * k as u64,
            Action::TransferCoins {
                from: "bob".to_string(),
                to: "alice".to_string(),
                coins: *coins,
            },
        ));
    }
    cfg.adversary = AdversaryScript {
        actions: alloc::vec![
            AdvAction::Corrupt {
                target: "bob".to_string()
            },
            // bob re-sends his version-1 update after version 3 is co-signed
            AdvAction::ReplayUpdate {
                target: "bob".to_string(),
                peer: "alice".to_string(),
                round: 22,
                counter: 1,
            },
            AdvAction::Stall {
                target: "bob".to_string(),
                from_round: 23
            },
        ],
    };
    cfg
}

fn stale_close() -> ScenarioConfig {
    let mut cfg = honest_trade();
    cfg.name = "stale-close".to_string();
    cfg.max_rounds = 80;
    cfg.schedule = msc_and_esc_prelude();
    cfg.schedule.push(at(
        8,
        Action::OpenChannel {
            initiator: "alice".to_string(),
            peer: "bob".to_string(),
            funding_initiator: FundingSpec::deposit(100),
            funding_peer: FundingSpec::deposit(100),
            t_delta: Some(30),
        },
    ));
    // four updates: version 4 leaves bob worse off than version 2
    for (k, (from, to, coins)) in [
        ("alice", "bob", 10u64),
        ("alice", "bob", 10),
        ("bob", "alice", 30),
        ("bob", "alice", 10),
    ]
    .iter()
    .enumerate()
    {
        cfg.schedule.push(at(
            12 + 3 * k as u64,
            Action::TransferCoins {
                from: from.to_string(),
                to: to.to_string(),
                coins: *coins,
            },
        ));
    }
    cfg.adversary = AdversaryScript {
        actions: alloc::vec![
            AdvAction::Corrupt {
                target: "bob".to_string()
            },
            AdvAction::Stall {
                target: "bob".to_string(),
                from_round: 25
            },
            // bob tries to settle on version 2, where he still held the coins
            AdvAction::StaleClose {
                target: "bob".to_string(),
                peer: "alice".to_string(),
                round: 26,
                counter: 2,
            },
        ],
    };
    cfg
}

fn dispute_storm() -> ScenarioConfig {
    let mut parties = base_parties();
    parties.push(PartyConfig {
        name: "carol".to_string(),
        role: MarketRole::Prosumer,
        balance: 500,
        packets: 0,
        merchant: None,
    });
    let mut schedule = msc_and_esc_prelude();
    schedule.push(at(
        0,
        Action::MscInit {
            participant: "carol".to_string(),
            merchant: "acme".to_string(),
            use_cns: false,
        },
    ));
    schedule.push(at(
        8,
        Action::OpenChannel {
            initiator: "alice".to_string(),
            peer: "bob".to_string(),
            funding_initiator: FundingSpec::deposit(100),
            funding_peer: FundingSpec::deposit(100),
            t_delta: Some(200),
        },
    ));
    schedule.push(at(
        12,
        Action::TransferCoins {
            from: "alice".to_string(),
            to: "bob".to_string(),
            coins: 10,
        },
    ));
    // bob raises five disputes; each is resolved by alice's evidence, but
    // the remarks pile up: grey at 3, blacklisted at 5
    for k in 0..5u64 {
        schedule.push(at(
            16 + 6 * k,
            Action::RaiseDispute {
                raiser: "bob".to_string(),
                peer: "alice".to_string(),
                disputed_version: None,
            },
        ));
    }
    // blacklisted bob can no longer open ESCs
    schedule.push(at(
        50,
        Action::EscInit {
            initiator: "bob".to_string(),
            peer: "carol".to_string(),
        },
    ));
    schedule.push(at(
        54,
        Action::CloseChannel {
            initiator: "alice".to_string(),
            peer: "bob".to_string(),
            cooperative: true,
            use_version: None,
        },
    ));
    ScenarioConfig {
        name: "dispute-storm".to_string(),
        seed: 42,
        mode: Mode::Plain,
        t_delta: 200,
        blocks_per_round: 1,
        max_rounds: 70,
        max_adversary_delay: DEFAULT_MAX_ADVERSARY_DELAY,
        abort_timeout_rounds: 3,
        dispute_grey_threshold: 3,
        dispute_black_threshold: 5,
        parties,
        adversary: AdversaryScript::default(),
        schedule,
    }
}

fn cns_default() -> ScenarioConfig {
    let mut cfg = honest_trade();
    cfg.name = "cns-default".to_string();
    cfg.max_rounds = 80;
    cfg.schedule = alloc::vec![
        at(
            0,
            Action::ApplyCredit {
                applicant: "alice".to_string(),
                merchant: "acme".to_string(),
                liability: 100,
            }
        ),
        at(
            1,
            Action::MscInit {
                participant: "alice".to_string(),
                merchant: "acme".to_string(),
                use_cns: true,
            }
        ),
        at(
            1,
            Action::MscInit {
                participant: "bob".to_string(),
                merchant: "acme".to_string(),
                use_cns: false,
            }
        ),
        at(
            5,
            Action::EscInit {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
            }
        ),
        at(
            9,
            Action::OpenChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                funding_initiator: FundingSpec::credit(100),
                funding_peer: FundingSpec::deposit(100),
                t_delta: Some(40),
            }
        ),
        // alice ends 40 down: her credit-note debt is drawn from collateral
        at(
            13,
            Action::TransferCoins {
                from: "alice".to_string(),
                to: "bob".to_string(),
                coins: 25,
            }
        ),
        at(
            16,
            Action::TransferCoins {
                from: "alice".to_string(),
                to: "bob".to_string(),
                coins: 15,
            }
        ),
        at(
            20,
            Action::CloseChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                cooperative: true,
                use_version: None,
            }
        ),
        at(
            65,
            Action::SettlePeriod {
                merchant: "acme".to_string()
            }
        ),
    ];
    // billing period must cover the collateral's time lock
    if let Some(p) = cfg.parties.iter_mut().find(|p| p.name == "acme") {
        p.merchant = Some(CnsPolicy {
            period_blocks: 60,
            collateral_window: 50,
            ..CnsPolicy::default()
        });
    }
    cfg
}

fn cns_rejected_fallback() -> ScenarioConfig {
    let mut cfg = honest_trade();
    cfg.name = "cns-rejected-fallback".to_string();
    cfg.max_rounds = 50;
    if let Some(p) = cfg.parties.iter_mut().find(|p| p.name == "acme") {
        p.merchant = Some(CnsPolicy {
            blacklist: alloc::vec!["alice".to_string()],
            ..CnsPolicy::default()
        });
    }
    cfg.schedule = alloc::vec![
        // alice is blacklisted with acme: the review is rejected
        at(
            0,
            Action::ApplyCredit {
                applicant: "alice".to_string(),
                merchant: "acme".to_string(),
                liability: 100,
            }
        ),
        // ... but she can still use the protocol with locked deposits
        at(
            1,
            Action::MscInit {
                participant: "alice".to_string(),
                merchant: "acme".to_string(),
                use_cns: false,
            }
        ),
        at(
            1,
            Action::MscInit {
                participant: "bob".to_string(),
                merchant: "acme".to_string(),
                use_cns: false,
            }
        ),
        at(
            5,
            Action::EscInit {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
            }
        ),
        at(
            9,
            Action::OpenChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                funding_initiator: FundingSpec::deposit(80),
                funding_peer: FundingSpec::deposit(80),
                t_delta: None,
            }
        ),
        at(
            13,
            Action::TransferCoins {
                from: "alice".to_string(),
                to: "bob".to_string(),
                coins: 20,
            }
        ),
        at(
            16,
            Action::CloseChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                cooperative: true,
                use_version: None,
            }
        ),
    ];
    cfg
}

/// Exercises the seven forbidden environment requests; each must return ⊥
/// with no state change.
fn env_rules() -> ScenarioConfig {
    let mut cfg = honest_trade();
    cfg.name = "env-rules".to_string();
    cfg.max_rounds = 90;
    cfg.t_delta = 60;
    cfg.schedule = msc_and_esc_prelude();
    cfg.schedule.extend([
        // (3) update a channel that is not open
        at(
            7,
            Action::TransferCoins {
                from: "alice".to_string(),
                to: "bob".to_string(),
                coins: 1,
            },
        ),
        at(
            8,
            Action::OpenChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                funding_initiator: FundingSpec::deposit(100),
                funding_peer: FundingSpec::deposit(100),
                t_delta: Some(60),
            },
        ),
        // (1) open a channel that is already open
        at(
            13,
            Action::OpenChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                funding_initiator: FundingSpec::deposit(10),
                funding_peer: FundingSpec::deposit(10),
                t_delta: Some(60),
            },
        ),
        at(
            14,
            Action::TransferCoins {
                from: "alice".to_string(),
                to: "bob".to_string(),
                coins: 10,
            },
        ),
        at(
            17,
            Action::RaiseDispute {
                raiser: "alice".to_string(),
                peer: "bob".to_string(),
                disputed_version: None,
            },
        ),
        // (5) update while in a dispute, (6) dispute while one is raised
        at(
            18,
            Action::TransferCoins {
                from: "alice".to_string(),
                to: "bob".to_string(),
                coins: 5,
            },
        ),
        at(
            18,
            Action::RaiseDispute {
                raiser: "bob".to_string(),
                peer: "alice".to_string(),
                disputed_version: None,
            },
        ),
        // (4) close in an old state when a newer one exists
        at(
            24,
            Action::TransferCoins {
                from: "bob".to_string(),
                to: "alice".to_string(),
                coins: 3,
            },
        ),
        at(
            28,
            Action::CloseChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                cooperative: true,
                use_version: Some(1),
            },
        ),
        at(
            30,
            Action::CloseChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                cooperative: true,
                use_version: None,
            },
        ),
        // (2) close a channel that is already closed
        at(
            34,
            Action::CloseChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                cooperative: true,
                use_version: None,
            },
        ),
        // five disputes across short-lived channels push the pair over the
        // ESC dispute limit, then (7) opening yet another channel is refused
        at(
            36,
            Action::OpenChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                funding_initiator: FundingSpec::deposit(50),
                funding_peer: FundingSpec::deposit(50),
                t_delta: Some(40),
            },
        ),
    ]);
    for k in 0..4u64 {
        cfg.schedule.push(at(
            41 + 6 * k,
            Action::RaiseDispute {
                raiser: "alice".to_string(),
                peer: "bob".to_string(),
                disputed_version: None,
            },
        ));
    }
    cfg.schedule.extend([
        at(
            66,
            Action::CloseChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                cooperative: true,
                use_version: None,
            },
        ),
        // dispute count (1 + 4 = 5) is at the limit: refused
        at(
            70,
            Action::OpenChannel {
                initiator: "alice".to_string(),
                peer: "bob".to_string(),
                funding_initiator: FundingSpec::deposit(10),
                funding_peer: FundingSpec::deposit(10),
                t_delta: Some(10),
            },
        ),
    ]);
    cfg
}

fn energy_parties() -> Vec<PartyConfig> {
    alloc::vec![
        PartyConfig {
            name: "grid".to_string(),
            role: MarketRole::Distributor,
            balance: 2000,
            packets: 100,
            merchant: Some(CnsPolicy {
                period_blocks: 60,
                collateral_window: 40,
                ..CnsPolicy::default()
            }),
        },
        PartyConfig {
            name: "carl".to_string(),
            role: MarketRole::Consumer,
            balance: 400,
            packets: 0,
            merchant: None,
        },
        PartyConfig {
            name: "paula".to_string(),
            role: MarketRole::Producer,
            balance: 400,
            packets: 50,
            merchant: None,
        },
    ]
}

fn energy_prelude() -> Vec<ScheduledAction> {
    alloc::vec![
        at(
            0,
            Action::MscInit {
                participant: "carl".to_string(),
                merchant: "grid".to_string(),
                use_cns: false,
            }
        ),
        at(
            0,
            Action::MscInit {
                participant: "paula".to_string(),
                merchant: "grid".to_string(),
                use_cns: false,
            }
        ),
        at(
            4,
            Action::EscInit {
                initiator: "carl".to_string(),
                peer: "paula".to_string(),
            }
        ),
        at(
            8,
            Action::OpenChannel {
                initiator: "carl".to_string(),
                peer: "paula".to_string(),
                funding_initiator: FundingSpec::deposit(100),
                funding_peer: FundingSpec::deposit_with_packets(100, 10),
                t_delta: Some(40),
            }
        ),
    ]
}

fn energy_trade() -> ScenarioConfig {
    let mut schedule = energy_prelude();
    schedule.push(at(
        12,
        Action::TradeEnergy {
            seller: "paula".to_string(),
            buyer: "carl".to_string(),
            packets: 10,
            unit_price: 5,
        },
    ));
    schedule.push(at(
        16,
        Action::CloseChannel {
            initiator: "carl".to_string(),
            peer: "paula".to_string(),
            cooperative: true,
            use_version: None,
        },
    ));
    ScenarioConfig {
        name: "energy-trade".to_string(),
        seed: 42,
        mode: Mode::Marketplace,
        t_delta: 40,
        blocks_per_round: 1,
        max_rounds: 40,
        max_adversary_delay: DEFAULT_MAX_ADVERSARY_DELAY,
        abort_timeout_rounds: 3,
        dispute_grey_threshold: 3,
        dispute_black_threshold: 5,
        parties: energy_parties(),
        adversary: AdversaryScript::default(),
        schedule,
    }
}

fn energy_partial_fill() -> ScenarioConfig {
    let mut cfg = energy_trade();
    cfg.name = "energy-partial-fill".to_string();
    cfg.schedule = energy_prelude();
    for (k, q) in [4u64, 3, 3].iter().enumerate() {
        cfg.schedule.push(at(
            12 + 3 * k as u64,
            Action::TradeEnergy {
                seller: "paula".to_string(),
                buyer: "carl".to_string(),
                packets: *q,
                unit_price: 5,
            },
        ));
    }
    cfg.schedule.push(at(
        22,
        Action::CloseChannel {
            initiator: "carl".to_string(),
            peer: "paula".to_string(),
            cooperative: true,
            use_version: None,
        },
    ));
    cfg.max_rounds = 45;
    cfg
}

/// Merchant as seller (TSO): the consumer funds with a credit note and the
/// debt settles through the CNS at period end.
fn energy_tso() -> ScenarioConfig {
    let schedule = alloc::vec![
        at(
            0,
            Action::ApplyCredit {
                applicant: "carl".to_string(),
                merchant: "grid".to_string(),
                liability: 100,
            }
        ),
        at(
            1,
            Action::MscInit {
                participant: "carl".to_string(),
                merchant: "grid".to_string(),
                use_cns: true,
            }
        ),
        at(
            5,
            Action::EscInit {
                initiator: "carl".to_string(),
                peer: "grid".to_string(),
            }
        ),
        at(
            9,
            Action::OpenChannel {
                initiator: "carl".to_string(),
                peer: "grid".to_string(),
                funding_initiator: FundingSpec::credit(100),
                funding_peer: FundingSpec::deposit_with_packets(0, 20),
                t_delta: Some(30),
            }
        ),
        at(
            13,
            Action::TradeEnergy {
                seller: "grid".to_string(),
                buyer: "carl".to_string(),
                packets: 8,
                unit_price: 5,
            }
        ),
        at(
            17,
            Action::CloseChannel {
                initiator: "carl".to_string(),
                peer: "grid".to_string(),
                cooperative: true,
                use_version: None,
            }
        ),
        at(
            62,
            Action::SettlePeriod {
                merchant: "grid".to_string()
            }
        ),
    ];
    ScenarioConfig {
        name: "energy-tso".to_string(),
        seed: 42,
        mode: Mode::Marketplace,
        t_delta: 30,
        blocks_per_round: 1,
        max_rounds: 70,
        max_adversary_delay: DEFAULT_MAX_ADVERSARY_DELAY,
        abort_timeout_rounds: 3,
        dispute_grey_threshold: 3,
        dispute_black_threshold: 5,
        parties: energy_parties(),
        adversary: AdversaryScript::default(),
        schedule,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_validate() {
        for name in BUILTIN_NAMES {
            let cfg = builtin(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&cfg.name, name);
        }
    }

    #[test]
    fn unknown_builtin_is_none() {
        assert!(builtin("no-such-scenario").is_none());
    }

    #[test]
    fn unknown_party_reference_rejected() {
        let mut cfg = builtin("honest-trade").unwrap();
        cfg.schedule.push(ScheduledAction {
            round: 1,
            action: Action::TransferCoins {
                from: "nobody".to_string(),
                to: "alice".to_string(),
                coins: 1,
            },
        });
        assert_eq!(
            cfg.validate(),
            Err(ConfigError::UnknownParty("nobody".to_string()))
        );
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = builtin("cns-default").unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn settle_without_merchant_flag_rejected() {
        let mut cfg = builtin("honest-trade").unwrap();
        cfg.schedule.push(ScheduledAction {
            round: 1,
            action: Action::SettlePeriod {
                merchant: "alice".to_string(),
            },
        });
        assert_eq!(
            cfg.validate(),
            Err(ConfigError::NotAMerchant("alice".to_string()))
        );
    }
}
