//! Control-plane dissemination strategies. Policies and metadata must meet
//! at some broker for every (policy, metadata) pair; each strategy routes
//! them so a quorum of brokers guarantees that, and designates the unique
//! matcher allowed to fire a given (policy, target) pair.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;

use crate::matching::EntryKind;
use crate::model::{BrokerId, ClientId, MessageId};
use crate::policy::{Policy, StateConditionKind};

/// Which control-routing strategy the deployment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    MetadataFlood,
    PolicyFlood,
    Rendezvous,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::MetadataFlood => "metadata-flood",
            Strategy::PolicyFlood => "policy-flood",
            Strategy::Rendezvous => "rendezvous",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        Some(match s {
            "metadata-flood" => Strategy::MetadataFlood,
            "policy-flood" => Strategy::PolicyFlood,
            "rendezvous" => Strategy::Rendezvous,
            _ => return None,
        })
    }
}

/// Which publication forwarding scheme the brokers run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Forwarding {
    AdvertisementBased,
    Rendezvous,
}

impl Forwarding {
    pub fn label(self) -> &'static str {
        match self {
            Forwarding::AdvertisementBased => "adv",
            Forwarding::Rendezvous => "rendezvous",
        }
    }

    pub fn parse(s: &str) -> Option<Forwarding> {
        Some(match s {
            "adv" => Forwarding::AdvertisementBased,
            "rendezvous" | "rzv" => Forwarding::Rendezvous,
            _ => return None,
        })
    }
}

/// Strategy instance installed on a broker; the rendezvous broker is
/// controller-designated and must exist in the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub rendezvous: Option<BrokerId>,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy, rendezvous: Option<BrokerId>) -> StrategyConfig {
        StrategyConfig {
            strategy,
            rendezvous,
        }
    }
}

/// Brokers that must store a client's metadata record.
pub fn destinations_for_metadata(
    cfg: &StrategyConfig,
    client_edge: BrokerId,
    brokers: &BTreeSet<BrokerId>,
) -> BTreeSet<BrokerId> {
    match cfg.strategy {
        Strategy::MetadataFlood => brokers.clone(),
        Strategy::PolicyFlood => [client_edge].into_iter().collect(),
        Strategy::Rendezvous => {
            // The ingress edge relays and retains a copy for recovery.
            let mut set = BTreeSet::new();
            set.insert(client_edge);
            set.extend(cfg.rendezvous);
            set
        }
    }
}

/// Brokers that must store a policy.
pub fn destinations_for_policy(
    cfg: &StrategyConfig,
    owner_edge: BrokerId,
    brokers: &BTreeSet<BrokerId>,
) -> BTreeSet<BrokerId> {
    match cfg.strategy {
        Strategy::PolicyFlood => brokers.clone(),
        Strategy::MetadataFlood => [owner_edge].into_iter().collect(),
        Strategy::Rendezvous => {
            let mut set = BTreeSet::new();
            set.insert(owner_edge);
            set.extend(cfg.rendezvous);
            set
        }
    }
}

/// The unique broker allowed to fire (policy, target). Firing instructions
/// are then routed to the target's edge broker for injection.
pub fn designated_matcher(
    cfg: &StrategyConfig,
    owner_edge: BrokerId,
    target_edge: BrokerId,
) -> BrokerId {
    match cfg.strategy {
        Strategy::MetadataFlood => owner_edge,
        Strategy::PolicyFlood => target_edge,
        Strategy::Rendezvous => cfg.rendezvous.unwrap_or(owner_edge),
    }
}

/// Whether the designated matcher can see the target's entries of the given
/// kind. Advertisements are flooded everywhere under advertisement-based
/// forwarding; subscriptions are path-local; under rendezvous forwarding
/// both kinds reach the rendezvous broker; a target's edge broker always
/// holds all of the target's own entries.
fn matcher_knows(strategy: Strategy, forwarding: Forwarding, kind: EntryKind) -> bool {
    match strategy {
        Strategy::PolicyFlood => true,
        Strategy::MetadataFlood => {
            kind == EntryKind::Advertisement && forwarding == Forwarding::AdvertisementBased
        }
        Strategy::Rendezvous => match forwarding {
            Forwarding::Rendezvous => true,
            Forwarding::AdvertisementBased => kind == EntryKind::Advertisement,
        },
    }
}

/// Install-time check: a policy whose state conditions the designated
/// matcher cannot evaluate on its local tables is rejected with a
/// diagnostic rather than silently evaluated on partial state.
pub fn check_policy_supported(
    pol: &Policy,
    strategy: Strategy,
    forwarding: Forwarding,
) -> Result<(), String> {
    for cond in &pol.state_conditions {
        let kind = cond.kind.entry_kind();
        if !matcher_knows(strategy, forwarding, kind) {
            return Err(format!(
                "policy {}: `{}` condition cannot be evaluated under {} control routing with {} forwarding",
                pol.id,
                cond.kind.label(),
                strategy.label(),
                forwarding.label(),
            ));
        }
    }
    let _ = StateConditionKind::HasSub;
    Ok(())
}

/// One broker's control-plane holdings, for quorum verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlSnapshot {
    pub broker: BrokerId,
    pub policies: BTreeSet<MessageId>,
    pub metadata: BTreeSet<ClientId>,
}

impl ControlSnapshot {
    pub fn new(broker: BrokerId) -> ControlSnapshot {
        ControlSnapshot {
            broker,
            policies: BTreeSet::new(),
            metadata: BTreeSet::new(),
        }
    }
}

/// True iff for every (policy, metadata) pair some broker stores both.
pub fn verify_quorum(
    policies: &[MessageId],
    metadata: &[ClientId],
    snapshots: &[ControlSnapshot],
) -> bool {
    policies.iter().all(|pol| {
        metadata.iter().all(|md| {
            snapshots
                .iter()
                .any(|s| s.policies.contains(pol) && s.metadata.contains(md))
        })
    })
}
