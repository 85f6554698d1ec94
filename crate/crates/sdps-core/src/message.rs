//! The transport-agnostic message set exchanged between clients, brokers,
//! and the controller. The simulator delivers these in memory; the daemons
//! carry the same messages over newline-delimited TCP lines.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::matching::Entry;
use crate::model::{BrokerId, ClientId, ClientRole, MessageId, NodeId, Publication};
use crate::policy::{FireOrder, Metadata, PolicyText, PubRule};
use crate::routing::{Forwarding, Strategy, StrategyConfig};

/// Publication forwarding state machine a broker runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    AdvertisementBased,
    /// Relay everything toward the rendezvous root.
    Rendezvous {
        relay: BrokerId,
    },
    /// This broker is the rendezvous root and performs all matching.
    RendezvousRoot,
}

impl Mode {
    pub fn forwarding(&self) -> Forwarding {
        match self {
            Mode::AdvertisementBased => Forwarding::AdvertisementBased,
            _ => Forwarding::Rendezvous,
        }
    }
}

/// Message-type counter key used in broker statistics and metrics tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MsgKind {
    Adv,
    Unadv,
    Sub,
    Unsub,
    Pub,
    Deliver,
    Feedback,
    Meta,
    Policy,
    Unpolicy,
    Fire,
    PubRule,
    Control,
    Bootstrap,
    Heartbeat,
    Err,
}

impl MsgKind {
    pub const ALL: [MsgKind; 16] = [
        MsgKind::Adv,
        MsgKind::Unadv,
        MsgKind::Sub,
        MsgKind::Unsub,
        MsgKind::Pub,
        MsgKind::Deliver,
        MsgKind::Feedback,
        MsgKind::Meta,
        MsgKind::Policy,
        MsgKind::Unpolicy,
        MsgKind::Fire,
        MsgKind::PubRule,
        MsgKind::Control,
        MsgKind::Bootstrap,
        MsgKind::Heartbeat,
        MsgKind::Err,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MsgKind::Adv => "adv",
            MsgKind::Unadv => "unadv",
            MsgKind::Sub => "sub",
            MsgKind::Unsub => "unsub",
            MsgKind::Pub => "pub",
            MsgKind::Deliver => "deliver",
            MsgKind::Feedback => "feedback",
            MsgKind::Meta => "meta",
            MsgKind::Policy => "policy",
            MsgKind::Unpolicy => "unpolicy",
            MsgKind::Fire => "fire",
            MsgKind::PubRule => "pubrule",
            MsgKind::Control => "control",
            MsgKind::Bootstrap => "boot",
            MsgKind::Heartbeat => "hb",
            MsgKind::Err => "err",
        }
    }
}

/// Stats sample a broker packages into its heartbeat: counts of messages
/// processed since the previous heartbeat, plus per-client entry counts
/// (used by the controller's migration cost model).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StatsSample {
    pub processed: BTreeMap<MsgKind, u64>,
    pub client_entries: BTreeMap<ClientId, u64>,
}

impl StatsSample {
    pub fn total(&self) -> u64 {
        self.processed.values().sum()
    }
}

/// Controller-to-broker (and controller-to-client) instructions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    AddNeighbor(BrokerId, Option<String>),
    RemoveNeighbor(BrokerId),
    InstallNextHops(BTreeMap<BrokerId, BrokerId>),
    SetMode(Mode),
    SetControlRendezvous(BrokerId),
    /// Shed the listed clients to a new edge broker.
    MigrateClients {
        clients: Vec<ClientId>,
        to: BrokerId,
    },
    /// Drop every entry sourced by these clients (their edge broker died).
    PurgeSources(Vec<ClientId>),
    /// Re-send locally ingressed entries, metadata, and policies to a newly
    /// designated rendezvous root.
    ResendControl {
        to: BrokerId,
    },
    /// Delivered to a client via its edge broker: reattach at `to`.
    Rehome {
        to: BrokerId,
    },
}

impl Command {
    pub fn label(&self) -> &'static str {
        match self {
            Command::AddNeighbor(..) => "add-neighbor",
            Command::RemoveNeighbor(_) => "remove-neighbor",
            Command::InstallNextHops(_) => "next-hops",
            Command::SetMode(_) => "set-mode",
            Command::SetControlRendezvous(_) => "set-rendezvous",
            Command::MigrateClients { .. } => "migrate",
            Command::PurgeSources(_) => "purge-sources",
            Command::ResendControl { .. } => "resend-control",
            Command::Rehome { .. } => "rehome",
        }
    }
}

/// What a node asks the controller for at join time. A re-bootstrapping
/// client presents its existing identity so no new id is burned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BootstrapRequest {
    Broker {
        addr: Option<String>,
    },
    Client {
        role: ClientRole,
        existing: Option<ClientId>,
        feedback: bool,
    },
}

/// Configuration properties installed on the joining node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootstrapReply {
    pub id: NodeId,
    /// For brokers: neighbors to connect to, with daemon addresses.
    pub neighbors: Vec<(BrokerId, Option<String>)>,
    /// For clients: the edge broker to attach to.
    pub edge: Option<(BrokerId, Option<String>)>,
    pub mode: Mode,
    pub strategy: StrategyConfig,
    pub next_hops: BTreeMap<BrokerId, BrokerId>,
    pub heartbeat_period: u64,
    pub failure_multiplier: u64,
}

/// Every payload that can cross a link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Advertise {
        entry: Entry,
        edge: Option<BrokerId>,
    },
    Unadvertise {
        target: MessageId,
    },
    Subscribe {
        entry: Entry,
        edge: Option<BrokerId>,
    },
    Unsubscribe {
        target: MessageId,
    },
    Publish {
        publication: Publication,
    },
    Deliver {
        subscriber: ClientId,
        matched: MessageId,
        publication_id: MessageId,
        publication: Publication,
    },
    Feedback {
        publication: Publication,
    },
    Metadata {
        meta: Metadata,
        edge: Option<BrokerId>,
    },
    InstallPolicy {
        policy: PolicyText,
        edge: Option<BrokerId>,
    },
    RemovePolicy {
        target: MessageId,
    },
    Fire(FireOrder),
    InstallPubRule(PubRule),
    RetractPubRule {
        policy: MessageId,
        producer: ClientId,
    },
    Attach {
        client: ClientId,
        feedback: bool,
    },
    /// First line on a dialed broker-to-broker connection; identifies the
    /// peer to the accepting side.
    Hello {
        addr: Option<String>,
    },
    Detach {
        client: ClientId,
    },
    Depart {
        client: ClientId,
    },
    BootstrapRequest(BootstrapRequest),
    BootstrapReply(BootstrapReply),
    Heartbeat(StatsSample),
    Command(Command),
    Error {
        text: String,
    },
}

impl Payload {
    pub fn kind(&self) -> MsgKind {
        match self {
            Payload::Advertise { .. } => MsgKind::Adv,
            Payload::Unadvertise { .. } => MsgKind::Unadv,
            Payload::Subscribe { .. } => MsgKind::Sub,
            Payload::Unsubscribe { .. } => MsgKind::Unsub,
            Payload::Publish { .. } => MsgKind::Pub,
            Payload::Deliver { .. } => MsgKind::Deliver,
            Payload::Feedback { .. } => MsgKind::Feedback,
            Payload::Metadata { .. } => MsgKind::Meta,
            Payload::InstallPolicy { .. } => MsgKind::Policy,
            Payload::RemovePolicy { .. } => MsgKind::Unpolicy,
            Payload::Fire(_) => MsgKind::Fire,
            Payload::InstallPubRule(_) | Payload::RetractPubRule { .. } => MsgKind::PubRule,
            Payload::Attach { .. }
            | Payload::Detach { .. }
            | Payload::Depart { .. }
            | Payload::Hello { .. } => MsgKind::Control,
            Payload::BootstrapRequest(_) | Payload::BootstrapReply(_) => MsgKind::Bootstrap,
            Payload::Heartbeat(_) => MsgKind::Heartbeat,
            Payload::Command(_) => MsgKind::Control,
            Payload::Error { .. } => MsgKind::Err,
        }
    }
}

/// Envelope: every message carries a unique id and its sender; `to` is set
/// on directed messages, which brokers forward hop-by-hop along
/// controller-installed next-hop tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub id: MessageId,
    pub from: NodeId,
    pub to: Option<NodeId>,
    pub payload: Payload,
}

impl Message {
    pub fn new(id: MessageId, from: impl Into<NodeId>, payload: Payload) -> Message {
        Message {
            id,
            from: from.into(),
            to: None,
            payload,
        }
    }

    pub fn directed(
        id: MessageId,
        from: impl Into<NodeId>,
        to: impl Into<NodeId>,
        payload: Payload,
    ) -> Message {
        Message {
            id,
            from: from.into(),
            to: Some(to.into()),
            payload,
        }
    }

    pub fn kind(&self) -> MsgKind {
        self.payload.kind()
    }
}

/// Timing and sizing knobs of the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Heartbeat period, in the transport's time unit.
    pub heartbeat_period: u64,
    /// A broker silent for more than `failure_multiplier * heartbeat_period`
    /// is declared failed (strict inequality).
    pub failure_multiplier: u64,
    /// Maximum broker degree in the overlay tree.
    pub max_degree: usize,
    /// Windowed message rate above which a broker counts as congested,
    /// in messages per time unit.
    pub congestion_threshold: f64,
    /// Number of heartbeat samples kept per broker.
    pub stats_window: usize,
    pub strategy: Strategy,
    pub forwarding: Forwarding,
}

impl Default for ControllerConfig {
    fn default() -> ControllerConfig {
        ControllerConfig {
            heartbeat_period: 1,
            failure_multiplier: 3,
            max_degree: 3,
            congestion_threshold: 50.0,
            stats_window: 8,
            strategy: Strategy::PolicyFlood,
            forwarding: Forwarding::AdvertisementBased,
        }
    }
}
