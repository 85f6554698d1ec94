//! The per-broker routing state machine.
//!
//! Handlers are synchronous and deterministic: every inbound message yields
//! a list of outputs (sends, controller reports, diagnostics) and never
//! touches a transport directly. The overlay is a tree; per-link FIFO is
//! assumed from the transport.
//!
//! Routing state carries, per entry, the hop it arrived on (`last_hop`,
//! the reverse path) and the neighbor set it was forwarded to (`sent_to`,
//! which retractions retrace). Three rules keep the tables consistent
//! across overlay repair:
//!
//! * a retraction is honored only when it arrives from the entry's current
//!   `last_hop` (or is locally originated), and cascades along `sent_to`;
//! * a re-received entry from a different hop re-tags `last_hop` and
//!   re-floods, which repairs reverse paths after a reattachment;
//! * a newly stored or re-tagged advertisement re-forwards intersecting
//!   subscriptions toward its arrival hop, rebuilding subscription paths.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::matching::{Entry, EntryKind, EntryStore};
use crate::message::{Command, Message, Mode, Payload, StatsSample};
use crate::model::{match_filter, BrokerId, ClientId, MessageId, NodeId, Publication};
use crate::policy::{
    apply_firing, EngineEffect, FireOrder, PolicyEngine, PolicyText, PubRule, Trigger,
};
use crate::routing::{check_policy_supported, designated_matcher, ControlSnapshot, StrategyConfig};

/// Where a message came from or goes to: a neighbor broker or a locally
/// attached client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Hop {
    Neighbor(BrokerId),
    Client(ClientId),
}

impl Hop {
    pub fn neighbor(&self) -> Option<BrokerId> {
        match self {
            Hop::Neighbor(b) => Some(*b),
            Hop::Client(_) => None,
        }
    }
}

/// Output of a handler; the transport layer owns actual delivery.
#[derive(Debug, Clone, PartialEq)]
pub enum BrokerOut {
    Send {
        next: Hop,
        msg: Message,
    },
    ToController(Message),
    /// Re-enqueued to this broker's own inbox (a directed message whose
    /// destination is the sender itself).
    Loopback(Message),
    Diag(String),
}

/// Per-entry routing tags alongside the indexed store.
#[derive(Debug, Clone, PartialEq, Eq)]
struct HopState {
    last_hop: Hop,
    sent_to: BTreeSet<BrokerId>,
    /// Edge broker of the entry's source client, stamped at ingress.
    edge: Option<BrokerId>,
}

/// An advertisement or subscription routing table.
#[derive(Debug, Clone, Default)]
pub struct RoutingTable {
    store: EntryStore,
    hops: BTreeMap<MessageId, HopState>,
}

impl RoutingTable {
    pub fn store(&self) -> &EntryStore {
        &self.store
    }

    pub fn last_hop(&self, id: MessageId) -> Option<Hop> {
        self.hops.get(&id).map(|h| h.last_hop)
    }

    fn remove(&mut self, id: MessageId) -> Option<(Entry, HopState)> {
        let entry = self.store.remove(id)?;
        let state = self.hops.remove(&id).expect("hop state tracks store");
        Some((entry, state))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ClientConfig {
    feedback: bool,
}

/// One broker: routing tables, attached clients, policy engine, and the
/// next-hop table for directed messages. Single-writer; owns its state.
#[derive(Debug, Clone)]
pub struct Broker {
    id: BrokerId,
    mode: Mode,
    strategy: StrategyConfig,
    neighbors: BTreeSet<BrokerId>,
    clients: BTreeMap<ClientId, ClientConfig>,
    art: RoutingTable,
    srt: RoutingTable,
    next_hops: BTreeMap<BrokerId, BrokerId>,
    engine: PolicyEngine,
    /// Ingress edge broker of each stored policy (matcher designation).
    policy_edges: BTreeMap<MessageId, BrokerId>,
    /// Concrete publication transforms installed for local producers.
    pub_rules: BTreeMap<(MessageId, ClientId), PubRule>,
    seq: u64,
    /// Messages processed since the last heartbeat, by kind.
    since_heartbeat: BTreeMap<crate::message::MsgKind, u64>,
    /// Cumulative processed counters, by kind.
    processed: BTreeMap<crate::message::MsgKind, u64>,
    /// Action executions per (policy, target, metadata version).
    firing_counts: BTreeMap<(MessageId, ClientId, u64), u64>,
}

impl Broker {
    pub fn new(id: BrokerId, mode: Mode, strategy: StrategyConfig) -> Broker {
        Broker {
            id,
            mode,
            strategy,
            neighbors: BTreeSet::new(),
            clients: BTreeMap::new(),
            art: RoutingTable::default(),
            srt: RoutingTable::default(),
            next_hops: BTreeMap::new(),
            engine: PolicyEngine::new(),
            policy_edges: BTreeMap::new(),
            pub_rules: BTreeMap::new(),
            seq: 0,
            since_heartbeat: BTreeMap::new(),
            processed: BTreeMap::new(),
            firing_counts: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> BrokerId {
        self.id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn neighbors(&self) -> &BTreeSet<BrokerId> {
        &self.neighbors
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.clients.keys().copied()
    }

    pub fn art(&self) -> &RoutingTable {
        &self.art
    }

    pub fn srt(&self) -> &RoutingTable {
        &self.srt
    }

    pub fn processed(&self) -> &BTreeMap<crate::message::MsgKind, u64> {
        &self.processed
    }

    pub fn firing_counts(&self) -> &BTreeMap<(MessageId, ClientId, u64), u64> {
        &self.firing_counts
    }

    /// Control-plane holdings for quorum verification.
    pub fn control_snapshot(&self) -> ControlSnapshot {
        let mut snap = ControlSnapshot::new(self.id);
        snap.policies.extend(self.engine.policies().map(|p| p.id));
        snap.policies
            .extend(self.engine.pub_policies().map(|p| p.id));
        snap.metadata.extend(self.engine.metadata_clients_all());
        snap
    }

    fn next_id(&mut self) -> MessageId {
        self.seq += 1;
        MessageId::new(NodeId::Broker(self.id), self.seq)
    }

    fn count(&mut self, kind: crate::message::MsgKind) {
        *self.since_heartbeat.entry(kind).or_insert(0) += 1;
        *self.processed.entry(kind).or_insert(0) += 1;
    }

    /// Packages the stats-and-heartbeat message for the controller.
    pub fn heartbeat(&mut self) -> Message {
        let mut client_entries = BTreeMap::new();
        for c in self.clients.keys() {
            let n = self.local_entries_of(*c).len() as u64;
            client_entries.insert(*c, n);
        }
        let sample = StatsSample {
            processed: core::mem::take(&mut self.since_heartbeat),
            client_entries,
        };
        let id = self.next_id();
        Message::new(id, self.id, Payload::Heartbeat(sample))
    }

    // -----------------------------------------------------------------
    // Entry views
    // -----------------------------------------------------------------

    /// Everything this broker stores about a client, regardless of origin
    /// hop (the matcher's view for state conditions).
    fn entries_of(&self, c: ClientId) -> Vec<Entry> {
        let mut v: Vec<Entry> = self
            .art
            .store
            .entries_by_source(c)
            .into_iter()
            .cloned()
            .collect();
        v.extend(self.srt.store.entries_by_source(c).into_iter().cloned());
        v
    }

    /// The client's entries ingressed at this broker (its edge-local set).
    fn local_entries_of(&self, c: ClientId) -> Vec<Entry> {
        let local = |table: &RoutingTable, e: &&Entry| {
            table
                .hops
                .get(&e.id)
                .is_some_and(|h| h.last_hop == Hop::Client(c))
        };
        let mut v: Vec<Entry> = self
            .art
            .store
            .entries_by_source(c)
            .into_iter()
            .filter(|e| local(&self.art, e))
            .cloned()
            .collect();
        v.extend(
            self.srt
                .store
                .entries_by_source(c)
                .into_iter()
                .filter(|e| local(&self.srt, e))
                .cloned(),
        );
        v
    }

    // -----------------------------------------------------------------
    // Inbound dispatch
    // -----------------------------------------------------------------

    /// Handles one message from a neighbor broker or a local client.
    pub fn handle(&mut self, from: Hop, msg: Message) -> Vec<BrokerOut> {
        self.count(msg.kind());
        let mut out = Vec::new();
        match msg.to {
            Some(NodeId::Broker(b)) if b != self.id => {
                self.forward_directed(b, msg, &mut out);
                return out;
            }
            Some(NodeId::Client(c)) => {
                if self.clients.contains_key(&c) {
                    out.push(BrokerOut::Send {
                        next: Hop::Client(c),
                        msg,
                    });
                } else {
                    out.push(BrokerOut::Diag(format!(
                        "{}: dropping message for detached client {}",
                        self.id, c
                    )));
                }
                return out;
            }
            Some(NodeId::Controller) => {
                out.push(BrokerOut::ToController(msg));
                return out;
            }
            _ => {}
        }
        self.dispatch(from, msg, &mut out);
        out
    }

    /// Handles a message arriving on the controller link. Only commands
    /// and error reports travel this way; malformed traffic is rejected
    /// with an error report back to the controller.
    pub fn handle_control(&mut self, msg: Message) -> Vec<BrokerOut> {
        self.count(msg.kind());
        let mut out = Vec::new();
        match msg.payload {
            Payload::Command(cmd) => self.apply_command(cmd, &mut out),
            Payload::Error { text } => out.push(BrokerOut::Diag(format!(
                "{}: controller error: {}",
                self.id, text
            ))),
            other => {
                let text = format!(
                    "{}: unexpected {:?} on controller link",
                    self.id,
                    other.kind()
                );
                out.push(BrokerOut::Diag(text.clone()));
                let id = self.next_id();
                out.push(BrokerOut::ToController(Message::new(
                    id,
                    self.id,
                    Payload::Error { text },
                )));
            }
        }
        out
    }

    fn forward_directed(&mut self, target: BrokerId, msg: Message, out: &mut Vec<BrokerOut>) {
        match self.next_hops.get(&target) {
            Some(nh) => out.push(BrokerOut::Send {
                next: Hop::Neighbor(*nh),
                msg,
            }),
            None => {
                let text = format!("{}: no route toward {}", self.id, target);
                out.push(BrokerOut::Diag(text.clone()));
                let id = self.next_id();
                out.push(BrokerOut::ToController(Message::new(
                    id,
                    self.id,
                    Payload::Error { text },
                )));
            }
        }
    }

    fn send_directed(&mut self, target: BrokerId, payload: Payload, out: &mut Vec<BrokerOut>) {
        let id = self.next_id();
        self.send_directed_as(id, target, payload, out);
    }

    /// Directed send under a caller-chosen envelope id. Advertisement and
    /// subscription messages always travel under their entry's id.
    fn send_directed_as(
        &mut self,
        id: MessageId,
        target: BrokerId,
        payload: Payload,
        out: &mut Vec<BrokerOut>,
    ) {
        let msg = Message::directed(id, self.id, target, payload);
        if target == self.id {
            out.push(BrokerOut::Loopback(msg));
        } else {
            self.forward_directed(target, msg, out);
        }
    }

    fn dispatch(&mut self, from: Hop, msg: Message, out: &mut Vec<BrokerOut>) {
        let directed = msg.to.is_some();
        match msg.payload {
            Payload::Advertise { entry, edge } => {
                self.handle_entry(from, msg.id, entry, edge, directed, out)
            }
            Payload::Subscribe { entry, edge } => {
                self.handle_entry(from, msg.id, entry, edge, directed, out)
            }
            Payload::Unadvertise { target } | Payload::Unsubscribe { target } => {
                self.handle_retract(from, target, directed, out)
            }
            Payload::Publish { publication } => self.handle_publish(from, msg.id, publication, out),
            Payload::Deliver {
                subscriber,
                matched,
                publication_id,
                publication,
            } => {
                // Root-wrapped delivery addressed to this edge broker.
                if self.clients.contains_key(&subscriber) {
                    let id = self.next_id();
                    out.push(BrokerOut::Send {
                        next: Hop::Client(subscriber),
                        msg: Message::directed(
                            id,
                            self.id,
                            subscriber,
                            Payload::Deliver {
                                subscriber,
                                matched,
                                publication_id,
                                publication,
                            },
                        ),
                    });
                } else {
                    out.push(BrokerOut::Diag(format!(
                        "{}: delivery for {} dropped, client not attached",
                        self.id, subscriber
                    )));
                }
            }
            Payload::Metadata { meta, edge } => self.handle_metadata(from, msg.id, meta, edge, out),
            Payload::InstallPolicy { policy, edge } => {
                self.handle_install_policy(from, msg.id, policy, edge, out)
            }
            Payload::RemovePolicy { target } => {
                self.handle_remove_policy(from, msg.id, target, out)
            }
            Payload::Fire(order) => self.handle_fire(order, out),
            Payload::InstallPubRule(rule) => {
                let key = (rule.policy, rule.producer);
                match self.pub_rules.get(&key) {
                    Some(cur) if cur.md_version > rule.md_version => {}
                    _ => {
                        self.pub_rules.insert(key, rule);
                    }
                }
            }
            Payload::RetractPubRule { policy, producer } => {
                self.pub_rules.remove(&(policy, producer));
            }
            Payload::Attach { client, feedback } => {
                self.clients.insert(client, ClientConfig { feedback });
            }
            Payload::Detach { client } => self.detach_client(client, out),
            Payload::Command(cmd) => self.apply_command(cmd, out),
            Payload::Error { text } => out.push(BrokerOut::Diag(format!(
                "{}: peer error: {}",
                self.id, text
            ))),
            // The daemon layer consumes hellos when mapping connections.
            Payload::Hello { .. } => {}
            Payload::Feedback { .. }
            | Payload::Depart { .. }
            | Payload::BootstrapRequest(_)
            | Payload::BootstrapReply(_)
            | Payload::Heartbeat(_) => out.push(BrokerOut::Diag(format!(
                "{}: unexpected {:?} message",
                self.id,
                msg.payload.kind()
            ))),
        }
    }

    // -----------------------------------------------------------------
    // Advertisements and subscriptions
    // -----------------------------------------------------------------

    fn handle_entry(
        &mut self,
        from: Hop,
        _msg_id: MessageId,
        entry: Entry,
        edge: Option<BrokerId>,
        directed: bool,
        out: &mut Vec<BrokerOut>,
    ) {
        let ingress = matches!(from, Hop::Client(_));
        let edge = if ingress { Some(self.id) } else { edge };
        let is_ad = entry.kind == EntryKind::Advertisement;
        let table = if is_ad { &mut self.art } else { &mut self.srt };

        if let Some(state) = table.hops.get_mut(&entry.id) {
            if state.last_hop == from {
                return; // duplicate
            }
            // Re-received from a new direction: the overlay changed under
            // this entry. Re-tag the reverse path and re-propagate.
            state.last_hop = from;
            if let Some(e) = edge {
                state.edge = Some(e);
            }
            if self.mode == Mode::AdvertisementBased && !directed {
                let entry = table.store.get(entry.id).expect("present").clone();
                if is_ad {
                    self.flood_ad(from, &entry, edge, out);
                    if let Hop::Neighbor(n) = from {
                        self.trigger_subs_toward(n, &entry, out);
                    }
                } else {
                    self.forward_sub(from, &entry, out);
                }
            }
            return;
        }

        let state = HopState {
            last_hop: from,
            sent_to: BTreeSet::new(),
            edge,
        };
        table.hops.insert(entry.id, state);
        table.store.insert(entry.clone()).expect("id checked above");

        match self.mode {
            Mode::AdvertisementBased => {
                if !directed {
                    if is_ad {
                        self.flood_ad(from, &entry, edge, out);
                        if let Hop::Neighbor(n) = from {
                            self.trigger_subs_toward(n, &entry, out);
                        }
                    } else {
                        self.forward_sub(from, &entry, out);
                    }
                }
            }
            Mode::Rendezvous { relay } => {
                if ingress {
                    let id = entry.id;
                    let payload = if is_ad {
                        Payload::Advertise { entry, edge }
                    } else {
                        Payload::Subscribe { entry, edge }
                    };
                    self.send_directed_as(id, relay, payload, out);
                }
            }
            Mode::RendezvousRoot => {}
        }
    }

    /// Tree flood: every neighbor except the arrival hop, recorded in
    /// `sent_to` so retractions can retrace.
    fn flood_ad(
        &mut self,
        from: Hop,
        entry: &Entry,
        edge: Option<BrokerId>,
        out: &mut Vec<BrokerOut>,
    ) {
        let targets: Vec<BrokerId> = self
            .neighbors
            .iter()
            .copied()
            .filter(|n| from != Hop::Neighbor(*n))
            .collect();
        let state = self.art.hops.get_mut(&entry.id).expect("present");
        let fresh: Vec<BrokerId> = targets
            .into_iter()
            .filter(|n| state.sent_to.insert(*n))
            .collect();
        for n in fresh {
            out.push(BrokerOut::Send {
                next: Hop::Neighbor(n),
                msg: Message::new(
                    entry.id,
                    self.id,
                    Payload::Advertise {
                        entry: entry.clone(),
                        edge,
                    },
                ),
            });
        }
    }

    /// Reverse-path forwarding: a subscription travels only toward hops
    /// from which an intersecting advertisement arrived.
    fn forward_sub(&mut self, from: Hop, entry: &Entry, out: &mut Vec<BrokerOut>) {
        let mut targets: BTreeSet<BrokerId> = BTreeSet::new();
        for ad in self.art.store.intersecting_entries(&entry.filter) {
            if let Some(Hop::Neighbor(n)) = self.art.hops.get(&ad.id).map(|h| h.last_hop) {
                if from != Hop::Neighbor(n) {
                    targets.insert(n);
                }
            }
        }
        let state = self.srt.hops.get_mut(&entry.id).expect("present");
        let edge = state.edge;
        let fresh: Vec<BrokerId> = targets
            .into_iter()
            .filter(|n| state.sent_to.insert(*n))
            .collect();
        for n in fresh {
            out.push(BrokerOut::Send {
                next: Hop::Neighbor(n),
                msg: Message::new(
                    entry.id,
                    self.id,
                    Payload::Subscribe {
                        entry: entry.clone(),
                        edge,
                    },
                ),
            });
        }
    }

    /// A new advertisement opens a reverse path toward `n`; forward every
    /// intersecting subscription that has not traveled there yet.
    fn trigger_subs_toward(&mut self, n: BrokerId, ad: &Entry, out: &mut Vec<BrokerOut>) {
        let candidates: Vec<MessageId> = self
            .srt
            .store
            .intersecting_entries(&ad.filter)
            .into_iter()
            .map(|e| e.id)
            .collect();
        for id in candidates {
            let state = self.srt.hops.get_mut(&id).expect("present");
            if state.last_hop == Hop::Neighbor(n) || !state.sent_to.insert(n) {
                continue;
            }
            let edge = state.edge;
            let entry = self.srt.store.get(id).expect("present").clone();
            out.push(BrokerOut::Send {
                next: Hop::Neighbor(n),
                msg: Message::new(entry.id, self.id, Payload::Subscribe { entry, edge }),
            });
        }
    }

    fn handle_retract(
        &mut self,
        from: Hop,
        target: MessageId,
        directed: bool,
        out: &mut Vec<BrokerOut>,
    ) {
        let table = if self.art.hops.contains_key(&target) {
            &self.art
        } else {
            &self.srt
        };
        let Some(state) = table.hops.get(&target) else {
            return; // "If x is not found, ignore this command."
        };
        // A retraction from somewhere other than the entry's reverse path is
        // stale (the entry was re-tagged since); ignore it.
        if !directed && state.last_hop != from {
            return;
        }
        self.retract_entry(target, out);
    }

    /// Removes an entry and cascades the retraction along the hops the
    /// entry was sent to; in rendezvous mode, a locally ingressed entry is
    /// also retracted at the root.
    fn retract_entry(&mut self, id: MessageId, out: &mut Vec<BrokerOut>) {
        let is_ad = self.art.hops.contains_key(&id);
        let table = if is_ad { &mut self.art } else { &mut self.srt };
        let Some((entry, state)) = table.remove(id) else {
            return;
        };
        let payload = |t: MessageId| {
            if is_ad {
                Payload::Unadvertise { target: t }
            } else {
                Payload::Unsubscribe { target: t }
            }
        };
        for n in &state.sent_to {
            let mid = self.next_id();
            out.push(BrokerOut::Send {
                next: Hop::Neighbor(*n),
                msg: Message::new(mid, self.id, payload(entry.id)),
            });
        }
        if let Mode::Rendezvous { relay } = self.mode {
            if matches!(state.last_hop, Hop::Client(_)) {
                self.send_directed(relay, payload(entry.id), out);
            }
        }
    }

    // -----------------------------------------------------------------
    // Publications
    // -----------------------------------------------------------------

    fn handle_publish(
        &mut self,
        from: Hop,
        msg_id: MessageId,
        publication: Publication,
        out: &mut Vec<BrokerOut>,
    ) {
        let mut publication = publication;
        if let Hop::Client(producer) = from {
            // Ingress pipeline: publication-level policies first, then the
            // advertisement check against the producer's own region.
            publication = self.apply_pub_rules(producer, publication);
            let advertised = self
                .art
                .store
                .entries_by_source(producer)
                .iter()
                .any(|ad| match_filter(&ad.filter, &publication));
            if !advertised {
                let feedback = self
                    .clients
                    .get(&producer)
                    .map(|c| c.feedback)
                    .unwrap_or(false);
                if feedback {
                    let id = self.next_id();
                    out.push(BrokerOut::Send {
                        next: Hop::Client(producer),
                        msg: Message::directed(
                            id,
                            self.id,
                            producer,
                            Payload::Feedback { publication },
                        ),
                    });
                }
                return;
            }
        }

        match self.mode {
            Mode::AdvertisementBased => self.route_publication(from, msg_id, publication, out),
            Mode::Rendezvous { relay } => {
                let msg =
                    Message::directed(msg_id, self.id, relay, Payload::Publish { publication });
                self.forward_directed(relay, msg, out);
            }
            Mode::RendezvousRoot => self.root_match(msg_id, publication, out),
        }
    }

    fn apply_pub_rules(&self, producer: ClientId, p: Publication) -> Publication {
        let mut out = p;
        // Ascending policy id: last writer wins on conflicting assignments.
        for ((_, prod), rule) in &self.pub_rules {
            if *prod != producer || !match_filter(&rule.content, &out) {
                continue;
            }
            for (attr, v) in &rule.sets {
                out.set(attr.clone(), v.clone());
            }
        }
        out
    }

    /// Hop-by-hop forwarding: deliver to matching local clients, forward
    /// once to each distinct matching neighbor hop except the arrival hop.
    fn route_publication(
        &mut self,
        from: Hop,
        msg_id: MessageId,
        publication: Publication,
        out: &mut Vec<BrokerOut>,
    ) {
        let matching = self.srt.store.match_publication(&publication);
        let mut locals: BTreeMap<ClientId, MessageId> = BTreeMap::new();
        let mut neighbors: BTreeSet<BrokerId> = BTreeSet::new();
        for e in &matching {
            match self.srt.hops.get(&e.id).map(|h| h.last_hop) {
                Some(Hop::Client(c)) => {
                    locals.entry(c).or_insert(e.id);
                }
                Some(Hop::Neighbor(n)) if from != Hop::Neighbor(n) => {
                    neighbors.insert(n);
                }
                _ => {}
            }
        }
        for (subscriber, matched) in locals {
            let id = self.next_id();
            out.push(BrokerOut::Send {
                next: Hop::Client(subscriber),
                msg: Message::directed(
                    id,
                    self.id,
                    subscriber,
                    Payload::Deliver {
                        subscriber,
                        matched,
                        publication_id: msg_id,
                        publication: publication.clone(),
                    },
                ),
            });
        }
        for n in neighbors {
            out.push(BrokerOut::Send {
                next: Hop::Neighbor(n),
                msg: Message::new(
                    msg_id,
                    self.id,
                    Payload::Publish {
                        publication: publication.clone(),
                    },
                ),
            });
        }
    }

    /// Rendezvous root: match against the complete subscription table and
    /// emit one directed delivery per matching subscriber, routed to the
    /// subscriber's edge broker.
    fn root_match(
        &mut self,
        msg_id: MessageId,
        publication: Publication,
        out: &mut Vec<BrokerOut>,
    ) {
        let matching = self.srt.store.match_publication(&publication);
        let mut per_subscriber: BTreeMap<ClientId, (MessageId, Option<BrokerId>)> = BTreeMap::new();
        for e in &matching {
            let hop = self.srt.hops.get(&e.id).expect("present");
            let edge = match hop.last_hop {
                Hop::Client(_) => Some(self.id),
                Hop::Neighbor(_) => hop.edge,
            };
            per_subscriber.entry(e.source).or_insert((e.id, edge));
        }
        for (subscriber, (matched, edge)) in per_subscriber {
            let Some(edge) = edge else {
                out.push(BrokerOut::Diag(format!(
                    "{}: subscription {} has no edge stamp; delivery skipped",
                    self.id, matched
                )));
                continue;
            };
            let payload = Payload::Deliver {
                subscriber,
                matched,
                publication_id: msg_id,
                publication: publication.clone(),
            };
            if edge == self.id {
                if self.clients.contains_key(&subscriber) {
                    let id = self.next_id();
                    out.push(BrokerOut::Send {
                        next: Hop::Client(subscriber),
                        msg: Message::directed(id, self.id, subscriber, payload),
                    });
                } else {
                    out.push(BrokerOut::Diag(format!(
                        "{}: delivery for {} dropped, client not attached",
                        self.id, subscriber
                    )));
                }
            } else {
                self.send_directed(edge, payload, out);
            }
        }
    }

    // -----------------------------------------------------------------
    // Control plane: metadata and policies
    // -----------------------------------------------------------------

    fn handle_metadata(
        &mut self,
        from: Hop,
        msg_id: MessageId,
        meta: crate::policy::Metadata,
        edge: Option<BrokerId>,
        out: &mut Vec<BrokerOut>,
    ) {
        let ingress = matches!(from, Hop::Client(_));
        let edge = if ingress {
            self.id
        } else {
            edge.unwrap_or(self.id)
        };
        let outcome = self.engine.update_metadata(&meta, edge);
        use crate::policy::MetaOutcome;
        match outcome {
            MetaOutcome::Stale => return,
            MetaOutcome::Updated | MetaOutcome::Rehomed => {
                use crate::routing::Strategy;
                match self.strategy.strategy {
                    Strategy::MetadataFlood => {
                        let targets: Vec<BrokerId> = self
                            .neighbors
                            .iter()
                            .copied()
                            .filter(|n| from != Hop::Neighbor(*n))
                            .collect();
                        for n in targets {
                            out.push(BrokerOut::Send {
                                next: Hop::Neighbor(n),
                                msg: Message::new(
                                    msg_id,
                                    self.id,
                                    Payload::Metadata {
                                        meta: meta.clone(),
                                        edge: Some(edge),
                                    },
                                ),
                            });
                        }
                    }
                    Strategy::PolicyFlood => {}
                    Strategy::Rendezvous => {
                        if ingress {
                            if let Some(root) = self.strategy.rendezvous {
                                if root != self.id {
                                    self.send_directed(
                                        root,
                                        Payload::Metadata {
                                            meta: meta.clone(),
                                            edge: Some(edge),
                                        },
                                        out,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        match outcome {
            MetaOutcome::Updated => {
                for (pol, target) in self
                    .engine
                    .candidates(Trigger::MetadataUpdated(meta.client))
                {
                    self.consider_pair(pol, target, out);
                }
            }
            MetaOutcome::Rehomed => {
                let effects = self.engine.rehome_effects(meta.client);
                self.emit_effects(effects, out);
            }
            MetaOutcome::Stale => unreachable!(),
        }
    }

    fn handle_install_policy(
        &mut self,
        from: Hop,
        msg_id: MessageId,
        policy: PolicyText,
        edge: Option<BrokerId>,
        out: &mut Vec<BrokerOut>,
    ) {
        let ingress = matches!(from, Hop::Client(_));
        let edge = if ingress {
            self.id
        } else {
            edge.unwrap_or(self.id)
        };
        let (id, install) = match &policy {
            PolicyText::Policy(p) => {
                if ingress {
                    if let Err(reason) =
                        check_policy_supported(p, self.strategy.strategy, self.mode.forwarding())
                    {
                        if let Hop::Client(owner) = from {
                            let mid = self.next_id();
                            out.push(BrokerOut::Send {
                                next: Hop::Client(owner),
                                msg: Message::directed(
                                    mid,
                                    self.id,
                                    owner,
                                    Payload::Error {
                                        text: reason.clone(),
                                    },
                                ),
                            });
                        }
                        out.push(BrokerOut::Diag(format!(
                            "{}: policy rejected: {}",
                            self.id, reason
                        )));
                        return;
                    }
                }
                (p.id, self.engine.install_policy(p.clone()))
            }
            PolicyText::PubPolicy(p) => (p.id, self.engine.install_pub_policy(p.clone())),
        };
        if let Err(e) = install {
            if ingress {
                if let Hop::Client(owner) = from {
                    let mid = self.next_id();
                    out.push(BrokerOut::Send {
                        next: Hop::Client(owner),
                        msg: Message::directed(
                            mid,
                            self.id,
                            owner,
                            Payload::Error {
                                text: e.to_string(),
                            },
                        ),
                    });
                }
            }
            return; // flood duplicate or invalid: no forwarding
        }
        self.policy_edges.insert(id, edge);

        use crate::routing::Strategy;
        match self.strategy.strategy {
            Strategy::PolicyFlood => {
                let targets: Vec<BrokerId> = self
                    .neighbors
                    .iter()
                    .copied()
                    .filter(|n| from != Hop::Neighbor(*n))
                    .collect();
                for n in targets {
                    out.push(BrokerOut::Send {
                        next: Hop::Neighbor(n),
                        msg: Message::new(
                            msg_id,
                            self.id,
                            Payload::InstallPolicy {
                                policy: policy.clone(),
                                edge: Some(edge),
                            },
                        ),
                    });
                }
            }
            Strategy::MetadataFlood => {}
            Strategy::Rendezvous => {
                if ingress {
                    if let Some(root) = self.strategy.rendezvous {
                        if root != self.id {
                            self.send_directed(
                                root,
                                Payload::InstallPolicy {
                                    policy: policy.clone(),
                                    edge: Some(edge),
                                },
                                out,
                            );
                        }
                    }
                }
            }
        }

        let trigger = match &policy {
            PolicyText::Policy(_) => Trigger::PolicyInstalled(id),
            PolicyText::PubPolicy(_) => Trigger::PubPolicyInstalled(id),
        };
        for (pol, target) in self.engine.candidates(trigger) {
            self.consider_pair(pol, target, out);
        }
    }

    fn handle_remove_policy(
        &mut self,
        from: Hop,
        msg_id: MessageId,
        target: MessageId,
        out: &mut Vec<BrokerOut>,
    ) {
        let ingress = matches!(from, Hop::Client(_));
        if !self.engine.has_policy(target) {
            return; // unknown or already removed here
        }
        let effects = self.engine.remove_policy(target);
        self.emit_effects(effects, out);
        self.policy_edges.remove(&target);

        use crate::routing::Strategy;
        match self.strategy.strategy {
            Strategy::PolicyFlood => {
                let targets: Vec<BrokerId> = self
                    .neighbors
                    .iter()
                    .copied()
                    .filter(|n| from != Hop::Neighbor(*n))
                    .collect();
                for n in targets {
                    out.push(BrokerOut::Send {
                        next: Hop::Neighbor(n),
                        msg: Message::new(msg_id, self.id, Payload::RemovePolicy { target }),
                    });
                }
            }
            Strategy::MetadataFlood => {}
            Strategy::Rendezvous => {
                if ingress {
                    if let Some(root) = self.strategy.rendezvous {
                        if root != self.id {
                            self.send_directed(root, Payload::RemovePolicy { target }, out);
                        }
                    }
                }
            }
        }
    }

    /// Runs matcher logic for one (policy, target) pair if this broker is
    /// the designated matcher.
    fn consider_pair(&mut self, pol: MessageId, target: ClientId, out: &mut Vec<BrokerOut>) {
        let Some(owner_edge) = self.policy_edges.get(&pol).copied() else {
            return;
        };
        let Some(md) = self.engine.metadata_of(target) else {
            return;
        };
        let matcher = designated_matcher(&self.strategy, owner_edge, md.edge);
        if matcher != self.id {
            return;
        }
        let entries = self.entries_of(target);
        let effects = self.engine.consider(pol, target, &entries);
        self.emit_effects(effects, out);
    }

    fn emit_effects(&mut self, effects: Vec<EngineEffect>, out: &mut Vec<BrokerOut>) {
        for fx in effects {
            match fx {
                EngineEffect::Fire { order, edge } => {
                    self.send_directed(edge, Payload::Fire(order), out)
                }
                EngineEffect::InstallPubRule { rule, edge } => {
                    self.send_directed(edge, Payload::InstallPubRule(rule), out)
                }
                EngineEffect::RetractPubRule {
                    policy,
                    producer,
                    edge,
                } => self.send_directed(edge, Payload::RetractPubRule { policy, producer }, out),
                EngineEffect::Diagnostic(text) => {
                    out.push(BrokerOut::Diag(format!("{}: {}", self.id, text)))
                }
            }
        }
    }

    /// Executes a firing order at the target's edge broker: retract the
    /// prior generation, then run the instructions, injecting the results
    /// into the data plane as if the client had issued them.
    fn handle_fire(&mut self, order: FireOrder, out: &mut Vec<BrokerOut>) {
        if !self.clients.contains_key(&order.target) {
            out.push(BrokerOut::Diag(format!(
                "{}: firing for detached client {} dropped",
                self.id, order.target
            )));
            return;
        }
        let view = self.local_entries_of(order.target);
        let mut seq = self.seq;
        let me = self.id;
        let result = apply_firing(&order, &view, || {
            seq += 1;
            MessageId::new(NodeId::Broker(me), seq)
        });
        self.seq = seq;
        for d in result.diagnostics {
            out.push(BrokerOut::Diag(format!("{}: {}", self.id, d)));
        }
        if !order.reinjection && !order.instructions.is_empty() {
            *self
                .firing_counts
                .entry((order.policy, order.target, order.md_version))
                .or_insert(0) += 1;
        }
        for op in result.ops {
            match op {
                crate::policy::FiringOp::Retract(id) => self.retract_entry(id, out),
                crate::policy::FiringOp::Insert(entry) => {
                    let mid = entry.id;
                    self.handle_entry(Hop::Client(order.target), mid, entry, None, false, out);
                }
            }
        }
    }

    // -----------------------------------------------------------------
    // Controller commands and client lifecycle
    // -----------------------------------------------------------------

    fn detach_client(&mut self, client: ClientId, out: &mut Vec<BrokerOut>) {
        let ids: Vec<MessageId> = self
            .local_entries_of(client)
            .into_iter()
            .map(|e| e.id)
            .collect();
        for id in ids {
            self.retract_entry(id, out);
        }
        self.clients.remove(&client);
        self.engine.remove_client(client);
        self.pub_rules
            .retain(|(_, producer), _| *producer != client);
    }

    fn apply_command(&mut self, cmd: Command, out: &mut Vec<BrokerOut>) {
        match cmd {
            Command::AddNeighbor(b, _) => {
                self.neighbors.insert(b);
                self.transfer_state_to(b, out);
            }
            Command::RemoveNeighbor(b) => {
                self.neighbors.remove(&b);
                self.next_hops.retain(|_, via| *via != b);
                if self.mode == Mode::AdvertisementBased {
                    // Reverse paths through the dead hop are broken; purge
                    // and let the reattachment exchange re-flood them.
                    self.purge_via(b, out);
                } else {
                    // Rendezvous entries route by edge stamp, not by the
                    // arrival hop; only dead clients' entries go (the
                    // controller purges those by source).
                    for table in [&mut self.art, &mut self.srt] {
                        for state in table.hops.values_mut() {
                            state.sent_to.remove(&b);
                        }
                    }
                }
            }
            Command::InstallNextHops(map) => self.next_hops = map,
            Command::SetMode(mode) => self.mode = mode,
            Command::SetControlRendezvous(b) => self.strategy.rendezvous = Some(b),
            Command::MigrateClients { clients, to } => {
                for c in clients {
                    if !self.clients.contains_key(&c) {
                        continue;
                    }
                    let id = self.next_id();
                    out.push(BrokerOut::Send {
                        next: Hop::Client(c),
                        msg: Message::directed(
                            id,
                            self.id,
                            c,
                            Payload::Command(Command::Rehome { to }),
                        ),
                    });
                    self.detach_client(c, out);
                }
            }
            Command::PurgeSources(clients) => {
                for c in clients {
                    let mut ids: Vec<MessageId> = self
                        .art
                        .store
                        .entries_by_source(c)
                        .iter()
                        .map(|e| e.id)
                        .collect();
                    ids.extend(self.srt.store.entries_by_source(c).iter().map(|e| e.id));
                    for id in ids {
                        self.retract_entry(id, out);
                    }
                    self.engine.remove_client(c);
                    self.pub_rules.retain(|(_, producer), _| *producer != c);
                }
            }
            Command::ResendControl { to } => self.resend_control(to, out),
            Command::Rehome { .. } => out.push(BrokerOut::Diag(format!(
                "{}: rehome is a client command",
                self.id
            ))),
        }
    }

    /// State transfer across a new tree edge: advertisements always (they
    /// seed reverse paths; subscriptions follow via the advertisement
    /// trigger), plus whatever the control-routing strategy floods.
    fn transfer_state_to(&mut self, b: BrokerId, out: &mut Vec<BrokerOut>) {
        if self.mode == Mode::AdvertisementBased {
            let ids: Vec<MessageId> = self.art.store.iter().map(|e| e.id).collect();
            for id in ids {
                let state = self.art.hops.get_mut(&id).expect("present");
                if state.last_hop == Hop::Neighbor(b) || !state.sent_to.insert(b) {
                    continue;
                }
                let edge = state.edge;
                let entry = self.art.store.get(id).expect("present").clone();
                out.push(BrokerOut::Send {
                    next: Hop::Neighbor(b),
                    msg: Message::new(entry.id, self.id, Payload::Advertise { entry, edge }),
                });
            }
        }
        use crate::routing::Strategy;
        match self.strategy.strategy {
            Strategy::PolicyFlood => {
                let policies: Vec<(PolicyText, BrokerId)> = self
                    .engine
                    .policies()
                    .map(|p| PolicyText::Policy(p.clone()))
                    .chain(
                        self.engine
                            .pub_policies()
                            .map(|p| PolicyText::PubPolicy(p.clone())),
                    )
                    .map(|pt| {
                        let id = match &pt {
                            PolicyText::Policy(p) => p.id,
                            PolicyText::PubPolicy(p) => p.id,
                        };
                        (pt, self.policy_edges.get(&id).copied().unwrap_or(self.id))
                    })
                    .collect();
                for (policy, edge) in policies {
                    let mid = self.next_id();
                    out.push(BrokerOut::Send {
                        next: Hop::Neighbor(b),
                        msg: Message::new(
                            mid,
                            self.id,
                            Payload::InstallPolicy {
                                policy,
                                edge: Some(edge),
                            },
                        ),
                    });
                }
            }
            Strategy::MetadataFlood => {
                let records: Vec<(crate::policy::Metadata, BrokerId)> = self
                    .engine
                    .metadata_iter()
                    .map(|(client, stored)| {
                        (
                            crate::policy::Metadata {
                                client,
                                version: stored.version,
                                attrs: stored.attrs.clone(),
                            },
                            stored.edge,
                        )
                    })
                    .collect();
                for (meta, edge) in records {
                    let mid = self.next_id();
                    out.push(BrokerOut::Send {
                        next: Hop::Neighbor(b),
                        msg: Message::new(
                            mid,
                            self.id,
                            Payload::Metadata {
                                meta,
                                edge: Some(edge),
                            },
                        ),
                    });
                }
            }
            Strategy::Rendezvous => {}
        }
    }

    /// Drops every entry learned via a removed neighbor and cascades the
    /// retractions, so downstream brokers purge the now-dead paths too.
    fn purge_via(&mut self, b: BrokerId, out: &mut Vec<BrokerOut>) {
        let mut purged: Vec<MessageId> = Vec::new();
        for table in [&mut self.art, &mut self.srt] {
            for (id, state) in table.hops.iter_mut() {
                if state.last_hop == Hop::Neighbor(b) {
                    purged.push(*id);
                }
                state.sent_to.remove(&b);
            }
        }
        for id in purged {
            self.retract_entry(id, out);
        }
    }

    /// Re-sends locally ingressed entries, metadata, and policies to a
    /// newly designated rendezvous root.
    fn resend_control(&mut self, to: BrokerId, out: &mut Vec<BrokerOut>) {
        if to == self.id {
            return;
        }
        let clients: Vec<ClientId> = self.clients.keys().copied().collect();
        for c in clients {
            for entry in self.local_entries_of(c) {
                let id = entry.id;
                let payload = match entry.kind {
                    EntryKind::Advertisement => Payload::Advertise {
                        entry,
                        edge: Some(self.id),
                    },
                    EntryKind::Subscription => Payload::Subscribe {
                        entry,
                        edge: Some(self.id),
                    },
                };
                self.send_directed_as(id, to, payload, out);
            }
        }
        let records: Vec<crate::policy::Metadata> = self
            .engine
            .metadata_iter()
            .filter(|(_, stored)| stored.edge == self.id)
            .map(|(client, stored)| crate::policy::Metadata {
                client,
                version: stored.version,
                attrs: stored.attrs.clone(),
            })
            .collect();
        for meta in records {
            self.send_directed(
                to,
                Payload::Metadata {
                    meta,
                    edge: Some(self.id),
                },
                out,
            );
        }
        let policies: Vec<PolicyText> = self
            .engine
            .policies()
            .filter(|p| self.policy_edges.get(&p.id) == Some(&self.id))
            .map(|p| PolicyText::Policy(p.clone()))
            .chain(
                self.engine
                    .pub_policies()
                    .filter(|p| self.policy_edges.get(&p.id) == Some(&self.id))
                    .map(|p| PolicyText::PubPolicy(p.clone())),
            )
            .collect();
        for policy in policies {
            self.send_directed(
                to,
                Payload::InstallPolicy {
                    policy,
                    edge: Some(self.id),
                },
                out,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::Origin;
    use crate::model::{parse_filter, parse_publication, ClientRole};
    use crate::routing::Strategy;

    fn producer(n: u64) -> ClientId {
        ClientId {
            role: ClientRole::Producer,
            num: n,
        }
    }

    fn consumer(n: u64) -> ClientId {
        ClientId {
            role: ClientRole::Consumer,
            num: n,
        }
    }

    fn cfg() -> StrategyConfig {
        StrategyConfig::new(Strategy::PolicyFlood, None)
    }

    fn broker(n: u64) -> Broker {
        Broker::new(BrokerId(n), Mode::AdvertisementBased, cfg())
    }

    fn attach(b: &mut Broker, c: ClientId, feedback: bool) {
        let msg = Message::new(
            MessageId::new(c, 1000),
            c,
            Payload::Attach {
                client: c,
                feedback,
            },
        );
        b.handle(Hop::Client(c), msg);
    }

    fn advertise(b: &mut Broker, c: ClientId, seq: u64, f: &str) -> (MessageId, Vec<BrokerOut>) {
        let id = MessageId::new(c, seq);
        let entry = Entry::new(id, c, EntryKind::Advertisement, parse_filter(f).unwrap());
        let out = b.handle(
            Hop::Client(c),
            Message::new(id, c, Payload::Advertise { entry, edge: None }),
        );
        (id, out)
    }

    fn subscribe(b: &mut Broker, c: ClientId, seq: u64, f: &str) -> (MessageId, Vec<BrokerOut>) {
        let id = MessageId::new(c, seq);
        let entry = Entry::new(id, c, EntryKind::Subscription, parse_filter(f).unwrap());
        let out = b.handle(
            Hop::Client(c),
            Message::new(id, c, Payload::Subscribe { entry, edge: None }),
        );
        (id, out)
    }

    fn publish(b: &mut Broker, c: ClientId, seq: u64, p: &str) -> Vec<BrokerOut> {
        let id = MessageId::new(c, seq);
        b.handle(
            Hop::Client(c),
            Message::new(
                id,
                c,
                Payload::Publish {
                    publication: parse_publication(p).unwrap(),
                },
            ),
        )
    }

    fn sends(out: &[BrokerOut]) -> Vec<(&Hop, &Message)> {
        out.iter()
            .filter_map(|o| match o {
                BrokerOut::Send { next, msg } => Some((next, msg)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn advertisement_floods_to_all_neighbors_except_from() {
        let mut b = broker(2);
        b.apply_command(Command::AddNeighbor(BrokerId(1), None), &mut Vec::new());
        b.apply_command(Command::AddNeighbor(BrokerId(3), None), &mut Vec::new());
        let entry = Entry::new(
            MessageId::new(producer(4), 1),
            producer(4),
            EntryKind::Advertisement,
            parse_filter("[price,<,100]").unwrap(),
        );
        let out = b.handle(
            Hop::Neighbor(BrokerId(1)),
            Message::new(
                entry.id,
                BrokerId(1),
                Payload::Advertise {
                    entry: entry.clone(),
                    edge: Some(BrokerId(1)),
                },
            ),
        );
        let s = sends(&out);
        assert_eq!(s.len(), 1);
        assert_eq!(*s[0].0, Hop::Neighbor(BrokerId(3)));
        assert_eq!(b.art().last_hop(entry.id), Some(Hop::Neighbor(BrokerId(1))));

        // Duplicate from the same hop: no table change, no forwarding.
        let out = b.handle(
            Hop::Neighbor(BrokerId(1)),
            Message::new(
                entry.id,
                BrokerId(1),
                Payload::Advertise {
                    entry,
                    edge: Some(BrokerId(1)),
                },
            ),
        );
        assert!(sends(&out).is_empty());
    }

    #[test]
    fn subscription_follows_reverse_path_only() {
        // b2 with neighbors b1 and b3; the ad arrived from b1.
        let mut b = broker(2);
        b.apply_command(Command::AddNeighbor(BrokerId(1), None), &mut Vec::new());
        b.apply_command(Command::AddNeighbor(BrokerId(3), None), &mut Vec::new());
        let ad = Entry::new(
            MessageId::new(producer(4), 1),
            producer(4),
            EntryKind::Advertisement,
            parse_filter("[price,<,100]").unwrap(),
        );
        b.handle(
            Hop::Neighbor(BrokerId(1)),
            Message::new(
                ad.id,
                BrokerId(1),
                Payload::Advertise {
                    entry: ad,
                    edge: Some(BrokerId(1)),
                },
            ),
        );
        // Subscription arrives from b3 and intersects: forwarded to b1 only.
        let sub = Entry::new(
            MessageId::new(consumer(5), 1),
            consumer(5),
            EntryKind::Subscription,
            parse_filter("[price,<,50]").unwrap(),
        );
        let out = b.handle(
            Hop::Neighbor(BrokerId(3)),
            Message::new(
                sub.id,
                BrokerId(3),
                Payload::Subscribe {
                    entry: sub,
                    edge: Some(BrokerId(3)),
                },
            ),
        );
        let s = sends(&out);
        assert_eq!(s.len(), 1);
        assert_eq!(*s[0].0, Hop::Neighbor(BrokerId(1)));

        // A non-intersecting subscription is stored but goes nowhere.
        let sub2 = Entry::new(
            MessageId::new(consumer(6), 1),
            consumer(6),
            EntryKind::Subscription,
            parse_filter("[price,>,500]").unwrap(),
        );
        let out = b.handle(
            Hop::Neighbor(BrokerId(3)),
            Message::new(
                sub2.id,
                BrokerId(3),
                Payload::Subscribe {
                    entry: sub2,
                    edge: Some(BrokerId(3)),
                },
            ),
        );
        assert!(sends(&out).is_empty());
    }

    #[test]
    fn new_advertisement_pulls_existing_subscriptions() {
        let mut b = broker(2);
        b.apply_command(Command::AddNeighbor(BrokerId(1), None), &mut Vec::new());
        attach(&mut b, consumer(5), false);
        let (sub_id, out) = subscribe(&mut b, consumer(5), 1, "[price,<,50]");
        assert!(sends(&out).is_empty(), "no ads yet");
        // Ad arrives later from b1; the stored subscription must follow the
        // new reverse path toward it.
        let ad = Entry::new(
            MessageId::new(producer(4), 1),
            producer(4),
            EntryKind::Advertisement,
            parse_filter("[price,present]").unwrap(),
        );
        let out = b.handle(
            Hop::Neighbor(BrokerId(1)),
            Message::new(
                ad.id,
                BrokerId(1),
                Payload::Advertise {
                    entry: ad,
                    edge: Some(BrokerId(1)),
                },
            ),
        );
        let s = sends(&out);
        assert_eq!(s.len(), 1);
        match &s[0].1.payload {
            Payload::Subscribe { entry, .. } => assert_eq!(entry.id, sub_id),
            other => panic!("expected subscribe, got {:?}", other),
        }
    }

    #[test]
    fn publish_delivers_locally_and_forwards_once() {
        let mut b = broker(1);
        b.apply_command(Command::AddNeighbor(BrokerId(2), None), &mut Vec::new());
        attach(&mut b, producer(4), false);
        attach(&mut b, consumer(5), false);
        advertise(&mut b, producer(4), 1, "[price,<,100]");
        subscribe(&mut b, consumer(5), 1, "[price,<,50]");
        // Remote subscription via b2.
        let sub = Entry::new(
            MessageId::new(consumer(6), 1),
            consumer(6),
            EntryKind::Subscription,
            parse_filter("[price,<,40]").unwrap(),
        );
        b.handle(
            Hop::Neighbor(BrokerId(2)),
            Message::new(
                sub.id,
                BrokerId(2),
                Payload::Subscribe {
                    entry: sub,
                    edge: Some(BrokerId(2)),
                },
            ),
        );

        let out = publish(&mut b, producer(4), 10, "[price,35]");
        let s = sends(&out);
        assert_eq!(s.len(), 2, "one local delivery, one forward");
        assert!(s
            .iter()
            .any(|(h, m)| matches!(h, Hop::Client(c) if *c == consumer(5))
                && matches!(&m.payload, Payload::Deliver { .. })));
        assert!(s
            .iter()
            .any(|(h, m)| matches!(h, Hop::Neighbor(n) if *n == BrokerId(2))
                && matches!(&m.payload, Payload::Publish { .. })));
    }

    #[test]
    fn unadvertised_publication_drop_and_feedback() {
        let mut b = broker(1);
        attach(&mut b, producer(4), false);
        advertise(&mut b, producer(4), 1, "[price,<,100]");
        let out = publish(&mut b, producer(4), 2, "[price,200]");
        assert!(sends(&out).is_empty(), "drop mode emits nothing");

        let mut b = broker(1);
        attach(&mut b, producer(4), true);
        advertise(&mut b, producer(4), 1, "[price,<,100]");
        let out = publish(&mut b, producer(4), 2, "[price,200]");
        let s = sends(&out);
        assert_eq!(s.len(), 1);
        assert!(matches!(&s[0].1.payload, Payload::Feedback { .. }));
        assert_eq!(*s[0].0, Hop::Client(producer(4)));
    }

    #[test]
    fn unsubscribe_restores_tables_and_cascades() {
        let mut b = broker(2);
        b.apply_command(Command::AddNeighbor(BrokerId(1), None), &mut Vec::new());
        let ad = Entry::new(
            MessageId::new(producer(4), 1),
            producer(4),
            EntryKind::Advertisement,
            parse_filter("[price,present]").unwrap(),
        );
        b.handle(
            Hop::Neighbor(BrokerId(1)),
            Message::new(
                ad.id,
                BrokerId(1),
                Payload::Advertise {
                    entry: ad,
                    edge: Some(BrokerId(1)),
                },
            ),
        );
        attach(&mut b, consumer(5), false);
        let (sub_id, out) = subscribe(&mut b, consumer(5), 1, "[price,<,50]");
        assert_eq!(sends(&out).len(), 1, "forwarded toward the ad");

        // Unknown id: no-op.
        let out = b.handle(
            Hop::Client(consumer(5)),
            Message::new(
                MessageId::new(consumer(5), 99),
                consumer(5),
                Payload::Unsubscribe {
                    target: MessageId::new(consumer(5), 42),
                },
            ),
        );
        assert!(sends(&out).is_empty());

        let out = b.handle(
            Hop::Client(consumer(5)),
            Message::new(
                MessageId::new(consumer(5), 2),
                consumer(5),
                Payload::Unsubscribe { target: sub_id },
            ),
        );
        let s = sends(&out);
        assert_eq!(s.len(), 1, "cascades along the path the sub was sent to");
        assert!(matches!(&s[0].1.payload, Payload::Unsubscribe { target } if *target == sub_id));
        assert!(b.srt().store().is_empty());
    }

    #[test]
    fn retraction_from_wrong_hop_is_ignored() {
        let mut b = broker(2);
        b.apply_command(Command::AddNeighbor(BrokerId(1), None), &mut Vec::new());
        b.apply_command(Command::AddNeighbor(BrokerId(3), None), &mut Vec::new());
        let ad = Entry::new(
            MessageId::new(producer(4), 1),
            producer(4),
            EntryKind::Advertisement,
            parse_filter("[x,present]").unwrap(),
        );
        b.handle(
            Hop::Neighbor(BrokerId(1)),
            Message::new(
                ad.id,
                BrokerId(1),
                Payload::Advertise {
                    entry: ad.clone(),
                    edge: Some(BrokerId(1)),
                },
            ),
        );
        let out = b.handle(
            Hop::Neighbor(BrokerId(3)),
            Message::new(
                MessageId::new(BrokerId(3), 1),
                BrokerId(3),
                Payload::Unadvertise { target: ad.id },
            ),
        );
        assert!(sends(&out).is_empty());
        assert!(b.art().store().contains(ad.id), "stale retraction ignored");
    }

    #[test]
    fn retag_repairs_reverse_path() {
        let mut b = broker(2);
        b.apply_command(Command::AddNeighbor(BrokerId(1), None), &mut Vec::new());
        b.apply_command(Command::AddNeighbor(BrokerId(3), None), &mut Vec::new());
        let ad = Entry::new(
            MessageId::new(producer(4), 1),
            producer(4),
            EntryKind::Advertisement,
            parse_filter("[x,present]").unwrap(),
        );
        b.handle(
            Hop::Neighbor(BrokerId(1)),
            Message::new(
                ad.id,
                BrokerId(1),
                Payload::Advertise {
                    entry: ad.clone(),
                    edge: Some(BrokerId(1)),
                },
            ),
        );
        // Same ad re-arrives from b3 after a repair: re-tagged, re-flooded.
        let out = b.handle(
            Hop::Neighbor(BrokerId(3)),
            Message::new(
                ad.id,
                BrokerId(3),
                Payload::Advertise {
                    entry: ad.clone(),
                    edge: Some(BrokerId(3)),
                },
            ),
        );
        assert_eq!(b.art().last_hop(ad.id), Some(Hop::Neighbor(BrokerId(3))));
        assert!(!sends(&out).is_empty(), "re-flooded toward b1");
        // The old path's retraction no longer applies.
        b.handle(
            Hop::Neighbor(BrokerId(1)),
            Message::new(
                MessageId::new(BrokerId(1), 9),
                BrokerId(1),
                Payload::Unadvertise { target: ad.id },
            ),
        );
        assert!(b.art().store().contains(ad.id));
    }

    #[test]
    fn rendezvous_relay_and_root_matching() {
        let root = BrokerId(1);
        let mut relay = Broker::new(
            BrokerId(2),
            Mode::Rendezvous { relay: root },
            StrategyConfig::new(Strategy::PolicyFlood, Some(root)),
        );
        relay.apply_command(Command::AddNeighbor(root, None), &mut Vec::new());
        relay.apply_command(
            Command::InstallNextHops([(root, root)].into_iter().collect()),
            &mut Vec::new(),
        );
        attach(&mut relay, producer(4), false);
        let (_, out) = advertise(&mut relay, producer(4), 1, "[price,<,100]");
        let s = sends(&out);
        assert_eq!(s.len(), 1, "ad relayed toward the root");
        assert_eq!(s[0].1.to, Some(NodeId::Broker(root)));

        let mut rootb = Broker::new(
            root,
            Mode::RendezvousRoot,
            StrategyConfig::new(Strategy::PolicyFlood, Some(root)),
        );
        rootb.apply_command(Command::AddNeighbor(BrokerId(2), None), &mut Vec::new());
        rootb.apply_command(
            Command::InstallNextHops([(BrokerId(2), BrokerId(2))].into_iter().collect()),
            &mut Vec::new(),
        );
        // Root receives the relayed subscription of a consumer at b2.
        let sub = Entry::new(
            MessageId::new(consumer(5), 1),
            consumer(5),
            EntryKind::Subscription,
            parse_filter("[price,<,50]").unwrap(),
        );
        rootb.handle(
            Hop::Neighbor(BrokerId(2)),
            Message::directed(
                sub.id,
                BrokerId(2),
                root,
                Payload::Subscribe {
                    entry: sub,
                    edge: Some(BrokerId(2)),
                },
            ),
        );
        // A publication relayed to the root matches and is routed back to
        // the subscriber's edge.
        let out = rootb.handle(
            Hop::Neighbor(BrokerId(2)),
            Message::directed(
                MessageId::new(producer(4), 7),
                BrokerId(2),
                root,
                Payload::Publish {
                    publication: parse_publication("[price,35]").unwrap(),
                },
            ),
        );
        let s = sends(&out);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].1.to, Some(NodeId::Broker(BrokerId(2))));
        assert!(
            matches!(&s[0].1.payload, Payload::Deliver { subscriber, .. } if *subscriber == consumer(5))
        );

        // Root with no matching subscriptions emits nothing.
        let out = rootb.handle(
            Hop::Neighbor(BrokerId(2)),
            Message::directed(
                MessageId::new(producer(4), 8),
                BrokerId(2),
                root,
                Payload::Publish {
                    publication: parse_publication("[price,90]").unwrap(),
                },
            ),
        );
        assert!(sends(&out).is_empty());
    }

    #[test]
    fn directed_routing_follows_next_hops() {
        let mut b = broker(2);
        b.apply_command(Command::AddNeighbor(BrokerId(1), None), &mut Vec::new());
        b.apply_command(Command::AddNeighbor(BrokerId(3), None), &mut Vec::new());
        b.apply_command(
            Command::InstallNextHops(
                [
                    (BrokerId(1), BrokerId(1)),
                    (BrokerId(3), BrokerId(3)),
                    (BrokerId(9), BrokerId(3)),
                ]
                .into_iter()
                .collect(),
            ),
            &mut Vec::new(),
        );
        let msg = Message::directed(
            MessageId::new(BrokerId(1), 5),
            BrokerId(1),
            BrokerId(9),
            Payload::RemovePolicy {
                target: MessageId::new(producer(1), 1),
            },
        );
        let out = b.handle(Hop::Neighbor(BrokerId(1)), msg);
        let s = sends(&out);
        assert_eq!(s.len(), 1);
        assert_eq!(
            *s[0].0,
            Hop::Neighbor(BrokerId(3)),
            "routed one hop toward target"
        );

        // Unknown target: routing fault surfaced to the controller.
        let msg = Message::directed(
            MessageId::new(BrokerId(1), 6),
            BrokerId(1),
            BrokerId(77),
            Payload::RemovePolicy {
                target: MessageId::new(producer(1), 1),
            },
        );
        let out = b.handle(Hop::Neighbor(BrokerId(1)), msg);
        assert!(out.iter().any(|o| matches!(o, BrokerOut::ToController(_))));
    }

    #[test]
    fn detach_retracts_client_entries() {
        let mut b = broker(1);
        b.apply_command(Command::AddNeighbor(BrokerId(2), None), &mut Vec::new());
        // Two remote advertisements learned via b2 seed reverse paths.
        for (seq, f) in [(1, "[price,<,100]"), (2, "[volume,present]")] {
            let ad = Entry::new(
                MessageId::new(producer(4), seq),
                producer(4),
                EntryKind::Advertisement,
                parse_filter(f).unwrap(),
            );
            b.handle(
                Hop::Neighbor(BrokerId(2)),
                Message::new(
                    ad.id,
                    BrokerId(2),
                    Payload::Advertise {
                        entry: ad,
                        edge: Some(BrokerId(2)),
                    },
                ),
            );
        }
        attach(&mut b, consumer(5), false);
        subscribe(&mut b, consumer(5), 1, "[price,<,50]");
        subscribe(&mut b, consumer(5), 2, "[volume,>,10]");

        let out = b.handle(
            Hop::Client(consumer(5)),
            Message::new(
                MessageId::new(consumer(5), 9),
                consumer(5),
                Payload::Detach {
                    client: consumer(5),
                },
            ),
        );
        // Both subscriptions traveled toward b2; both retract along it.
        let unsubs = sends(&out)
            .iter()
            .filter(|(_, m)| matches!(&m.payload, Payload::Unsubscribe { .. }))
            .count();
        assert_eq!(unsubs, 2);
        assert!(b.srt().store().is_empty());
        assert!(!b.art().store().is_empty(), "other clients unaffected");
    }

    #[test]
    fn remove_neighbor_purges_learned_entries() {
        let mut b = broker(2);
        b.apply_command(Command::AddNeighbor(BrokerId(1), None), &mut Vec::new());
        b.apply_command(Command::AddNeighbor(BrokerId(3), None), &mut Vec::new());
        let ad = Entry::new(
            MessageId::new(producer(4), 1),
            producer(4),
            EntryKind::Advertisement,
            parse_filter("[x,present]").unwrap(),
        );
        b.handle(
            Hop::Neighbor(BrokerId(1)),
            Message::new(
                ad.id,
                BrokerId(1),
                Payload::Advertise {
                    entry: ad.clone(),
                    edge: Some(BrokerId(1)),
                },
            ),
        );
        let mut out = Vec::new();
        b.apply_command(Command::RemoveNeighbor(BrokerId(1)), &mut out);
        assert!(!b.art().store().contains(ad.id));
        // Purge cascades to b3, where the flood had sent the ad.
        assert!(out.iter().any(|o| matches!(
            o,
            BrokerOut::Send { next: Hop::Neighbor(n), msg } if *n == BrokerId(3)
                && matches!(&msg.payload, Payload::Unadvertise { target } if *target == ad.id)
        )));
    }

    #[test]
    fn add_neighbor_transfers_advertisements() {
        let mut b = broker(1);
        attach(&mut b, producer(4), false);
        advertise(&mut b, producer(4), 1, "[price,<,100]");
        let mut out = Vec::new();
        b.apply_command(Command::AddNeighbor(BrokerId(9), None), &mut out);
        let s = sends(&out);
        assert_eq!(s.len(), 1);
        assert!(matches!(&s[0].1.payload, Payload::Advertise { .. }));
        assert_eq!(*s[0].0, Hop::Neighbor(BrokerId(9)));
    }

    #[test]
    fn firing_injects_and_replaces_generation() {
        let mut b = broker(1);
        attach(&mut b, consumer(5), false);
        let policy = MessageId::new(
            ClientId {
                role: ClientRole::InterestManager,
                num: 9,
            },
            1,
        );
        let fire = |area: &str| FireOrder {
            policy,
            target: consumer(5),
            md_version: 1,
            instructions: vec![crate::policy::Instruction::InsertSub(
                crate::policy::parse_template_filter(&format!("[area,=,'{}']", area)).unwrap(),
            )],
            reinjection: false,
        };
        let out = b.handle(
            Hop::Neighbor(BrokerId(1)),
            Message::directed(
                MessageId::new(BrokerId(1), 1),
                BrokerId(1),
                BrokerId(1),
                Payload::Fire(fire("north")),
            ),
        );
        assert!(sends(&out).is_empty(), "no neighbors to flood to");
        let gen1: Vec<Entry> = b.srt().store().iter().cloned().collect();
        assert_eq!(gen1.len(), 1);
        assert_eq!(
            gen1[0].origin,
            Origin::PolicyGenerated {
                policy,
                target: consumer(5)
            }
        );

        let mut order = fire("south");
        order.md_version = 2;
        b.handle(
            Hop::Neighbor(BrokerId(1)),
            Message::directed(
                MessageId::new(BrokerId(1), 2),
                BrokerId(1),
                BrokerId(1),
                Payload::Fire(order),
            ),
        );
        let gen2: Vec<Entry> = b.srt().store().iter().cloned().collect();
        assert_eq!(gen2.len(), 1, "prior generation retracted");
        assert_eq!(gen2[0].filter, parse_filter("[area,=,'south']").unwrap());
        assert_eq!(b.firing_counts().len(), 2);
    }
}
