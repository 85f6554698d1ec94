//! Deterministic discrete-event harness: controller, brokers, and clients
//! in one process over an in-memory transport with unit hop latency.
//!
//! Strictly single-threaded. Every queued item is ordered by (time,
//! insertion sequence); identical inputs produce byte-identical outputs.

pub mod oracle;
pub mod scenario;

pub use oracle::{
    oracle_deliveries, oracle_fired_keys, oracle_generated, oracle_generation_counts, TraceOp,
};
pub use scenario::{inject_fault, load_scenario, Action, ScenarioError, ScenarioEvent, Tick};

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Reverse;
use core::fmt::Write as _;

use crate::broker::{Broker, BrokerOut, Hop};
use crate::controller::{Controller, ControllerOut};
use crate::matching::{Entry, EntryKind, Origin};
use crate::message::{BootstrapRequest, Command, ControllerConfig, Message, MsgKind, Payload};
use crate::model::{BrokerId, ClientId, Filter, MessageId, NodeId, Publication};
use crate::policy::{Metadata, PolicyText};
use crate::routing::{verify_quorum, ControlSnapshot};

/// Run parameters. The seed is recorded for reproducibility of scenario
/// generation; the run itself is deterministic and does not consume it.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub controller: ControllerConfig,
    pub seed: u64,
    /// Ticks an orphaned client waits before re-bootstrapping.
    pub client_timeout: Tick,
    /// Times at which to snapshot live policy-generated entry counts.
    pub checkpoints: Vec<Tick>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            controller: ControllerConfig::default(),
            seed: 0,
            client_timeout: 5,
            checkpoints: Vec::new(),
        }
    }
}

/// One delivery observed at a subscriber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub time: Tick,
    pub subscriber: ClientId,
    pub publication_id: MessageId,
    pub matched: MessageId,
    pub publication: Publication,
}

/// Aggregated counters for a run.
#[derive(Debug, Clone, Default)]
pub struct Metrics {
    pub per_broker: BTreeMap<BrokerId, BTreeMap<MsgKind, u64>>,
    pub deliveries: u64,
    pub feedbacks: u64,
    /// Broker-to-broker publication transfers (tree hops traversed).
    pub publication_hops: u64,
    pub firing_counts: BTreeMap<(MessageId, ClientId, u64), u64>,
}

/// Live generation counts per (policy, target) at one checkpoint.
pub type GenerationCounts = BTreeMap<(MessageId, ClientId), usize>;

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub log: Vec<DeliveryRecord>,
    /// (subscriber, publish event index) pairs actually delivered.
    pub delivered: BTreeSet<(ClientId, usize)>,
    pub metrics: Metrics,
    pub trace: Vec<TraceOp>,
    pub diags: Vec<(Tick, String)>,
    pub feedback_log: Vec<(Tick, ClientId, Publication)>,
    /// Issue time of each publish event index.
    pub pub_times: BTreeMap<usize, Tick>,
    pub quorum_ok: bool,
    /// Live policy-generated entries across all brokers at the end,
    /// projected to (policy, target, kind, filter).
    pub generated: BTreeSet<(MessageId, ClientId, EntryKind, Filter)>,
    /// Per-checkpoint live generation counts per (policy, target).
    pub checkpoint_generations: Vec<(Tick, GenerationCounts)>,
    /// Repair windows: deliveries of publications issued inside one carry
    /// no guarantee and are excluded from oracle comparison.
    pub exclusion_windows: Vec<(Tick, Tick)>,
    /// Controller view at the end: do the surviving brokers form one tree?
    pub tree_connected: bool,
    /// Every non-departed client ended the run attached to an edge broker.
    pub all_clients_attached: bool,
    pub final_time: Tick,
}

impl RunReport {
    /// Delivered set restricted to publications issued outside every
    /// exclusion window.
    pub fn delivered_comparable(&self) -> BTreeSet<(ClientId, usize)> {
        self.delivered
            .iter()
            .filter(|(_, idx)| !self.excluded(*idx))
            .copied()
            .collect()
    }

    /// Applies the same exclusion to an oracle-produced set.
    pub fn filter_comparable(
        &self,
        set: &BTreeSet<(ClientId, usize)>,
    ) -> BTreeSet<(ClientId, usize)> {
        set.iter()
            .filter(|(_, idx)| !self.excluded(*idx))
            .copied()
            .collect()
    }

    fn excluded(&self, index: usize) -> bool {
        let Some(t) = self.pub_times.get(&index) else {
            return true;
        };
        self.exclusion_windows.iter().any(|(a, b)| t >= a && t <= b)
    }
}

#[derive(Debug, Clone)]
struct ClientNode {
    id: ClientId,
    feedback: bool,
    edge: Option<BrokerId>,
    departed: bool,
    seq: u64,
    md: Option<(u64, Publication)>,
    issued: Vec<(MessageId, EntryKind, Filter)>,
    policies: Vec<PolicyText>,
}

impl ClientNode {
    fn next_id(&mut self) -> MessageId {
        self.seq += 1;
        MessageId::new(self.id, self.seq)
    }
}

#[derive(Debug, Clone)]
enum Item {
    Scenario(Action),
    ToBroker {
        broker: BrokerId,
        from: Hop,
        msg: Message,
    },
    ControlToBroker {
        broker: BrokerId,
        msg: Message,
    },
    ToClient {
        client: ClientId,
        msg: Message,
    },
    ToController {
        msg: Message,
    },
    BrokerHeartbeat(BrokerId),
    Sweep,
    Rebootstrap(ClientId),
}

#[derive(Debug, Clone)]
struct Queued {
    time: Tick,
    seq: u64,
    item: Item,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

struct World {
    cfg: RunConfig,
    controller: Controller,
    brokers: BTreeMap<BrokerId, Broker>,
    dead: BTreeSet<BrokerId>,
    clients: BTreeMap<ClientId, ClientNode>,
    queue: BinaryHeap<Reverse<Queued>>,
    qseq: u64,
    now: Tick,
    pending_scenario: usize,
    inflight: u64,
    pending_rebootstraps: usize,
    hb_scheduled: BTreeSet<BrokerId>,
    sweep_scheduled: bool,
    pub_counter: usize,
    pub_ids: BTreeMap<MessageId, usize>,
    pub_times: BTreeMap<usize, Tick>,
    installed_policies: BTreeSet<MessageId>,
    log: Vec<DeliveryRecord>,
    delivered: BTreeSet<(ClientId, usize)>,
    feedback_log: Vec<(Tick, ClientId, Publication)>,
    trace: Vec<TraceOp>,
    diags: Vec<(Tick, String)>,
    publication_hops: u64,
    open_windows: Vec<Tick>,
    closed_windows: Vec<(Tick, Tick)>,
    checkpoints: Vec<Tick>,
    checkpoint_generations: Vec<(Tick, GenerationCounts)>,
}

impl World {
    fn new(cfg: RunConfig) -> World {
        let controller = Controller::new(cfg.controller.clone());
        let mut checkpoints = cfg.checkpoints.clone();
        checkpoints.sort_unstable();
        World {
            cfg,
            controller,
            brokers: BTreeMap::new(),
            dead: BTreeSet::new(),
            clients: BTreeMap::new(),
            queue: BinaryHeap::new(),
            qseq: 0,
            now: 0,
            pending_scenario: 0,
            inflight: 0,
            pending_rebootstraps: 0,
            hb_scheduled: BTreeSet::new(),
            sweep_scheduled: false,
            pub_counter: 0,
            pub_ids: BTreeMap::new(),
            pub_times: BTreeMap::new(),
            installed_policies: BTreeSet::new(),
            log: Vec::new(),
            delivered: BTreeSet::new(),
            feedback_log: Vec::new(),
            trace: Vec::new(),
            diags: Vec::new(),
            publication_hops: 0,
            open_windows: Vec::new(),
            closed_windows: Vec::new(),
            checkpoints,
            checkpoint_generations: Vec::new(),
        }
    }

    fn push(&mut self, time: Tick, item: Item) {
        if matches!(
            item,
            Item::ToBroker { .. }
                | Item::ControlToBroker { .. }
                | Item::ToClient { .. }
                | Item::ToController { .. }
        ) {
            // Heartbeats are periodic background noise, not pending work.
            let is_hb = matches!(&item, Item::ToController { msg } if matches!(msg.payload, Payload::Heartbeat(_)));
            if !is_hb {
                self.inflight += 1;
            }
        }
        self.qseq += 1;
        self.queue.push(Reverse(Queued {
            time,
            seq: self.qseq,
            item,
        }));
    }

    fn diag(&mut self, text: String) {
        self.diags.push((self.now, text));
    }

    /// Liveness: keep timers running while anything can still happen.
    fn keep_alive(&self) -> bool {
        let zombies = self
            .dead
            .iter()
            .any(|b| self.controller.topology().broker(*b).is_some());
        self.pending_scenario > 0 || self.inflight > 0 || self.pending_rebootstraps > 0 || zombies
    }

    fn schedule_broker_outs(&mut self, broker: BrokerId, outs: Vec<BrokerOut>) {
        let at = self.now + 1;
        for o in outs {
            match o {
                BrokerOut::Send { next, msg } => match next {
                    Hop::Neighbor(n) => {
                        if matches!(msg.payload, Payload::Publish { .. }) {
                            self.publication_hops += 1;
                        }
                        self.push(
                            at,
                            Item::ToBroker {
                                broker: n,
                                from: Hop::Neighbor(broker),
                                msg,
                            },
                        );
                    }
                    Hop::Client(c) => self.push(at, Item::ToClient { client: c, msg }),
                },
                BrokerOut::ToController(msg) => self.push(at, Item::ToController { msg }),
                BrokerOut::Loopback(msg) => self.push(
                    at,
                    Item::ToBroker {
                        broker,
                        from: Hop::Neighbor(broker),
                        msg,
                    },
                ),
                BrokerOut::Diag(text) => self.diag(text),
            }
        }
    }

    fn schedule_controller_outs(&mut self, outs: Vec<ControllerOut>) {
        let at = self.now + 1;
        for o in outs {
            match o {
                ControllerOut::ToBroker(b, msg) => {
                    self.push(at, Item::ControlToBroker { broker: b, msg })
                }
                ControllerOut::Reply(_) => {
                    // Bootstrap is synchronous in the simulator; replies are
                    // consumed by the caller.
                }
                ControllerOut::Diag(text) => self.diag(text),
            }
        }
    }

    /// Synchronous bootstrap against the controller. Returns the reply.
    fn bootstrap(&mut self, req: BootstrapRequest) -> Option<crate::message::BootstrapReply> {
        let outs = self.controller.handle_bootstrap(req, self.now);
        let mut reply = None;
        let mut rest = Vec::new();
        for o in outs {
            match o {
                ControllerOut::Reply(msg) => match msg.payload {
                    Payload::BootstrapReply(r) => reply = Some(r),
                    Payload::Error { text } => self.diag(format!("bootstrap rejected: {}", text)),
                    _ => {}
                },
                other => rest.push(other),
            }
        }
        self.schedule_controller_outs(rest);
        reply
    }

    fn client_send(&mut self, client: ClientId, msg: Message) {
        let Some(edge) = self.clients[&client].edge else {
            self.diag(format!("{} has no edge broker; message dropped", client));
            return;
        };
        self.push(
            self.now + 1,
            Item::ToBroker {
                broker: edge,
                from: Hop::Client(client),
                msg,
            },
        );
    }

    /// Re-issues a client's state at its (new) edge broker: attach, every
    /// self-issued entry under a fresh id, current metadata, and owned
    /// policies. Used on re-bootstrap and migration.
    fn reattach(&mut self, client: ClientId) {
        let node = self.clients.get_mut(&client).unwrap();
        let feedback = node.feedback;
        let attach_id = node.next_id();
        let attach = Message::new(attach_id, client, Payload::Attach { client, feedback });
        self.client_send(client, attach);

        let node = self.clients.get_mut(&client).unwrap();
        let old = core::mem::take(&mut node.issued);
        let mut msgs = Vec::new();
        for (_, kind, filter) in old {
            let node = self.clients.get_mut(&client).unwrap();
            let id = node.next_id();
            node.issued.push((id, kind, filter.clone()));
            let entry = Entry::new(id, client, kind, filter.clone());
            let payload = match kind {
                EntryKind::Advertisement => Payload::Advertise { entry, edge: None },
                EntryKind::Subscription => Payload::Subscribe { entry, edge: None },
            };
            let trace = match kind {
                EntryKind::Advertisement => TraceOp::Advertise {
                    time: self.now,
                    id,
                    client,
                    filter,
                },
                EntryKind::Subscription => TraceOp::Subscribe {
                    time: self.now,
                    id,
                    client,
                    filter,
                },
            };
            self.trace.push(trace);
            msgs.push(Message::new(id, client, payload));
        }
        let node = self.clients.get_mut(&client).unwrap();
        if let Some((version, attrs)) = node.md.clone() {
            let id = node.next_id();
            self.trace.push(TraceOp::Metadata {
                time: self.now,
                client,
                version,
                attrs: attrs.clone(),
            });
            msgs.push(Message::new(
                id,
                client,
                Payload::Metadata {
                    meta: Metadata {
                        client,
                        version,
                        attrs,
                    },
                    edge: None,
                },
            ));
        }
        let node = self.clients.get_mut(&client).unwrap();
        for policy in node.policies.clone() {
            let node = self.clients.get_mut(&client).unwrap();
            let id = node.next_id();
            self.trace.push(TraceOp::InstallPolicy {
                time: self.now,
                policy: policy.clone(),
            });
            msgs.push(Message::new(
                id,
                client,
                Payload::InstallPolicy { policy, edge: None },
            ));
        }
        for msg in msgs {
            self.client_send(client, msg);
        }
    }

    fn client_receive(&mut self, client: ClientId, msg: Message) {
        let Some(node) = self.clients.get_mut(&client) else {
            return;
        };
        if node.departed {
            return;
        }
        match msg.payload {
            Payload::Deliver {
                subscriber,
                matched,
                publication_id,
                publication,
            } => {
                debug_assert_eq!(subscriber, client);
                match self.pub_ids.get(&publication_id) {
                    Some(index) => {
                        self.delivered.insert((client, *index));
                    }
                    None => self.diag(format!(
                        "delivery to {} references unknown publication {}",
                        client, publication_id
                    )),
                }
                self.log.push(DeliveryRecord {
                    time: self.now,
                    subscriber: client,
                    publication_id,
                    matched,
                    publication,
                });
            }
            Payload::Feedback { publication } => {
                self.feedback_log.push((self.now, client, publication));
            }
            Payload::Command(Command::Rehome { to }) => {
                self.trace.push(TraceOp::Orphaned {
                    time: self.now,
                    client,
                });
                let node = self.clients.get_mut(&client).unwrap();
                node.edge = Some(to);
                self.reattach(client);
            }
            Payload::Error { text } => {
                self.diag(format!("{}: error from broker: {}", client, text))
            }
            other => self.diag(format!("{}: unexpected {:?}", client, other.kind())),
        }
    }
}

/// Runs a scenario to completion.
pub fn run(events: &[ScenarioEvent], cfg: RunConfig) -> RunReport {
    let mut world = World::new(cfg);
    let mut ordered: Vec<ScenarioEvent> = events.to_vec();
    ordered.sort_by_key(|e| e.time);
    world.pending_scenario = ordered.len();
    for ev in ordered {
        let t = ev.time;
        world.push(t, Item::Scenario(ev.action));
    }
    world.push(1, Item::Sweep);
    world.sweep_scheduled = true;

    while let Some(Reverse(next)) = world.queue.pop() {
        // Checkpoint snapshots fire between ticks.
        while let Some(cp) = world.checkpoints.first().copied() {
            if next.time > cp {
                world.checkpoints.remove(0);
                let snap = generation_counts(&world);
                world.checkpoint_generations.push((cp, snap));
            } else {
                break;
            }
        }
        world.now = next.time;
        process(&mut world, next.item);

        // A repair window closes once nothing is in flight and every
        // orphan has re-bootstrapped.
        if !world.open_windows.is_empty() && world.inflight == 0 && world.pending_rebootstraps == 0
        {
            let zombies = world
                .dead
                .iter()
                .any(|b| world.controller.topology().broker(*b).is_some());
            if !zombies {
                let end = world.now;
                for start in core::mem::take(&mut world.open_windows) {
                    world.closed_windows.push((start, end));
                }
            }
        }
    }
    // Any checkpoint past the final event snapshots the final state.
    for cp in core::mem::take(&mut world.checkpoints) {
        let snap = generation_counts(&world);
        world.checkpoint_generations.push((cp, snap));
    }

    finish(world)
}

fn generation_counts(world: &World) -> GenerationCounts {
    let mut ids: BTreeMap<(MessageId, ClientId), BTreeSet<MessageId>> = BTreeMap::new();
    for broker in world.brokers.values() {
        for e in broker
            .art()
            .store()
            .iter()
            .chain(broker.srt().store().iter())
        {
            if let Origin::PolicyGenerated { policy, target } = e.origin {
                ids.entry((policy, target)).or_default().insert(e.id);
            }
        }
    }
    ids.into_iter().map(|(k, v)| (k, v.len())).collect()
}

fn finish(world: World) -> RunReport {
    let mut metrics = Metrics {
        publication_hops: world.publication_hops,
        deliveries: world.log.len() as u64,
        feedbacks: world.feedback_log.len() as u64,
        ..Default::default()
    };
    for (b, broker) in &world.brokers {
        metrics.per_broker.insert(*b, broker.processed().clone());
        for (key, n) in broker.firing_counts() {
            *metrics.firing_counts.entry(*key).or_insert(0) += n;
        }
    }

    let snapshots: Vec<ControlSnapshot> = world
        .brokers
        .values()
        .map(|b| b.control_snapshot())
        .collect();
    let live_policies: Vec<MessageId> = world.installed_policies.iter().copied().collect();
    let live_md: Vec<ClientId> = world
        .clients
        .values()
        .filter(|c| !c.departed && c.md.is_some())
        .map(|c| c.id)
        .collect();
    let quorum_ok = verify_quorum(&live_policies, &live_md, &snapshots);

    let mut generated = BTreeSet::new();
    for broker in world.brokers.values() {
        for e in broker
            .art()
            .store()
            .iter()
            .chain(broker.srt().store().iter())
        {
            if let Origin::PolicyGenerated { policy, target } = e.origin {
                generated.insert((policy, target, e.kind, e.filter.clone()));
            }
        }
    }

    let mut windows = world.closed_windows;
    let final_time = world.now;
    for start in world.open_windows {
        windows.push((start, final_time));
    }
    let tree_connected = world.controller.topology().is_connected_tree();
    let all_clients_attached = world
        .clients
        .values()
        .all(|c| c.departed || c.edge.is_some());

    RunReport {
        log: world.log,
        delivered: world.delivered,
        metrics,
        trace: world.trace,
        diags: world.diags,
        feedback_log: world.feedback_log,
        pub_times: world.pub_times,
        quorum_ok,
        generated,
        checkpoint_generations: world.checkpoint_generations,
        exclusion_windows: windows,
        tree_connected,
        all_clients_attached,
        final_time,
    }
}

fn process(world: &mut World, item: Item) {
    match item {
        Item::Scenario(action) => {
            world.pending_scenario -= 1;
            scenario_action(world, action);
        }
        Item::ToBroker { broker, from, msg } => {
            world.inflight -= 1;
            if world.dead.contains(&broker) {
                return;
            }
            // Deliveries’ publication identity rides on the pub id; resolve
            // client deliveries here where the pub index map lives.
            if let Some(b) = world.brokers.get_mut(&broker) {
                let outs = b.handle(from, msg);
                world.schedule_broker_outs(broker, outs);
            }
        }
        Item::ControlToBroker { broker, msg } => {
            world.inflight -= 1;
            if world.dead.contains(&broker) {
                return;
            }
            if let Some(b) = world.brokers.get_mut(&broker) {
                let outs = b.handle_control(msg);
                world.schedule_broker_outs(broker, outs);
            }
        }
        Item::ToClient { client, msg } => {
            world.inflight -= 1;
            world.client_receive(client, msg);
        }
        Item::ToController { msg } => {
            let is_hb = matches!(msg.payload, Payload::Heartbeat(_));
            if !is_hb {
                world.inflight -= 1;
            }
            match msg.payload {
                Payload::Heartbeat(sample) => {
                    if let Some(b) = msg.from.as_broker() {
                        let now = world.now;
                        let outs = world.controller.handle_heartbeat(b, sample, now);
                        world.schedule_controller_outs(outs);
                    }
                }
                Payload::Depart { client } => {
                    let outs = world.controller.handle_depart(client);
                    world.schedule_controller_outs(outs);
                }
                Payload::Error { text } => world.diag(format!("controller: {}", text)),
                other => world.diag(format!("controller: unexpected {:?}", other.kind())),
            }
        }
        Item::BrokerHeartbeat(b) => {
            world.hb_scheduled.remove(&b);
            if world.dead.contains(&b) || !world.brokers.contains_key(&b) {
                return;
            }
            let msg = world.brokers.get_mut(&b).unwrap().heartbeat();
            let at = world.now + 1;
            world.push(at, Item::ToController { msg });
            if world.keep_alive() {
                let next = world.now + world.cfg.controller.heartbeat_period;
                world.hb_scheduled.insert(b);
                world.push(next, Item::BrokerHeartbeat(b));
            }
        }
        Item::Sweep => {
            world.sweep_scheduled = false;
            let now = world.now;
            let outs = world.controller.sweep(now);
            world.schedule_controller_outs(outs);
            if world.keep_alive() {
                world.sweep_scheduled = true;
                let next = world.now + world.cfg.controller.heartbeat_period;
                world.push(next, Item::Sweep);
            }
        }
        Item::Rebootstrap(client) => {
            world.pending_rebootstraps -= 1;
            let Some(node) = world.clients.get(&client) else {
                return;
            };
            if node.departed || node.edge.is_some() {
                return;
            }
            let role = client.role;
            let feedback = node.feedback;
            let reply = world.bootstrap(BootstrapRequest::Client {
                role,
                existing: Some(client),
                feedback,
            });
            match reply {
                Some(r) => {
                    let edge = r.edge.map(|(b, _)| b);
                    world.clients.get_mut(&client).unwrap().edge = edge;
                    if edge.is_some() {
                        world.reattach(client);
                    }
                }
                None => {
                    // No broker available yet; try again after the timeout.
                    world.pending_rebootstraps += 1;
                    let at = world.now + world.cfg.client_timeout;
                    world.push(at, Item::Rebootstrap(client));
                }
            }
        }
    }
    ensure_timers(world);
}

/// Timers stop themselves at quiescence; restart them when new work
/// appears.
fn ensure_timers(world: &mut World) {
    if !world.keep_alive() {
        return;
    }
    if !world.sweep_scheduled {
        world.sweep_scheduled = true;
        let next = world.now + 1;
        world.push(next, Item::Sweep);
    }
    let live: Vec<BrokerId> = world
        .brokers
        .keys()
        .filter(|b| !world.dead.contains(b) && !world.hb_scheduled.contains(b))
        .copied()
        .collect();
    for b in live {
        world.hb_scheduled.insert(b);
        let next = world.now + 1;
        world.push(next, Item::BrokerHeartbeat(b));
    }
}

fn scenario_action(world: &mut World, action: Action) {
    match action {
        Action::JoinBroker => {
            let reply = world.bootstrap(BootstrapRequest::Broker { addr: None });
            let Some(r) = reply else {
                return;
            };
            let id = r.id.as_broker().expect("broker bootstrap");
            let mut broker = Broker::new(id, r.mode, r.strategy);
            let mut outs = Vec::new();
            for (n, _) in &r.neighbors {
                let o = broker.handle_control(Message::directed(
                    MessageId::new(NodeId::Controller, 0),
                    NodeId::Controller,
                    id,
                    Payload::Command(Command::AddNeighbor(*n, None)),
                ));
                outs.extend(o);
            }
            let o = broker.handle_control(Message::directed(
                MessageId::new(NodeId::Controller, 0),
                NodeId::Controller,
                id,
                Payload::Command(Command::InstallNextHops(r.next_hops)),
            ));
            outs.extend(o);
            world.brokers.insert(id, broker);
            world.schedule_broker_outs(id, outs);
            if world.keep_alive() {
                world.hb_scheduled.insert(id);
                let at = world.now + 1;
                world.push(at, Item::BrokerHeartbeat(id));
            }
        }
        Action::JoinClient { role, feedback } => {
            let reply = world.bootstrap(BootstrapRequest::Client {
                role,
                existing: None,
                feedback,
            });
            let Some(r) = reply else {
                return;
            };
            let id = r.id.as_client().expect("client bootstrap");
            let edge = r.edge.map(|(b, _)| b);
            world.clients.insert(
                id,
                ClientNode {
                    id,
                    feedback,
                    edge,
                    departed: false,
                    seq: 0,
                    md: None,
                    issued: Vec::new(),
                    policies: Vec::new(),
                },
            );
            let node = world.clients.get_mut(&id).unwrap();
            let attach_id = node.next_id();
            world.client_send(
                id,
                Message::new(
                    attach_id,
                    id,
                    Payload::Attach {
                        client: id,
                        feedback,
                    },
                ),
            );
        }
        ref action @ (Action::Advertise { client, ref filter }
        | Action::Subscribe { client, ref filter }) => {
            let filter = filter.clone();
            let kind = if matches!(action, Action::Advertise { .. }) {
                EntryKind::Advertisement
            } else {
                EntryKind::Subscription
            };
            let Some(node) = world.clients.get_mut(&client) else {
                world.diag(format!("unknown client {}", client));
                return;
            };
            if node.departed || node.edge.is_none() {
                world.diag(format!("{} is not attached; entry dropped", client));
                return;
            }
            let id = node.next_id();
            node.issued.push((id, kind, filter.clone()));
            let entry = Entry::new(id, client, kind, filter.clone());
            let (payload, trace) = match kind {
                EntryKind::Advertisement => (
                    Payload::Advertise { entry, edge: None },
                    TraceOp::Advertise {
                        time: world.now,
                        id,
                        client,
                        filter,
                    },
                ),
                EntryKind::Subscription => (
                    Payload::Subscribe { entry, edge: None },
                    TraceOp::Subscribe {
                        time: world.now,
                        id,
                        client,
                        filter,
                    },
                ),
            };
            world.trace.push(trace);
            world.client_send(client, Message::new(id, client, payload));
        }
        ref action @ (Action::Unadvertise { client, target }
        | Action::Unsubscribe { client, target }) => {
            let is_ad = matches!(action, Action::Unadvertise { .. });
            let Some(node) = world.clients.get_mut(&client) else {
                world.diag(format!("unknown client {}", client));
                return;
            };
            if node.departed || node.edge.is_none() {
                world.diag(format!("{} is not attached", client));
                return;
            }
            let known = node
                .issued
                .iter()
                .any(|(id, kind, _)| *id == target && (*kind == EntryKind::Advertisement) == is_ad);
            if !known {
                world.diag(format!(
                    "{}: unknown entry {}; retraction skipped",
                    client, target
                ));
                return;
            }
            node.issued.retain(|(id, _, _)| *id != target);
            let mid = node.next_id();
            let (payload, trace) = if is_ad {
                (
                    Payload::Unadvertise { target },
                    TraceOp::Unadvertise {
                        time: world.now,
                        id: target,
                    },
                )
            } else {
                (
                    Payload::Unsubscribe { target },
                    TraceOp::Unsubscribe {
                        time: world.now,
                        id: target,
                    },
                )
            };
            world.trace.push(trace);
            world.client_send(client, Message::new(mid, client, payload));
        }
        Action::Publish {
            client,
            publication,
        } => {
            let index = world.pub_counter;
            world.pub_counter += 1;
            world.pub_times.insert(index, world.now);
            let Some(node) = world.clients.get_mut(&client) else {
                world.diag(format!("unknown client {}", client));
                return;
            };
            if node.departed || node.edge.is_none() {
                world.diag(format!("{} is not attached; publish dropped", client));
                return;
            }
            let id = node.next_id();
            world.pub_ids.insert(id, index);
            world.trace.push(TraceOp::Publish {
                time: world.now,
                index,
                producer: client,
                publication: publication.clone(),
            });
            world.client_send(
                client,
                Message::new(id, client, Payload::Publish { publication }),
            );
        }
        Action::Metadata { client, attrs } => {
            let Some(node) = world.clients.get_mut(&client) else {
                world.diag(format!("unknown client {}", client));
                return;
            };
            if node.departed || node.edge.is_none() {
                world.diag(format!("{} is not attached; metadata dropped", client));
                return;
            }
            let version = node.md.as_ref().map(|(v, _)| v + 1).unwrap_or(1);
            node.md = Some((version, attrs.clone()));
            let id = node.next_id();
            world.trace.push(TraceOp::Metadata {
                time: world.now,
                client,
                version,
                attrs: attrs.clone(),
            });
            world.client_send(
                client,
                Message::new(
                    id,
                    client,
                    Payload::Metadata {
                        meta: Metadata {
                            client,
                            version,
                            attrs,
                        },
                        edge: None,
                    },
                ),
            );
        }
        Action::InstallPolicy { client, policy } => {
            let id = match &policy {
                PolicyText::Policy(p) => p.id,
                PolicyText::PubPolicy(p) => p.id,
            };
            let owner = match &policy {
                PolicyText::Policy(p) => p.owner,
                PolicyText::PubPolicy(p) => p.owner,
            };
            if owner != client {
                world.diag(format!(
                    "{} cannot install a policy owned by {}",
                    client, owner
                ));
                return;
            }
            if world.installed_policies.contains(&id) {
                world.diag(format!("duplicate policy id {}", id));
                return;
            }
            if let PolicyText::Policy(p) = &policy {
                if let Err(reason) = crate::routing::check_policy_supported(
                    p,
                    world.cfg.controller.strategy,
                    world.cfg.controller.forwarding,
                ) {
                    world.diag(format!("policy rejected: {}", reason));
                    return;
                }
            }
            let Some(node) = world.clients.get_mut(&client) else {
                world.diag(format!("unknown client {}", client));
                return;
            };
            if node.departed || node.edge.is_none() {
                world.diag(format!("{} is not attached; policy dropped", client));
                return;
            }
            node.policies.push(policy.clone());
            let mid = node.next_id();
            world.installed_policies.insert(id);
            world.trace.push(TraceOp::InstallPolicy {
                time: world.now,
                policy: policy.clone(),
            });
            world.client_send(
                client,
                Message::new(mid, client, Payload::InstallPolicy { policy, edge: None }),
            );
        }
        Action::RemovePolicy { client, target } => {
            if !world.installed_policies.remove(&target) {
                world.diag(format!("remove-policy: unknown id {}", target));
                return;
            }
            let Some(node) = world.clients.get_mut(&client) else {
                return;
            };
            node.policies.retain(|p| match p {
                PolicyText::Policy(p) => p.id != target,
                PolicyText::PubPolicy(p) => p.id != target,
            });
            let mid = node.next_id();
            world.trace.push(TraceOp::RemovePolicy {
                time: world.now,
                id: target,
            });
            world.client_send(
                client,
                Message::new(mid, client, Payload::RemovePolicy { target }),
            );
        }
        Action::FailBroker { broker } => {
            if world.dead.contains(&broker) || !world.brokers.contains_key(&broker) {
                world.diag(format!("fail-broker: unknown broker {}", broker));
                return;
            }
            world.dead.insert(broker);
            world.brokers.remove(&broker);
            world.open_windows.push(world.now);
            let orphans: Vec<ClientId> = world
                .clients
                .values()
                .filter(|c| !c.departed && c.edge == Some(broker))
                .map(|c| c.id)
                .collect();
            for c in orphans {
                world.clients.get_mut(&c).unwrap().edge = None;
                world.trace.push(TraceOp::Orphaned {
                    time: world.now,
                    client: c,
                });
                world.pending_rebootstraps += 1;
                let at = world.now + world.cfg.client_timeout;
                world.push(at, Item::Rebootstrap(c));
            }
        }
        Action::DepartClient { client } => {
            let Some(node) = world.clients.get_mut(&client) else {
                world.diag(format!("unknown client {}", client));
                return;
            };
            if node.departed {
                return;
            }
            node.departed = true;
            let mid = node.next_id();
            world.trace.push(TraceOp::Depart {
                time: world.now,
                client,
            });
            if let Some(edge) = node.edge {
                let msg = Message::new(mid, client, Payload::Detach { client });
                world.push(
                    world.now + 1,
                    Item::ToBroker {
                        broker: edge,
                        from: Hop::Client(client),
                        msg,
                    },
                );
            }
            // Best-effort departure notification to the controller.
            let outs = world.controller.handle_depart(client);
            world.schedule_controller_outs(outs);
            world.clients.get_mut(&client).unwrap().edge = None;
        }
        Action::HeartbeatTick => {
            let live: Vec<BrokerId> = world
                .brokers
                .keys()
                .filter(|b| !world.dead.contains(b))
                .copied()
                .collect();
            let at = world.now;
            for b in live {
                world.push(at, Item::BrokerHeartbeat(b));
            }
            world.push(at, Item::Sweep);
        }
    }
}

/// One line per delivery in canonical publication form.
pub fn render_delivery_log(log: &[DeliveryRecord]) -> String {
    let mut s = String::new();
    for r in log {
        let _ = writeln!(
            s,
            "t={} to={} pub={} sub={} {}",
            r.time, r.subscriber, r.publication_id, r.matched, r.publication
        );
    }
    s
}

/// Aligned text table of per-broker message counters.
pub fn render_metrics(m: &Metrics) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<8}", "broker");
    for k in MsgKind::ALL {
        let _ = write!(s, "{:>9}", k.label());
    }
    let _ = writeln!(s, "{:>9}", "total");
    for (b, counts) in &m.per_broker {
        let _ = write!(s, "{:<8}", format!("{}", b));
        let mut total = 0;
        for k in MsgKind::ALL {
            let n = counts.get(&k).copied().unwrap_or(0);
            total += n;
            let _ = write!(s, "{:>9}", n);
        }
        let _ = writeln!(s, "{:>9}", total);
    }
    let _ = writeln!(s, "deliveries={}", m.deliveries);
    let _ = writeln!(s, "feedbacks={}", m.feedbacks);
    let _ = writeln!(s, "publication_hops={}", m.publication_hops);
    s
}
