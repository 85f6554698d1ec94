//! The logically centralized controller: assigns identities, places nodes
//! in the overlay tree, watches heartbeats, repairs the topology after
//! failures, and plans client migrations away from congested brokers.
//!
//! A single-writer state machine over an ordered event stream (bootstrap
//! requests, heartbeats, timer sweeps); deterministic given event order.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::message::{
    BootstrapReply, BootstrapRequest, Command, ControllerConfig, Message, Mode, Payload,
    StatsSample,
};
use crate::model::{BrokerId, ClientId, ClientRole, MessageId, NodeId};
use crate::routing::{Forwarding, StrategyConfig};

/// Per-broker view: tree neighbors, attached clients, heartbeat clock, and
/// the bounded stats window.
#[derive(Debug, Clone)]
pub struct BrokerInfo {
    pub neighbors: BTreeSet<BrokerId>,
    pub clients: BTreeSet<ClientId>,
    pub last_heartbeat: u64,
    /// (time, messages processed since previous heartbeat), newest last.
    pub stats: VecDeque<(u64, u64)>,
    /// Latest per-client entry counts, for the migration cost model.
    pub client_entries: BTreeMap<ClientId, u64>,
    pub addr: Option<String>,
    last_migration: Option<u64>,
}

impl BrokerInfo {
    fn new(now: u64, addr: Option<String>) -> BrokerInfo {
        BrokerInfo {
            neighbors: BTreeSet::new(),
            clients: BTreeSet::new(),
            last_heartbeat: now,
            stats: VecDeque::new(),
            client_entries: BTreeMap::new(),
            addr,
            last_migration: None,
        }
    }

    /// Windowed message rate in messages per time unit.
    pub fn rate(&self, heartbeat_period: u64) -> f64 {
        if self.stats.is_empty() {
            return 0.0;
        }
        let total: u64 = self.stats.iter().map(|(_, n)| n).sum();
        total as f64 / (self.stats.len() as u64 * heartbeat_period.max(1)) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ClientInfo {
    edge: BrokerId,
    orphaned: bool,
}

/// The controller's view of the whole system.
#[derive(Debug, Clone, Default)]
pub struct TopologyStore {
    brokers: BTreeMap<BrokerId, BrokerInfo>,
    clients: BTreeMap<ClientId, ClientInfo>,
    id_counter: u64,
    rendezvous: Option<BrokerId>,
}

impl TopologyStore {
    pub fn brokers(&self) -> impl Iterator<Item = (BrokerId, &BrokerInfo)> {
        self.brokers.iter().map(|(b, i)| (*b, i))
    }

    pub fn broker(&self, b: BrokerId) -> Option<&BrokerInfo> {
        self.brokers.get(&b)
    }

    pub fn broker_ids(&self) -> BTreeSet<BrokerId> {
        self.brokers.keys().copied().collect()
    }

    pub fn client_edge(&self, c: ClientId) -> Option<BrokerId> {
        self.clients.get(&c).filter(|i| !i.orphaned).map(|i| i.edge)
    }

    pub fn rendezvous(&self) -> Option<BrokerId> {
        self.rendezvous
    }

    /// Tree edges, each listed once.
    pub fn edges(&self) -> Vec<(BrokerId, BrokerId)> {
        let mut out = Vec::new();
        for (b, info) in &self.brokers {
            for n in &info.neighbors {
                if b < n {
                    out.push((*b, *n));
                }
            }
        }
        out
    }

    /// True iff the live brokers form one connected tree (or the store is
    /// empty).
    pub fn is_connected_tree(&self) -> bool {
        let Some(start) = self.brokers.keys().next().copied() else {
            return true;
        };
        let mut seen = BTreeSet::new();
        let mut stack = alloc::vec![start];
        while let Some(b) = stack.pop() {
            if !seen.insert(b) {
                continue;
            }
            stack.extend(self.brokers[&b].neighbors.iter().copied());
        }
        seen.len() == self.brokers.len() && self.edges().len() + 1 == self.brokers.len()
    }

    /// First hop from `from` toward every other broker, along tree paths.
    pub fn next_hops_for(&self, from: BrokerId) -> BTreeMap<BrokerId, BrokerId> {
        let mut table = BTreeMap::new();
        let Some(info) = self.brokers.get(&from) else {
            return table;
        };
        // BFS outward from each direct neighbor claims its subtree.
        for first in &info.neighbors {
            let mut stack = alloc::vec![*first];
            let mut seen: BTreeSet<BrokerId> = [from].into_iter().collect();
            while let Some(b) = stack.pop() {
                if !seen.insert(b) {
                    continue;
                }
                table.insert(b, *first);
                if let Some(bi) = self.brokers.get(&b) {
                    stack.extend(bi.neighbors.iter().copied());
                }
            }
        }
        table
    }

    fn components(&self) -> Vec<BTreeSet<BrokerId>> {
        let mut remaining: BTreeSet<BrokerId> = self.brokers.keys().copied().collect();
        let mut out = Vec::new();
        while let Some(start) = remaining.iter().next().copied() {
            let mut comp = BTreeSet::new();
            let mut stack = alloc::vec![start];
            while let Some(b) = stack.pop() {
                if !comp.insert(b) {
                    continue;
                }
                remaining.remove(&b);
                stack.extend(self.brokers[&b].neighbors.iter().copied());
            }
            out.push(comp);
        }
        out
    }
}

/// Everything the controller wants sent somewhere.
#[derive(Debug, Clone, PartialEq)]
pub enum ControllerOut {
    ToBroker(BrokerId, Message),
    /// Response to the node that sent the triggering request.
    Reply(Message),
    Diag(String),
}

#[derive(Debug, Clone)]
pub struct Controller {
    topo: TopologyStore,
    cfg: ControllerConfig,
    seq: u64,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Controller {
        Controller {
            topo: TopologyStore::default(),
            cfg,
            seq: 0,
        }
    }

    pub fn topology(&self) -> &TopologyStore {
        &self.topo
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    fn next_id(&mut self) -> MessageId {
        self.seq += 1;
        MessageId::new(NodeId::Controller, self.seq)
    }

    fn command(&mut self, to: BrokerId, cmd: Command) -> ControllerOut {
        let id = self.next_id();
        ControllerOut::ToBroker(
            to,
            Message::directed(id, NodeId::Controller, to, Payload::Command(cmd)),
        )
    }

    fn strategy_config(&self) -> StrategyConfig {
        StrategyConfig::new(self.cfg.strategy, self.topo.rendezvous)
    }

    fn mode_for(&self, b: BrokerId) -> Mode {
        match self.cfg.forwarding {
            Forwarding::AdvertisementBased => Mode::AdvertisementBased,
            Forwarding::Rendezvous => match self.topo.rendezvous {
                Some(root) if root == b => Mode::RendezvousRoot,
                Some(root) => Mode::Rendezvous { relay: root },
                None => Mode::RendezvousRoot,
            },
        }
    }

    // -----------------------------------------------------------------
    // Placement
    // -----------------------------------------------------------------

    /// Attachment point for a joining broker: smallest degree below the
    /// cap, ties by lowest id. None on an empty overlay (the joiner becomes
    /// the root); an overlay with every broker at the cap rejects the join.
    fn place_broker(&self) -> Result<Option<BrokerId>, String> {
        if self.topo.brokers.is_empty() {
            return Ok(None);
        }
        self.topo
            .brokers
            .iter()
            .filter(|(_, i)| i.neighbors.len() < self.cfg.max_degree)
            .min_by_key(|(b, i)| (i.neighbors.len(), **b))
            .map(|(b, _)| Some(*b))
            .ok_or_else(|| "no broker below the degree cap".into())
    }

    /// Edge broker for a joining client: fewest clients, ties by lowest id.
    fn place_client(&self) -> Result<BrokerId, String> {
        self.topo
            .brokers
            .iter()
            .min_by_key(|(b, i)| (i.clients.len(), **b))
            .map(|(b, _)| *b)
            .ok_or_else(|| "no broker available".into())
    }

    // -----------------------------------------------------------------
    // Bootstrap
    // -----------------------------------------------------------------

    pub fn handle_bootstrap(&mut self, req: BootstrapRequest, now: u64) -> Vec<ControllerOut> {
        let mut out = Vec::new();
        match req {
            BootstrapRequest::Broker { addr } => match self.place_broker() {
                Err(e) => {
                    let id = self.next_id();
                    out.push(ControllerOut::Reply(Message::new(
                        id,
                        NodeId::Controller,
                        Payload::Error {
                            text: format!("join rejected: {}", e),
                        },
                    )));
                }
                Ok(parent) => {
                    self.topo.id_counter += 1;
                    let b = BrokerId(self.topo.id_counter);
                    self.topo.brokers.insert(b, BrokerInfo::new(now, addr));
                    let mut neighbors = Vec::new();
                    if let Some(p) = parent {
                        self.topo.brokers.get_mut(&p).unwrap().neighbors.insert(b);
                        self.topo.brokers.get_mut(&b).unwrap().neighbors.insert(p);
                        let paddr = self.topo.brokers[&p].addr.clone();
                        neighbors.push((p, paddr));
                    }
                    if self.topo.rendezvous.is_none() {
                        self.topo.rendezvous = Some(b);
                    }
                    let reply = BootstrapReply {
                        id: NodeId::Broker(b),
                        neighbors,
                        edge: None,
                        mode: self.mode_for(b),
                        strategy: self.strategy_config(),
                        next_hops: self.topo.next_hops_for(b),
                        heartbeat_period: self.cfg.heartbeat_period,
                        failure_multiplier: self.cfg.failure_multiplier,
                    };
                    let id = self.next_id();
                    out.push(ControllerOut::Reply(Message::new(
                        id,
                        NodeId::Controller,
                        Payload::BootstrapReply(reply),
                    )));
                    if let Some(p) = parent {
                        let addr = self.topo.brokers[&b].addr.clone();
                        let cmd = self.command(p, Command::AddNeighbor(b, addr));
                        out.push(cmd);
                    }
                    self.push_next_hops_except(b, &mut out);
                }
            },
            BootstrapRequest::Client {
                role,
                existing,
                feedback,
            } => {
                let _ = feedback; // edge broker learns it from Attach
                match self.place_client() {
                    Err(e) => {
                        let id = self.next_id();
                        out.push(ControllerOut::Reply(Message::new(
                            id,
                            NodeId::Controller,
                            Payload::Error {
                                text: format!("join rejected: {}", e),
                            },
                        )));
                    }
                    Ok(edge) => {
                        let c = match existing {
                            Some(c) => c,
                            None => {
                                self.topo.id_counter += 1;
                                ClientId {
                                    role,
                                    num: self.topo.id_counter,
                                }
                            }
                        };
                        if let Some(prev) = self.topo.clients.get(&c) {
                            // Re-bootstrap: drop the stale assignment.
                            if let Some(info) = self.topo.brokers.get_mut(&prev.edge) {
                                info.clients.remove(&c);
                            }
                        }
                        self.topo.clients.insert(
                            c,
                            ClientInfo {
                                edge,
                                orphaned: false,
                            },
                        );
                        self.topo.brokers.get_mut(&edge).unwrap().clients.insert(c);
                        let addr = self.topo.brokers[&edge].addr.clone();
                        let reply = BootstrapReply {
                            id: NodeId::Client(c),
                            neighbors: Vec::new(),
                            edge: Some((edge, addr)),
                            mode: self.mode_for(edge),
                            strategy: self.strategy_config(),
                            next_hops: BTreeMap::new(),
                            heartbeat_period: self.cfg.heartbeat_period,
                            failure_multiplier: self.cfg.failure_multiplier,
                        };
                        let id = self.next_id();
                        out.push(ControllerOut::Reply(Message::new(
                            id,
                            NodeId::Controller,
                            Payload::BootstrapReply(reply),
                        )));
                    }
                }
            }
        }
        out
    }

    /// Next-hop tables are recomputed and pushed after every topology
    /// change, before the change is considered complete.
    fn push_next_hops_except(&mut self, skip: BrokerId, out: &mut Vec<ControllerOut>) {
        let ids: Vec<BrokerId> = self.topo.brokers.keys().copied().collect();
        for b in ids {
            if b == skip {
                continue;
            }
            let table = self.topo.next_hops_for(b);
            let cmd = self.command(b, Command::InstallNextHops(table));
            out.push(cmd);
        }
    }

    // -----------------------------------------------------------------
    // Heartbeats and failure detection
    // -----------------------------------------------------------------

    pub fn handle_heartbeat(
        &mut self,
        from: BrokerId,
        sample: StatsSample,
        now: u64,
    ) -> Vec<ControllerOut> {
        let window = self.cfg.stats_window;
        match self.topo.brokers.get_mut(&from) {
            Some(info) => {
                info.last_heartbeat = now;
                info.stats.push_back((now, sample.total()));
                while info.stats.len() > window {
                    info.stats.pop_front();
                }
                info.client_entries = sample.client_entries;
                Vec::new()
            }
            None => alloc::vec![ControllerOut::Diag(format!(
                "heartbeat from unknown broker {} ignored",
                from
            ))],
        }
    }

    /// A client leaving cleanly; best-effort bookkeeping removal.
    pub fn handle_depart(&mut self, c: ClientId) -> Vec<ControllerOut> {
        if let Some(info) = self.topo.clients.remove(&c) {
            if let Some(b) = self.topo.brokers.get_mut(&info.edge) {
                b.clients.remove(&c);
            }
        }
        Vec::new()
    }

    /// Brokers silent for more than `failure_multiplier * heartbeat_period`
    /// (strict inequality).
    pub fn detect_failures(&self, now: u64) -> Vec<BrokerId> {
        let threshold = self.cfg.failure_multiplier * self.cfg.heartbeat_period;
        self.topo
            .brokers
            .iter()
            .filter(|(_, i)| now.saturating_sub(i.last_heartbeat) > threshold)
            .map(|(b, _)| *b)
            .collect()
    }

    /// Brokers whose windowed message rate exceeds the threshold.
    pub fn detect_congestion(&self) -> Vec<BrokerId> {
        self.topo
            .brokers
            .iter()
            .filter(|(_, i)| i.rate(self.cfg.heartbeat_period) > self.cfg.congestion_threshold)
            .map(|(b, _)| *b)
            .collect()
    }

    /// Periodic maintenance: failure detection plus repair, then congestion
    /// plus migration planning.
    pub fn sweep(&mut self, now: u64) -> Vec<ControllerOut> {
        let mut out = Vec::new();
        let failed = self.detect_failures(now);
        if !failed.is_empty() {
            out.extend(self.plan_repair(&failed));
        }
        for b in self.detect_congestion() {
            out.extend(self.plan_migration(b, now));
        }
        out
    }

    // -----------------------------------------------------------------
    // Repair
    // -----------------------------------------------------------------

    /// Removes the failed brokers, reattaches every orphaned subtree, marks
    /// orphaned clients (they re-bootstrap on their own timeout), refreshes
    /// next-hop tables, and re-designates the rendezvous broker if it died.
    pub fn plan_repair(&mut self, failed: &[BrokerId]) -> Vec<ControllerOut> {
        let mut out = Vec::new();
        let mut orphaned_clients: BTreeSet<ClientId> = BTreeSet::new();
        let mut cut_points: BTreeSet<BrokerId> = BTreeSet::new();

        for f in failed {
            let Some(info) = self.topo.brokers.remove(f) else {
                continue;
            };
            for n in &info.neighbors {
                if let Some(ni) = self.topo.brokers.get_mut(n) {
                    ni.neighbors.remove(f);
                    cut_points.insert(*n);
                    let cmd = self.command(*n, Command::RemoveNeighbor(*f));
                    out.push(cmd);
                }
            }
            orphaned_clients.extend(info.clients.iter().copied());
        }
        for c in &orphaned_clients {
            if let Some(ci) = self.topo.clients.get_mut(c) {
                ci.orphaned = true;
            }
        }

        if self.topo.brokers.is_empty() {
            self.topo.rendezvous = None;
            out.push(ControllerOut::Diag(
                "all brokers failed; system empty".into(),
            ));
            return out;
        }

        // Reattach: the component holding the lowest surviving id is the
        // main tree; every other component hangs back on via its cut point
        // (the broker that lost a failed neighbor), placed like a join.
        let components = self.topo.components();
        let main_idx = components
            .iter()
            .enumerate()
            .min_by_key(|(_, c)| *c.iter().next().unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let mut connected = components[main_idx].clone();
        for (i, comp) in components.iter().enumerate() {
            if i == main_idx {
                continue;
            }
            let orphan_root = comp
                .iter()
                .find(|b| cut_points.contains(b))
                .or_else(|| comp.iter().next())
                .copied()
                .unwrap();
            // Smallest degree below the cap wins; if everything is at the
            // cap, reconnecting still beats partition.
            let target = connected
                .iter()
                .filter(|b| self.topo.brokers[b].neighbors.len() < self.cfg.max_degree)
                .min_by_key(|b| (self.topo.brokers[b].neighbors.len(), **b))
                .or_else(|| {
                    connected
                        .iter()
                        .min_by_key(|b| (self.topo.brokers[b].neighbors.len(), **b))
                })
                .copied()
                .unwrap();
            self.topo
                .brokers
                .get_mut(&orphan_root)
                .unwrap()
                .neighbors
                .insert(target);
            self.topo
                .brokers
                .get_mut(&target)
                .unwrap()
                .neighbors
                .insert(orphan_root);
            let target_addr = self.topo.brokers[&target].addr.clone();
            let orphan_addr = self.topo.brokers[&orphan_root].addr.clone();
            let cmd = self.command(orphan_root, Command::AddNeighbor(target, target_addr));
            out.push(cmd);
            let cmd = self.command(target, Command::AddNeighbor(orphan_root, orphan_addr));
            out.push(cmd);
            connected.extend(comp.iter().copied());
        }

        // Rendezvous re-designation: lowest-id survivor.
        let new_root = *self.topo.brokers.keys().next().unwrap();
        let root_changed = self.topo.rendezvous != Some(new_root);
        if root_changed {
            self.topo.rendezvous = Some(new_root);
        }

        self.push_next_hops_except(BrokerId(0), &mut out);

        if root_changed {
            let ids: Vec<BrokerId> = self.topo.brokers.keys().copied().collect();
            for b in &ids {
                let cmd = self.command(*b, Command::SetControlRendezvous(new_root));
                out.push(cmd);
            }
            if self.cfg.forwarding == Forwarding::Rendezvous {
                for b in &ids {
                    let mode = if *b == new_root {
                        Mode::RendezvousRoot
                    } else {
                        Mode::Rendezvous { relay: new_root }
                    };
                    let cmd = self.command(*b, Command::SetMode(mode));
                    out.push(cmd);
                }
            }
            if self.cfg.forwarding == Forwarding::Rendezvous
                || self.cfg.strategy == crate::routing::Strategy::Rendezvous
            {
                for b in &ids {
                    if *b != new_root {
                        let cmd = self.command(*b, Command::ResendControl { to: new_root });
                        out.push(cmd);
                    }
                }
            }
        }

        // Under rendezvous forwarding the root still holds entries of the
        // failed broker's clients; under advertisement-based forwarding the
        // purge cascades from the removed edges instead.
        if self.cfg.forwarding == Forwarding::Rendezvous && !orphaned_clients.is_empty() {
            let cmd = self.command(
                new_root,
                Command::PurgeSources(orphaned_clients.iter().copied().collect()),
            );
            out.push(cmd);
        }
        out
    }

    // -----------------------------------------------------------------
    // Migration
    // -----------------------------------------------------------------

    /// Cost model: windowed message rate. Moves half the congested
    /// broker's movable clients (producers and consumers, fewest entries
    /// first) to the least-loaded broker, if one is strictly less loaded.
    pub fn plan_migration(&mut self, congested: BrokerId, now: u64) -> Vec<ControllerOut> {
        let mut out = Vec::new();
        let Some(info) = self.topo.brokers.get(&congested) else {
            return out;
        };
        let window_span = self.cfg.stats_window as u64 * self.cfg.heartbeat_period;
        if let Some(last) = info.last_migration {
            if now.saturating_sub(last) < window_span {
                return out;
            }
        }
        let my_rate = info.rate(self.cfg.heartbeat_period);
        let Some((target, _)) = self
            .topo
            .brokers
            .iter()
            .filter(|(b, _)| **b != congested)
            .map(|(b, i)| (*b, i.rate(self.cfg.heartbeat_period)))
            .filter(|(_, r)| *r < my_rate)
            .min_by(|(ab, ar), (bb, br)| ar.partial_cmp(br).unwrap().then(ab.cmp(bb)))
        else {
            return out;
        };

        let mut movable: Vec<ClientId> = info
            .clients
            .iter()
            .filter(|c| matches!(c.role, ClientRole::Producer | ClientRole::Consumer))
            .copied()
            .collect();
        if movable.is_empty() {
            return out;
        }
        let entries = info.client_entries.clone();
        movable.sort_by_key(|c| (entries.get(c).copied().unwrap_or(0), *c));
        let take = movable.len().div_ceil(2);
        let moving: Vec<ClientId> = movable.into_iter().take(take).collect();

        for c in &moving {
            self.topo
                .brokers
                .get_mut(&congested)
                .unwrap()
                .clients
                .remove(c);
            self.topo
                .brokers
                .get_mut(&target)
                .unwrap()
                .clients
                .insert(*c);
            self.topo.clients.insert(
                *c,
                ClientInfo {
                    edge: target,
                    orphaned: false,
                },
            );
        }
        self.topo
            .brokers
            .get_mut(&congested)
            .unwrap()
            .last_migration = Some(now);
        let cmd = self.command(
            congested,
            Command::MigrateClients {
                clients: moving,
                to: target,
            },
        );
        out.push(cmd);
        out
    }
}
