//! The centralized brute-force oracle.
//!
//! Replays the client-visible operation trace of a run, ignoring topology
//! entirely: policy firings are computed by direct evaluation and every
//! publication is matched against every live subscription. The result is
//! the normative expected-delivery set the distributed run must equal at
//! quiescence.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::matching::{Entry, EntryKind, Origin};
use crate::model::{match_filter, ClientId, ClientRole, Filter, MessageId, NodeId, Publication};
use crate::policy::{
    apply_firing, apply_publication_policies, evaluate_policy, resolve_meta_refs, FireOrder,
    Policy, PolicyText, PublicationPolicy,
};
use crate::sim::scenario::Tick;

/// One client-visible operation, as the simulator observed it take effect.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceOp {
    Advertise {
        time: Tick,
        id: MessageId,
        client: ClientId,
        filter: Filter,
    },
    Unadvertise {
        time: Tick,
        id: MessageId,
    },
    Subscribe {
        time: Tick,
        id: MessageId,
        client: ClientId,
        filter: Filter,
    },
    Unsubscribe {
        time: Tick,
        id: MessageId,
    },
    Publish {
        time: Tick,
        index: usize,
        producer: ClientId,
        publication: Publication,
    },
    Metadata {
        time: Tick,
        client: ClientId,
        version: u64,
        attrs: Publication,
    },
    InstallPolicy {
        time: Tick,
        policy: PolicyText,
    },
    RemovePolicy {
        time: Tick,
        id: MessageId,
    },
    Depart {
        time: Tick,
        client: ClientId,
    },
    /// The client's edge broker failed: its entries die with it until
    /// re-issued (re-issues appear as later trace ops).
    Orphaned {
        time: Tick,
        client: ClientId,
    },
}

impl TraceOp {
    pub fn time(&self) -> Tick {
        match self {
            TraceOp::Advertise { time, .. }
            | TraceOp::Unadvertise { time, .. }
            | TraceOp::Subscribe { time, .. }
            | TraceOp::Unsubscribe { time, .. }
            | TraceOp::Publish { time, .. }
            | TraceOp::Metadata { time, .. }
            | TraceOp::InstallPolicy { time, .. }
            | TraceOp::RemovePolicy { time, .. }
            | TraceOp::Depart { time, .. }
            | TraceOp::Orphaned { time, .. } => *time,
        }
    }
}

#[derive(Debug, Default)]
struct OracleState {
    /// Live entries per client: issued and policy-generated.
    entries: BTreeMap<ClientId, Vec<Entry>>,
    metadata: BTreeMap<ClientId, (u64, Publication)>,
    policies: BTreeMap<MessageId, Policy>,
    pub_policies: BTreeMap<MessageId, PublicationPolicy>,
    expected: BTreeSet<(ClientId, usize)>,
    seq: u64,
}

impl OracleState {
    fn entries_mut(&mut self, c: ClientId) -> &mut Vec<Entry> {
        self.entries.entry(c).or_default()
    }

    /// Directly executes one policy's actions for one target, mirroring the
    /// firing a designated matcher would order: `$meta` references are
    /// substituted first, then the instructions run against the target's
    /// current entries with replacement semantics.
    fn fire(&mut self, policy_id: MessageId, target: ClientId) {
        let Some(pol) = self.policies.get(&policy_id) else {
            return;
        };
        if pol.target_role.client_role() != target.role {
            return;
        }
        let Some((version, attrs)) = self.metadata.get(&target).cloned() else {
            return;
        };
        let current = self.entries.get(&target).cloned().unwrap_or_default();
        if !evaluate_policy(pol, &attrs, current.iter()) {
            // Retract any live generation: the generated set must stay a
            // function of the latest metadata.
            self.entries_mut(target).retain(|e| {
                e.origin
                    != Origin::PolicyGenerated {
                        policy: policy_id,
                        target,
                    }
            });
            return;
        }
        let mut instructions = Vec::new();
        for ins in &pol.actions {
            if let Ok(ins) = resolve_meta_refs(ins, &attrs) {
                instructions.push(ins); // failures skip the instruction
            }
        }
        let order = FireOrder {
            policy: policy_id,
            target,
            md_version: version,
            instructions,
            reinjection: false,
        };
        let mut seq = self.seq;
        let result = apply_firing(&order, &current, || {
            seq += 1;
            MessageId::new(NodeId::Controller, seq)
        });
        self.seq = seq;
        let list = self.entries_mut(target);
        for op in result.ops {
            match op {
                crate::policy::FiringOp::Retract(id) => list.retain(|e| e.id != id),
                crate::policy::FiringOp::Insert(e) => list.push(e),
            }
        }
    }

    fn refire_all_for(&mut self, target: ClientId) {
        let ids: Vec<MessageId> = self
            .policies
            .values()
            .filter(|p| p.target_role.client_role() == target.role)
            .map(|p| p.id)
            .collect();
        for id in ids {
            self.fire(id, target);
        }
    }

    fn step(&mut self, op: &TraceOp) {
        match op {
            TraceOp::Advertise {
                id, client, filter, ..
            } => {
                self.entries_mut(*client).push(Entry::new(
                    *id,
                    *client,
                    EntryKind::Advertisement,
                    filter.clone(),
                ));
            }
            TraceOp::Subscribe {
                id, client, filter, ..
            } => {
                self.entries_mut(*client).push(Entry::new(
                    *id,
                    *client,
                    EntryKind::Subscription,
                    filter.clone(),
                ));
            }
            TraceOp::Unadvertise { id, .. } | TraceOp::Unsubscribe { id, .. } => {
                for es in self.entries.values_mut() {
                    es.retain(|e| e.id != *id);
                }
            }
            TraceOp::Publish {
                index,
                producer,
                publication,
                ..
            } => {
                let transformed = match self.metadata.get(producer) {
                    Some((_, attrs)) => {
                        let pols: Vec<&PublicationPolicy> = self.pub_policies.values().collect();
                        apply_publication_policies(&pols, publication, attrs)
                    }
                    None => publication.clone(),
                };
                let advertised = self.entries.get(producer).is_some_and(|es| {
                    es.iter().any(|e| {
                        e.kind == EntryKind::Advertisement && match_filter(&e.filter, &transformed)
                    })
                });
                if !advertised {
                    return;
                }
                for (client, es) in &self.entries {
                    if client.role != ClientRole::Consumer {
                        continue;
                    }
                    let hit = es.iter().any(|e| {
                        e.kind == EntryKind::Subscription && match_filter(&e.filter, &transformed)
                    });
                    if hit {
                        self.expected.insert((*client, *index));
                    }
                }
            }
            TraceOp::Metadata {
                client,
                version,
                attrs,
                ..
            } => {
                let newer = self
                    .metadata
                    .get(client)
                    .map(|(v, _)| version >= v)
                    .unwrap_or(true);
                if newer {
                    self.metadata.insert(*client, (*version, attrs.clone()));
                    self.refire_all_for(*client);
                }
            }
            TraceOp::InstallPolicy { policy, .. } => {
                let id = match policy {
                    PolicyText::Policy(p) => p.id,
                    PolicyText::PubPolicy(p) => p.id,
                };
                if self.policies.contains_key(&id) || self.pub_policies.contains_key(&id) {
                    return; // duplicate install (owner re-attach)
                }
                match policy {
                    PolicyText::Policy(p) => {
                        self.policies.insert(p.id, p.clone());
                        let targets: Vec<ClientId> = self
                            .metadata
                            .keys()
                            .filter(|c| c.role == p.target_role.client_role())
                            .copied()
                            .collect();
                        for t in targets {
                            self.fire(p.id, t);
                        }
                    }
                    PolicyText::PubPolicy(p) => {
                        self.pub_policies.insert(p.id, p.clone());
                    }
                }
            }
            TraceOp::RemovePolicy { id, .. } => {
                self.policies.remove(id);
                self.pub_policies.remove(id);
                for es in self.entries.values_mut() {
                    es.retain(
                        |e| !matches!(e.origin, Origin::PolicyGenerated { policy, .. } if policy == *id),
                    );
                }
            }
            TraceOp::Depart { client, .. } => {
                self.entries.remove(client);
                self.metadata.remove(client);
            }
            TraceOp::Orphaned { client, .. } => {
                // The edge broker died; everything the client sourced dies in
                // the network until re-issued or re-injected.
                self.entries.remove(client);
            }
        }
    }
}

fn replay(trace: &[TraceOp]) -> OracleState {
    let mut st = OracleState::default();
    for op in trace {
        st.step(op);
    }
    st
}

/// Expected (subscriber, publish index) pairs for the whole trace.
pub fn oracle_deliveries(trace: &[TraceOp]) -> BTreeSet<(ClientId, usize)> {
    replay(trace).expected
}

/// Live policy-generated entries at the end of the trace, projected to a
/// form comparable across runs (ids differ between allocators).
pub fn oracle_generated(trace: &[TraceOp]) -> BTreeSet<(MessageId, ClientId, EntryKind, Filter)> {
    let st = replay(trace);
    let mut out = BTreeSet::new();
    for es in st.entries.values() {
        for e in es {
            if let Origin::PolicyGenerated { policy, target } = e.origin {
                out.insert((policy, target, e.kind, e.filter.clone()));
            }
        }
    }
    out
}

/// Expected live generation count per (policy, target) at the end of the
/// trace.
pub fn oracle_generation_counts(trace: &[TraceOp]) -> BTreeMap<(MessageId, ClientId), usize> {
    let st = replay(trace);
    let mut out = BTreeMap::new();
    for es in st.entries.values() {
        for e in es {
            if let Origin::PolicyGenerated { policy, target } = e.origin {
                *out.entry((policy, target)).or_insert(0) += 1;
            }
        }
    }
    out
}

/// The (policy, target, metadata version) keys whose conditions held when
/// the metadata arrived, i.e. the firings an exactly-once system must count
/// exactly once.
pub fn oracle_fired_keys(trace: &[TraceOp]) -> BTreeSet<(MessageId, ClientId, u64)> {
    let mut st = OracleState::default();
    let mut fired = BTreeSet::new();
    for op in trace {
        // Record condition outcomes before mutating on the triggering ops.
        match op {
            TraceOp::Metadata {
                client,
                version,
                attrs,
                ..
            } => {
                let newer = st
                    .metadata
                    .get(client)
                    .map(|(v, _)| version > v)
                    .unwrap_or(true);
                if newer {
                    let current = st.entries.get(client).cloned().unwrap_or_default();
                    for p in st.policies.values() {
                        if p.target_role.client_role() == client.role
                            && evaluate_policy(p, attrs, current.iter())
                        {
                            fired.insert((p.id, *client, *version));
                        }
                    }
                }
            }
            TraceOp::InstallPolicy {
                policy: PolicyText::Policy(p),
                ..
            } if !st.policies.contains_key(&p.id) => {
                for (client, (version, attrs)) in &st.metadata {
                    if client.role != p.target_role.client_role() {
                        continue;
                    }
                    let current = st.entries.get(client).cloned().unwrap_or_default();
                    if evaluate_policy(p, attrs, current.iter()) {
                        fired.insert((p.id, *client, *version));
                    }
                }
            }
            _ => {}
        }
        st.step(op);
    }
    fired
}
