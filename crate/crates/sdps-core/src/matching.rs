//! Indexed stores of subscriptions and advertisements.
//!
//! The store keeps attribute-keyed posting lists plus a residual list for
//! empty filters; forward matching unions the posting lists of the
//! publication's attributes and verifies candidates with `match_filter`.
//! Every query is contractually equal to a linear scan, which the tests
//! check against directly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{filters_intersect, match_filter, ClientId, Filter, MessageId, Publication};

/// What an entry routes: consumer interest or a producer's declared region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EntryKind {
    Subscription,
    Advertisement,
}

impl EntryKind {
    pub fn label(self) -> &'static str {
        match self {
            EntryKind::Subscription => "sub",
            EntryKind::Advertisement => "ad",
        }
    }
}

/// Whether the client issued the entry itself or a policy generated it on
/// the client's behalf. Policy-generated entries always record their
/// generating policy and target so they can be retracted on replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    ClientIssued,
    PolicyGenerated { policy: MessageId, target: ClientId },
}

/// One advertisement or subscription.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub id: MessageId,
    pub source: ClientId,
    pub kind: EntryKind,
    pub filter: Filter,
    pub origin: Origin,
}

impl Entry {
    pub fn new(id: MessageId, source: ClientId, kind: EntryKind, filter: Filter) -> Entry {
        Entry {
            id,
            source,
            kind,
            filter,
            origin: Origin::ClientIssued,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicateId(pub MessageId);

impl fmt::Display for DuplicateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "entry id {} already present", self.0)
    }
}

impl core::error::Error for DuplicateId {}

/// Entries indexed by id, by source, and by constrained attribute.
#[derive(Debug, Clone, Default)]
pub struct EntryStore {
    entries: BTreeMap<MessageId, Entry>,
    by_source: BTreeMap<ClientId, BTreeSet<MessageId>>,
    by_attr: BTreeMap<String, BTreeSet<MessageId>>,
    // Empty filters constrain nothing and must join every match query.
    residual: BTreeSet<MessageId>,
}

impl EntryStore {
    pub fn new() -> EntryStore {
        EntryStore::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: MessageId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn get(&self, id: MessageId) -> Option<&Entry> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entry> {
        self.entries.values()
    }

    pub fn insert(&mut self, e: Entry) -> Result<(), DuplicateId> {
        if self.entries.contains_key(&e.id) {
            return Err(DuplicateId(e.id));
        }
        self.by_source.entry(e.source).or_default().insert(e.id);
        let mut any_attr = false;
        for attr in e.filter.attributes() {
            any_attr = true;
            self.by_attr.entry(attr.into()).or_default().insert(e.id);
        }
        if !any_attr {
            self.residual.insert(e.id);
        }
        self.entries.insert(e.id, e);
        Ok(())
    }

    /// Removes and returns the entry; an absent id is a no-op.
    pub fn remove(&mut self, id: MessageId) -> Option<Entry> {
        let e = self.entries.remove(&id)?;
        if let Some(set) = self.by_source.get_mut(&e.source) {
            set.remove(&id);
            if set.is_empty() {
                self.by_source.remove(&e.source);
            }
        }
        for attr in e.filter.attributes() {
            if let Some(set) = self.by_attr.get_mut(attr) {
                set.remove(&id);
                if set.is_empty() {
                    self.by_attr.remove(attr);
                }
            }
        }
        self.residual.remove(&id);
        Some(e)
    }

    /// Entries whose filter matches the publication.
    pub fn match_publication(&self, p: &Publication) -> Vec<&Entry> {
        let mut candidates: BTreeSet<MessageId> = self.residual.clone();
        for (attr, _) in p.iter() {
            if let Some(ids) = self.by_attr.get(attr) {
                candidates.extend(ids.iter().copied());
            }
        }
        candidates
            .into_iter()
            .map(|id| &self.entries[&id])
            .filter(|e| match_filter(&e.filter, p))
            .collect()
    }

    /// All entries issued by (or generated for) the given client.
    pub fn entries_by_source(&self, c: ClientId) -> Vec<&Entry> {
        self.by_source
            .get(&c)
            .into_iter()
            .flat_map(|ids| ids.iter().map(|id| &self.entries[id]))
            .collect()
    }

    /// Entries whose filter intersects `f`.
    pub fn intersecting_entries(&self, f: &Filter) -> Vec<&Entry> {
        self.entries
            .values()
            .filter(|e| filters_intersect(&e.filter, f))
            .collect()
    }
}

/// Policy condition evaluation is the reverse of publication matching: the
/// condition plays the subscription, the metadata record the publication.
/// Identical semantics to `match_filter`.
pub fn reverse_match(policy_condition: &Filter, metadata: &Publication) -> bool {
    match_filter(policy_condition, metadata)
}
