//! Policy storage and evaluation: reverse matching of policy conditions
//! against client metadata, template instantiation with `$`-variable
//! substitution, and execution of insert/unsub/modify instructions as
//! remote advertisements and subscriptions.
//!
//! Textual policy format:
//!
//! ```text
//! POLICY id=<n> owner=<client> target=<producer|consumer>
//!     WHEN <filter>
//!     [STATE has_sub(<filter>) | has_ad(<filter>) | lacks_sub(<filter>) | lacks_ad(<filter>)]*
//!     DO <instruction> (; <instruction>)*
//!
//! instruction := insert_ad <tfilter> | insert_sub <tfilter>
//!              | insert_unad <tfilter> | insert_unsub <tfilter>
//!              | modify <tfilter> (add <tgroup> | del <attr> | set <tgroup>)*
//!
//! PUBPOLICY id=<n> owner=<client> WHEN <filter> IF <filter>
//!     SET [<attr>,<tvalue>] (,? [<attr>,<tvalue>])*
//! ```
//!
//! Template values extend plain values with variable references:
//! `$meta.country` reads the metadata attribute `meta.country` at generation
//! time, `$old.price` reads the value constrained on `price` in the entry
//! being modified, and either form takes an optional numeric offset, as in
//! `$old.price+10`. A quoted `'$meta.country'` is accepted and means the
//! same reference. The `$old.` prefix is reserved; other `$name` references
//! read metadata attribute `name`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::matching::reverse_match;
use crate::matching::{Entry, EntryKind, Origin};
use crate::model::{
    filters_intersect, match_filter, parse_filter, valid_attribute, BrokerId, ClientId, ClientRole,
    Filter, MessageId, Number, Op, Predicate, Publication, Value,
};

// ---------------------------------------------------------------------------
// Metadata
// ---------------------------------------------------------------------------

/// Client-descriptive attribute record, same format as a publication,
/// versioned per client. A newer version fully replaces an older one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metadata {
    pub client: ClientId,
    pub version: u64,
    pub attrs: Publication,
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Value slot of a template: a literal, or a variable reference resolved at
/// generation time, with an optional numeric offset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateValue {
    Lit(Value),
    /// Reads a metadata attribute (`$meta.country` reads `meta.country`).
    MetaRef {
        attr: String,
        delta: Number,
    },
    /// Reads the value constrained on `attr` in the entry being modified.
    OldRef {
        attr: String,
        delta: Number,
    },
}

impl TemplateValue {
    fn zero() -> Number {
        Number::new(0.0).unwrap()
    }

    pub fn lit(v: Value) -> TemplateValue {
        TemplateValue::Lit(v)
    }

    pub fn meta(attr: impl Into<String>) -> TemplateValue {
        TemplateValue::MetaRef {
            attr: attr.into(),
            delta: Self::zero(),
        }
    }

    pub fn old(attr: impl Into<String>) -> TemplateValue {
        TemplateValue::OldRef {
            attr: attr.into(),
            delta: Self::zero(),
        }
    }

    pub fn is_literal(&self) -> bool {
        matches!(self, TemplateValue::Lit(_))
    }
}

impl fmt::Display for TemplateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (prefix, attr, delta) = match self {
            TemplateValue::Lit(v) => return write!(f, "{}", v),
            TemplateValue::MetaRef { attr, delta } => ("$", attr, delta),
            TemplateValue::OldRef { attr, delta } => ("$old.", attr, delta),
        };
        write!(f, "{}{}", prefix, attr)?;
        let d = delta.get();
        if d > 0.0 {
            write!(f, "+{}", delta)?;
        } else if d < 0.0 {
            write!(f, "{}", delta)?;
        }
        Ok(())
    }
}

/// One template predicate; unlike [`Predicate`], the value slot may hold a
/// reference whose kind is unknown until substitution.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TemplatePredicate {
    pub attribute: String,
    pub op: Op,
    pub value: Option<TemplateValue>,
}

impl fmt::Display for TemplatePredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.value {
            Some(v) => write!(f, "[{},{},{}]", self.attribute, self.op.symbol(), v),
            None => write!(f, "[{},{}]", self.attribute, self.op.symbol()),
        }
    }
}

/// A filter whose values may be variable references.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct TemplateFilter {
    pub predicates: Vec<TemplatePredicate>,
}

impl TemplateFilter {
    pub fn new(mut predicates: Vec<TemplatePredicate>) -> TemplateFilter {
        predicates.sort();
        predicates.dedup();
        TemplateFilter { predicates }
    }

    /// Lifts a concrete filter into a template with literal slots.
    pub fn from_filter(f: &Filter) -> TemplateFilter {
        TemplateFilter::new(
            f.predicates()
                .iter()
                .map(|p| TemplatePredicate {
                    attribute: p.attribute().to_string(),
                    op: p.op(),
                    value: p.value().cloned().map(TemplateValue::Lit),
                })
                .collect(),
        )
    }

    pub fn has_refs(&self) -> bool {
        self.predicates
            .iter()
            .any(|p| p.value.as_ref().is_some_and(|v| !v.is_literal()))
    }
}

impl fmt::Display for TemplateFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.predicates.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", p)?;
        }
        Ok(())
    }
}

/// Why template instantiation failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplateError {
    Unresolved(String),
    OffsetOnText(String),
    BadPredicate(String),
}

impl fmt::Display for TemplateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateError::Unresolved(r) => write!(f, "unresolved variable `{}`", r),
            TemplateError::OffsetOnText(r) => write!(f, "numeric offset on text value `{}`", r),
            TemplateError::BadPredicate(e) => write!(f, "substituted predicate invalid: {}", e),
        }
    }
}

impl core::error::Error for TemplateError {}

fn resolve_value(
    tv: &TemplateValue,
    md: &Publication,
    old: Option<&Filter>,
) -> Result<Value, TemplateError> {
    let (raw, delta, name) = match tv {
        TemplateValue::Lit(v) => return Ok(v.clone()),
        TemplateValue::MetaRef { attr, delta } => (
            md.get(attr).cloned(),
            delta.get(),
            alloc::format!("${}", attr),
        ),
        TemplateValue::OldRef { attr, delta } => {
            let old =
                old.ok_or_else(|| TemplateError::Unresolved(alloc::format!("$old.{}", attr)))?;
            let v = old
                .predicates()
                .iter()
                .find(|p| p.attribute() == attr && p.value().is_some())
                .and_then(|p| p.value().cloned());
            (v, delta.get(), alloc::format!("$old.{}", attr))
        }
    };
    let v = raw.ok_or_else(|| TemplateError::Unresolved(name.clone()))?;
    if delta == 0.0 {
        return Ok(v);
    }
    match v {
        Value::Number(n) => Value::number(n.get() + delta)
            .ok_or_else(|| TemplateError::BadPredicate("offset overflows".into())),
        Value::Text(_) => Err(TemplateError::OffsetOnText(name)),
    }
}

/// Substitutes every variable and canonicalizes. `old` supplies `$old.`
/// references when an existing entry is being modified.
pub fn instantiate_template(
    t: &TemplateFilter,
    md: &Publication,
    old: Option<&Filter>,
) -> Result<Filter, TemplateError> {
    let mut preds = Vec::with_capacity(t.predicates.len());
    for tp in &t.predicates {
        let value = match &tp.value {
            Some(tv) => Some(resolve_value(tv, md, old)?),
            None => None,
        };
        preds.push(
            Predicate::new(tp.attribute.clone(), tp.op, value)
                .map_err(|e| TemplateError::BadPredicate(e.to_string()))?,
        );
    }
    Ok(Filter::new(preds))
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

/// Which data-plane role a policy regulates. Advertiser-owned policies
/// target producers; interest-manager-owned policies target consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TargetRole {
    Producer,
    Consumer,
}

impl TargetRole {
    pub fn client_role(self) -> ClientRole {
        match self {
            TargetRole::Producer => ClientRole::Producer,
            TargetRole::Consumer => ClientRole::Consumer,
        }
    }

    /// The entry kind a target of this role owns.
    pub fn entry_kind(self) -> EntryKind {
        match self {
            TargetRole::Producer => EntryKind::Advertisement,
            TargetRole::Consumer => EntryKind::Subscription,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TargetRole::Producer => "producer",
            TargetRole::Consumer => "consumer",
        }
    }
}

/// Condition over the target's current advertisements or subscriptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StateConditionKind {
    HasSub,
    HasAd,
    LacksSub,
    LacksAd,
}

impl StateConditionKind {
    pub fn entry_kind(self) -> EntryKind {
        match self {
            StateConditionKind::HasSub | StateConditionKind::LacksSub => EntryKind::Subscription,
            StateConditionKind::HasAd | StateConditionKind::LacksAd => EntryKind::Advertisement,
        }
    }

    pub fn positive(self) -> bool {
        matches!(self, StateConditionKind::HasSub | StateConditionKind::HasAd)
    }

    pub fn label(self) -> &'static str {
        match self {
            StateConditionKind::HasSub => "has_sub",
            StateConditionKind::HasAd => "has_ad",
            StateConditionKind::LacksSub => "lacks_sub",
            StateConditionKind::LacksAd => "lacks_ad",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateCondition {
    pub kind: StateConditionKind,
    pub pattern: Filter,
}

/// One policy instruction, executed in listed order on firing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instruction {
    InsertAd(TemplateFilter),
    InsertSub(TemplateFilter),
    InsertUnad(TemplateFilter),
    InsertUnsub(TemplateFilter),
    Modify {
        pattern: TemplateFilter,
        deltas: Vec<ModifyDelta>,
    },
}

impl Instruction {
    fn keyword(&self) -> &'static str {
        match self {
            Instruction::InsertAd(_) => "insert_ad",
            Instruction::InsertSub(_) => "insert_sub",
            Instruction::InsertUnad(_) => "insert_unad",
            Instruction::InsertUnsub(_) => "insert_unsub",
            Instruction::Modify { .. } => "modify",
        }
    }

    /// The entry kind this instruction creates or retracts, if fixed.
    fn entry_kind(&self) -> Option<EntryKind> {
        match self {
            Instruction::InsertAd(_) | Instruction::InsertUnad(_) => Some(EntryKind::Advertisement),
            Instruction::InsertSub(_) | Instruction::InsertUnsub(_) => {
                Some(EntryKind::Subscription)
            }
            Instruction::Modify { .. } => None,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::InsertAd(t)
            | Instruction::InsertSub(t)
            | Instruction::InsertUnad(t)
            | Instruction::InsertUnsub(t) => write!(f, "{} {}", self.keyword(), t),
            Instruction::Modify { pattern, deltas } => {
                write!(f, "modify {}", pattern)?;
                for d in deltas {
                    write!(f, " {}", d)?;
                }
                Ok(())
            }
        }
    }
}

/// One edit applied by a `modify` instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModifyDelta {
    AddPredicate(TemplatePredicate),
    DeletePredicate(String),
    SetPredicate(TemplatePredicate),
}

impl fmt::Display for ModifyDelta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModifyDelta::AddPredicate(p) => write!(f, "add {}", p),
            ModifyDelta::DeletePredicate(a) => write!(f, "del {}", a),
            ModifyDelta::SetPredicate(p) => write!(f, "set {}", p),
        }
    }
}

/// An advertisement or subscription policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub id: MessageId,
    pub owner: ClientId,
    pub target_role: TargetRole,
    pub meta_condition: Filter,
    pub state_conditions: Vec<StateCondition>,
    pub actions: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyError {
    OwnerRole(String),
    InstructionKind(String),
    DuplicateId(MessageId),
    Rejected(String),
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::OwnerRole(s)
            | PolicyError::InstructionKind(s)
            | PolicyError::Rejected(s) => f.write_str(s),
            PolicyError::DuplicateId(id) => write!(f, "policy {} already installed", id),
        }
    }
}

impl core::error::Error for PolicyError {}

impl Policy {
    /// Checks the owner-role and instruction-kind invariants.
    pub fn validate(&self) -> Result<(), PolicyError> {
        let expected = match self.owner.role {
            ClientRole::Advertiser => TargetRole::Producer,
            ClientRole::InterestManager => TargetRole::Consumer,
            other => {
                return Err(PolicyError::OwnerRole(alloc::format!(
                    "policy owner must be an advertiser or interest manager, got {:?}",
                    other
                )))
            }
        };
        if self.target_role != expected {
            return Err(PolicyError::OwnerRole(alloc::format!(
                "{} policies must target {}s",
                self.owner,
                expected.label()
            )));
        }
        let kind = self.target_role.entry_kind();
        for ins in &self.actions {
            if let Some(k) = ins.entry_kind() {
                if k != kind {
                    return Err(PolicyError::InstructionKind(alloc::format!(
                        "instruction `{}` does not apply to {} targets",
                        ins.keyword(),
                        self.target_role.label()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A publication-level policy: when the producer's metadata matches and the
/// publication content matches, the listed attributes are set before normal
/// forwarding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicationPolicy {
    pub id: MessageId,
    pub owner: ClientId,
    pub meta_condition: Filter,
    pub content_condition: Filter,
    /// Attribute assignments; `$meta` references allowed, attributes distinct.
    pub transform: Vec<(String, TemplateValue)>,
}

/// Evaluates a policy against one target's state: reverse match of the
/// metadata condition plus every state condition over the target's entries.
pub fn evaluate_policy<'a>(
    pol: &Policy,
    metadata: &Publication,
    entries: impl Iterator<Item = &'a Entry> + Clone,
) -> bool {
    if !reverse_match(&pol.meta_condition, metadata) {
        return false;
    }
    pol.state_conditions.iter().all(|cond| {
        let hit = entries.clone().any(|e| {
            e.kind == cond.kind.entry_kind() && filters_intersect(&e.filter, &cond.pattern)
        });
        hit == cond.kind.positive()
    })
}

/// Applies every matching publication policy in ascending id order. Each
/// set-attribute overwrites or creates the attribute; an unresolvable
/// reference skips only that assignment.
pub fn apply_publication_policies(
    pols: &[&PublicationPolicy],
    p: &Publication,
    md: &Publication,
) -> Publication {
    let mut sorted: Vec<&&PublicationPolicy> = pols.iter().collect();
    sorted.sort_by_key(|pp| pp.id);
    let mut out = p.clone();
    for pp in sorted {
        if !reverse_match(&pp.meta_condition, md) || !match_filter(&pp.content_condition, &out) {
            continue;
        }
        for (attr, tv) in &pp.transform {
            if let Ok(v) = resolve_value(tv, md, None) {
                out.set(attr.clone(), v);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Firing orders and their application at the target's edge broker
// ---------------------------------------------------------------------------

/// What a designated matcher sends to the target's edge broker: the prior
/// generation for (policy, target) is retracted, then the instructions run
/// in order. `$meta` references arrive already substituted; `$old`
/// references resolve against each modified entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FireOrder {
    pub policy: MessageId,
    pub target: ClientId,
    pub md_version: u64,
    pub instructions: Vec<Instruction>,
    /// Re-injection after the target moved to a new edge broker; replays a
    /// past firing and is not a new one.
    pub reinjection: bool,
}

/// One step of an applied firing, in execution order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FiringOp {
    Retract(MessageId),
    Insert(Entry),
}

#[derive(Debug, Clone, Default)]
pub struct FiringResult {
    pub ops: Vec<FiringOp>,
    pub diagnostics: Vec<String>,
}

/// Executes a firing against the target's current entries, returning the
/// retractions and insertions in order. Pure: the caller owns propagation.
///
/// Finds (for `insert_unad`/`insert_unsub`/`modify`) scan a working view
/// that reflects earlier steps of the same firing. `modify` preserves the
/// origin and source of the entries it rewrites.
pub fn apply_firing(
    order: &FireOrder,
    current: &[Entry],
    mut alloc_id: impl FnMut() -> MessageId,
) -> FiringResult {
    let mut res = FiringResult::default();
    let mut view: Vec<Entry> = current.to_vec();
    let empty_md = Publication::new();

    let retract = |view: &mut Vec<Entry>, res: &mut FiringResult, id: MessageId| {
        view.retain(|e| e.id != id);
        res.ops.push(FiringOp::Retract(id));
    };

    // Replacement semantics: at most one generation per (policy, target).
    let prior: Vec<MessageId> = view
        .iter()
        .filter(|e| {
            e.origin
                == Origin::PolicyGenerated {
                    policy: order.policy,
                    target: order.target,
                }
        })
        .map(|e| e.id)
        .collect();
    for id in prior {
        retract(&mut view, &mut res, id);
    }

    let modify_kind = match order.target.role {
        ClientRole::Producer => EntryKind::Advertisement,
        _ => EntryKind::Subscription,
    };

    for ins in &order.instructions {
        match ins {
            Instruction::InsertAd(t) | Instruction::InsertSub(t) => {
                let kind = ins.entry_kind().unwrap();
                match instantiate_template(t, &empty_md, None) {
                    Ok(filter) => {
                        let e = Entry {
                            id: alloc_id(),
                            source: order.target,
                            kind,
                            filter,
                            origin: Origin::PolicyGenerated {
                                policy: order.policy,
                                target: order.target,
                            },
                        };
                        view.push(e.clone());
                        res.ops.push(FiringOp::Insert(e));
                    }
                    Err(e) => res.diagnostics.push(alloc::format!(
                        "policy {} target {}: {} skipped: {}",
                        order.policy,
                        order.target,
                        ins.keyword(),
                        e
                    )),
                }
            }
            Instruction::InsertUnad(t) | Instruction::InsertUnsub(t) => {
                let kind = ins.entry_kind().unwrap();
                match instantiate_template(t, &empty_md, None) {
                    Ok(x) => {
                        let found: Vec<MessageId> = view
                            .iter()
                            .filter(|e| {
                                e.kind == kind
                                    && e.source == order.target
                                    && filters_intersect(&e.filter, &x)
                            })
                            .map(|e| e.id)
                            .collect();
                        // "If x is not found, ignore this command."
                        for id in found {
                            retract(&mut view, &mut res, id);
                        }
                    }
                    Err(e) => res.diagnostics.push(alloc::format!(
                        "policy {} target {}: {} skipped: {}",
                        order.policy,
                        order.target,
                        ins.keyword(),
                        e
                    )),
                }
            }
            Instruction::Modify { pattern, deltas } => {
                let x = match instantiate_template(pattern, &empty_md, None) {
                    Ok(x) => x,
                    Err(e) => {
                        res.diagnostics.push(alloc::format!(
                            "policy {} target {}: modify skipped: {}",
                            order.policy,
                            order.target,
                            e
                        ));
                        continue;
                    }
                };
                let found: Vec<Entry> = view
                    .iter()
                    .filter(|e| {
                        e.kind == modify_kind
                            && e.source == order.target
                            && filters_intersect(&e.filter, &x)
                    })
                    .cloned()
                    .collect();
                for old in found {
                    match apply_deltas(&old.filter, deltas, &empty_md) {
                        Ok(filter) => {
                            retract(&mut view, &mut res, old.id);
                            let e = Entry {
                                id: alloc_id(),
                                source: old.source,
                                kind: old.kind,
                                filter,
                                origin: old.origin,
                            };
                            view.push(e.clone());
                            res.ops.push(FiringOp::Insert(e));
                        }
                        Err(e) => res.diagnostics.push(alloc::format!(
                            "policy {} target {}: modify left {} unchanged: {}",
                            order.policy,
                            order.target,
                            old.id,
                            e
                        )),
                    }
                }
            }
        }
    }
    res
}

fn apply_deltas(
    old: &Filter,
    deltas: &[ModifyDelta],
    md: &Publication,
) -> Result<Filter, TemplateError> {
    let mut preds: Vec<Predicate> = old.predicates().to_vec();
    for d in deltas {
        match d {
            ModifyDelta::AddPredicate(tp) | ModifyDelta::SetPredicate(tp) => {
                let value = match &tp.value {
                    Some(tv) => Some(resolve_value(tv, md, Some(old))?),
                    None => None,
                };
                let p = Predicate::new(tp.attribute.clone(), tp.op, value)
                    .map_err(|e| TemplateError::BadPredicate(e.to_string()))?;
                if matches!(d, ModifyDelta::SetPredicate(_)) {
                    preds.retain(|q| q.attribute() != tp.attribute);
                }
                preds.push(p);
            }
            ModifyDelta::DeletePredicate(attr) => preds.retain(|q| q.attribute() != attr),
        }
    }
    Ok(Filter::new(preds))
}

// ---------------------------------------------------------------------------
// Per-broker engine: stores, exactly-once firing records, re-evaluation
// ---------------------------------------------------------------------------

/// Stored metadata with its ingress edge broker stamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredMeta {
    pub version: u64,
    pub attrs: Publication,
    pub edge: BrokerId,
}

#[derive(Debug, Clone)]
struct FiringRecord {
    md_version: u64,
    instructions: Vec<Instruction>,
}

#[derive(Debug, Clone)]
struct PubRuleRecord {
    md_version: u64,
    content: Filter,
    sets: Vec<(String, Value)>,
}

/// Outcome of feeding a metadata message to the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaOutcome {
    /// Newer version stored; policies must be re-evaluated for this client.
    Updated,
    /// Same version from a new edge broker: the client moved; live firings
    /// and publication rules must be re-injected at the new edge.
    Rehomed,
    /// Stale or identical; silently ignored.
    Stale,
}

/// A concrete publication transform installed at a producer's edge broker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PubRule {
    pub policy: MessageId,
    pub producer: ClientId,
    pub md_version: u64,
    pub content: Filter,
    pub sets: Vec<(String, Value)>,
}

/// Effect a matcher emits; the hosting broker routes it to the target's
/// edge broker for injection into the data plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineEffect {
    Fire {
        order: FireOrder,
        edge: BrokerId,
    },
    InstallPubRule {
        rule: PubRule,
        edge: BrokerId,
    },
    RetractPubRule {
        policy: MessageId,
        producer: ClientId,
        edge: BrokerId,
    },
    Diagnostic(String),
}

/// What changed and should trigger re-evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    PolicyInstalled(MessageId),
    PubPolicyInstalled(MessageId),
    MetadataUpdated(ClientId),
}

/// Policy and metadata store of one broker, with the designated-matcher
/// firing ledger. The engine is pure bookkeeping: the hosting broker decides
/// which (policy, target) pairs it is the matcher for and supplies the
/// target's entries for state conditions.
#[derive(Debug, Clone, Default)]
pub struct PolicyEngine {
    policies: BTreeMap<MessageId, Policy>,
    pub_policies: BTreeMap<MessageId, PublicationPolicy>,
    metadata: BTreeMap<ClientId, StoredMeta>,
    firings: BTreeMap<(MessageId, ClientId), FiringRecord>,
    pub_rules: BTreeMap<(MessageId, ClientId), PubRuleRecord>,
}

impl PolicyEngine {
    pub fn new() -> PolicyEngine {
        PolicyEngine::default()
    }

    pub fn policies(&self) -> impl Iterator<Item = &Policy> {
        self.policies.values()
    }

    pub fn pub_policies(&self) -> impl Iterator<Item = &PublicationPolicy> {
        self.pub_policies.values()
    }

    pub fn policy(&self, id: MessageId) -> Option<&Policy> {
        self.policies.get(&id)
    }

    pub fn has_policy(&self, id: MessageId) -> bool {
        self.policies.contains_key(&id) || self.pub_policies.contains_key(&id)
    }

    pub fn metadata_of(&self, c: ClientId) -> Option<&StoredMeta> {
        self.metadata.get(&c)
    }

    pub fn metadata_clients(&self, role: ClientRole) -> Vec<ClientId> {
        self.metadata
            .keys()
            .filter(|c| c.role == role)
            .copied()
            .collect()
    }

    pub fn metadata_clients_all(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.metadata.keys().copied()
    }

    pub fn metadata_iter(&self) -> impl Iterator<Item = (ClientId, &StoredMeta)> {
        self.metadata.iter().map(|(c, m)| (*c, m))
    }

    pub fn install_policy(&mut self, pol: Policy) -> Result<(), PolicyError> {
        pol.validate()?;
        if self.has_policy(pol.id) {
            return Err(PolicyError::DuplicateId(pol.id));
        }
        self.policies.insert(pol.id, pol);
        Ok(())
    }

    pub fn install_pub_policy(&mut self, pol: PublicationPolicy) -> Result<(), PolicyError> {
        if self.has_policy(pol.id) {
            return Err(PolicyError::DuplicateId(pol.id));
        }
        let mut attrs: Vec<&str> = pol.transform.iter().map(|(a, _)| a.as_str()).collect();
        attrs.sort();
        attrs.dedup();
        if attrs.len() != pol.transform.len() {
            return Err(PolicyError::Rejected(
                "transform attributes must be distinct".into(),
            ));
        }
        self.pub_policies.insert(pol.id, pol);
        Ok(())
    }

    /// Removes a policy; every live generation it produced is retracted via
    /// an empty firing order. Unknown ids are a no-op.
    pub fn remove_policy(&mut self, id: MessageId) -> Vec<EngineEffect> {
        let mut effects = Vec::new();
        if self.policies.remove(&id).is_some() {
            let stale: Vec<(MessageId, ClientId)> = self
                .firings
                .keys()
                .filter(|(p, _)| *p == id)
                .copied()
                .collect();
            for key in stale {
                let rec = self.firings.remove(&key).unwrap();
                if let Some(md) = self.metadata.get(&key.1) {
                    effects.push(EngineEffect::Fire {
                        order: FireOrder {
                            policy: id,
                            target: key.1,
                            md_version: rec.md_version,
                            instructions: Vec::new(),
                            reinjection: false,
                        },
                        edge: md.edge,
                    });
                }
            }
        }
        if self.pub_policies.remove(&id).is_some() {
            let stale: Vec<(MessageId, ClientId)> = self
                .pub_rules
                .keys()
                .filter(|(p, _)| *p == id)
                .copied()
                .collect();
            for key in stale {
                self.pub_rules.remove(&key);
                if let Some(md) = self.metadata.get(&key.1) {
                    effects.push(EngineEffect::RetractPubRule {
                        policy: id,
                        producer: key.1,
                        edge: md.edge,
                    });
                }
            }
        }
        effects
    }

    /// Stores a metadata message. Stale versions are silently ignored; the
    /// same version from a different edge broker re-homes the client.
    pub fn update_metadata(&mut self, md: &Metadata, edge: BrokerId) -> MetaOutcome {
        match self.metadata.get_mut(&md.client) {
            Some(cur) if md.version < cur.version => MetaOutcome::Stale,
            Some(cur) if md.version == cur.version => {
                if cur.edge != edge {
                    cur.edge = edge;
                    MetaOutcome::Rehomed
                } else {
                    MetaOutcome::Stale
                }
            }
            _ => {
                self.metadata.insert(
                    md.client,
                    StoredMeta {
                        version: md.version,
                        attrs: md.attrs.clone(),
                        edge,
                    },
                );
                MetaOutcome::Updated
            }
        }
    }

    pub fn remove_client(&mut self, c: ClientId) {
        self.metadata.remove(&c);
        self.firings.retain(|(_, t), _| *t != c);
        self.pub_rules.retain(|(_, t), _| *t != c);
    }

    /// The (policy, target) pairs a trigger makes worth re-evaluating.
    pub fn candidates(&self, trigger: Trigger) -> Vec<(MessageId, ClientId)> {
        match trigger {
            Trigger::PolicyInstalled(id) => match self.policies.get(&id) {
                Some(pol) => self
                    .metadata_clients(pol.target_role.client_role())
                    .into_iter()
                    .map(|c| (id, c))
                    .collect(),
                None => Vec::new(),
            },
            Trigger::PubPolicyInstalled(id) => {
                if self.pub_policies.contains_key(&id) {
                    self.metadata_clients(ClientRole::Producer)
                        .into_iter()
                        .map(|c| (id, c))
                        .collect()
                } else {
                    Vec::new()
                }
            }
            Trigger::MetadataUpdated(c) => {
                let mut out: Vec<(MessageId, ClientId)> = self
                    .policies
                    .values()
                    .filter(|p| p.target_role.client_role() == c.role)
                    .map(|p| (p.id, c))
                    .collect();
                if c.role == ClientRole::Producer {
                    out.extend(self.pub_policies.keys().map(|id| (*id, c)));
                }
                out.sort();
                out
            }
        }
    }

    /// Evaluates one (policy, target) pair and updates the firing ledger.
    /// `target_entries` is the hosting broker's view of the target's current
    /// advertisements and subscriptions.
    ///
    /// Fires at most once per (policy, target, metadata version). When the
    /// condition stops holding, the live generation is retracted by an
    /// empty firing order.
    pub fn consider(
        &mut self,
        policy: MessageId,
        target: ClientId,
        target_entries: &[Entry],
    ) -> Vec<EngineEffect> {
        let Some(md) = self.metadata.get(&target) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        if let Some(pol) = self.policies.get(&policy) {
            if pol.target_role.client_role() != target.role {
                return out;
            }
            let ok = evaluate_policy(pol, &md.attrs, target_entries.iter());
            let key = (policy, target);
            match (ok, self.firings.get(&key)) {
                (true, Some(rec)) if rec.md_version == md.version => {}
                (true, _) => {
                    let mut instructions = Vec::new();
                    for ins in &pol.actions {
                        match resolve_meta_refs(ins, &md.attrs) {
                            Ok(ins) => instructions.push(ins),
                            Err(e) => out.push(EngineEffect::Diagnostic(alloc::format!(
                                "policy {} target {}: {} skipped: {}",
                                policy,
                                target,
                                ins.keyword(),
                                e
                            ))),
                        }
                    }
                    let order = FireOrder {
                        policy,
                        target,
                        md_version: md.version,
                        instructions: instructions.clone(),
                        reinjection: false,
                    };
                    let edge = md.edge;
                    self.firings.insert(
                        key,
                        FiringRecord {
                            md_version: md.version,
                            instructions,
                        },
                    );
                    out.push(EngineEffect::Fire { order, edge });
                }
                (false, Some(rec)) => {
                    let order = FireOrder {
                        policy,
                        target,
                        md_version: rec.md_version,
                        instructions: Vec::new(),
                        reinjection: false,
                    };
                    let edge = md.edge;
                    self.firings.remove(&key);
                    out.push(EngineEffect::Fire { order, edge });
                }
                (false, None) => {}
            }
            return out;
        }
        if let Some(pp) = self.pub_policies.get(&policy) {
            if target.role != ClientRole::Producer {
                return out;
            }
            let ok = reverse_match(&pp.meta_condition, &md.attrs);
            let key = (policy, target);
            match (ok, self.pub_rules.get(&key)) {
                (true, Some(rec)) if rec.md_version == md.version => {}
                (true, _) => {
                    let mut sets = Vec::new();
                    for (attr, tv) in &pp.transform {
                        match resolve_value(tv, &md.attrs, None) {
                            Ok(v) => sets.push((attr.clone(), v)),
                            Err(e) => out.push(EngineEffect::Diagnostic(alloc::format!(
                                "publication policy {} producer {}: set {} skipped: {}",
                                policy,
                                target,
                                attr,
                                e
                            ))),
                        }
                    }
                    let rec = PubRuleRecord {
                        md_version: md.version,
                        content: pp.content_condition.clone(),
                        sets: sets.clone(),
                    };
                    let rule = PubRule {
                        policy,
                        producer: target,
                        md_version: md.version,
                        content: pp.content_condition.clone(),
                        sets,
                    };
                    let edge = md.edge;
                    self.pub_rules.insert(key, rec);
                    out.push(EngineEffect::InstallPubRule { rule, edge });
                }
                (false, Some(_)) => {
                    let edge = md.edge;
                    self.pub_rules.remove(&key);
                    out.push(EngineEffect::RetractPubRule {
                        policy,
                        producer: target,
                        edge,
                    });
                }
                (false, None) => {}
            }
        }
        out
    }

    /// Re-emits every live firing and publication rule for a client that
    /// moved to a new edge broker, so the generated state follows it.
    pub fn rehome_effects(&self, target: ClientId) -> Vec<EngineEffect> {
        let Some(md) = self.metadata.get(&target) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for ((policy, t), rec) in &self.firings {
            if *t == target {
                out.push(EngineEffect::Fire {
                    order: FireOrder {
                        policy: *policy,
                        target,
                        md_version: rec.md_version,
                        instructions: rec.instructions.clone(),
                        reinjection: true,
                    },
                    edge: md.edge,
                });
            }
        }
        for ((policy, t), rec) in &self.pub_rules {
            if *t == target {
                out.push(EngineEffect::InstallPubRule {
                    rule: PubRule {
                        policy: *policy,
                        producer: target,
                        md_version: rec.md_version,
                        content: rec.content.clone(),
                        sets: rec.sets.clone(),
                    },
                    edge: md.edge,
                });
            }
        }
        out
    }
}

/// Substitutes `$meta` references in an instruction, leaving `$old`
/// references for per-entry resolution at the edge broker.
pub fn resolve_meta_refs(
    ins: &Instruction,
    md: &Publication,
) -> Result<Instruction, TemplateError> {
    let fix_tv = |tv: &TemplateValue| -> Result<TemplateValue, TemplateError> {
        match tv {
            TemplateValue::MetaRef { .. } => Ok(TemplateValue::Lit(resolve_value(tv, md, None)?)),
            other => Ok(other.clone()),
        }
    };
    let fix_tp = |tp: &TemplatePredicate| -> Result<TemplatePredicate, TemplateError> {
        Ok(TemplatePredicate {
            attribute: tp.attribute.clone(),
            op: tp.op,
            value: tp.value.as_ref().map(&fix_tv).transpose()?,
        })
    };
    let fix_tf = |tf: &TemplateFilter| -> Result<TemplateFilter, TemplateError> {
        Ok(TemplateFilter::new(
            tf.predicates
                .iter()
                .map(&fix_tp)
                .collect::<Result<Vec<_>, _>>()?,
        ))
    };
    Ok(match ins {
        Instruction::InsertAd(t) => Instruction::InsertAd(fix_tf(t)?),
        Instruction::InsertSub(t) => Instruction::InsertSub(fix_tf(t)?),
        Instruction::InsertUnad(t) => Instruction::InsertUnad(fix_tf(t)?),
        Instruction::InsertUnsub(t) => Instruction::InsertUnsub(fix_tf(t)?),
        Instruction::Modify { pattern, deltas } => Instruction::Modify {
            pattern: fix_tf(pattern)?,
            deltas: deltas
                .iter()
                .map(|d| {
                    Ok(match d {
                        ModifyDelta::AddPredicate(p) => ModifyDelta::AddPredicate(fix_tp(p)?),
                        ModifyDelta::SetPredicate(p) => ModifyDelta::SetPredicate(fix_tp(p)?),
                        ModifyDelta::DeletePredicate(a) => ModifyDelta::DeletePredicate(a.clone()),
                    })
                })
                .collect::<Result<Vec<_>, TemplateError>>()?,
        },
    })
}

// ---------------------------------------------------------------------------
// Policy text grammar
// ---------------------------------------------------------------------------

/// Parsed form of one policy file line (or wire payload).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyText {
    Policy(Policy),
    PubPolicy(PublicationPolicy),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyParseError(pub String);

impl fmt::Display for PolicyParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "policy parse error: {}", self.0)
    }
}

impl core::error::Error for PolicyParseError {}

fn perr(s: impl Into<String>) -> PolicyParseError {
    PolicyParseError(s.into())
}

struct Words<'a> {
    rest: &'a str,
}

impl<'a> Words<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.rest.split_whitespace().next()
    }

    fn next(&mut self) -> Option<&'a str> {
        let trimmed = self.rest.trim_start();
        let end = trimmed.find(char::is_whitespace).unwrap_or(trimmed.len());
        if end == 0 {
            return None;
        }
        self.rest = &trimmed[end..];
        Some(&trimmed[..end])
    }

    /// Consumes text up to (not including) any of the given keywords, or to
    /// the end of input.
    fn until(&mut self, keywords: &[&str]) -> &'a str {
        let trimmed = self.rest.trim_start();
        let mut cut = trimmed.len();
        for kw in keywords {
            let mut search = 0;
            while let Some(i) = trimmed[search..].find(kw) {
                let at = search + i;
                let before_ok = at == 0
                    || trimmed[..at]
                        .chars()
                        .next_back()
                        .is_some_and(char::is_whitespace);
                let after = &trimmed[at + kw.len()..];
                let after_ok = after.is_empty() || after.starts_with(char::is_whitespace);
                if before_ok && after_ok {
                    cut = cut.min(at);
                    break;
                }
                search = at + kw.len();
            }
        }
        self.rest = &trimmed[cut..];
        trimmed[..cut].trim()
    }
}

fn kv<'a>(w: &mut Words<'a>, key: &str) -> Result<&'a str, PolicyParseError> {
    let tok = w
        .next()
        .ok_or_else(|| perr(alloc::format!("expected {}=...", key)))?;
    tok.strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| perr(alloc::format!("expected {}=..., got `{}`", key, tok)))
}

/// Parses a template value: literal, `$ref`, `'$ref'`, with optional
/// `+n`/`-n` offset on references.
fn parse_template_value(s: &str) -> Result<TemplateValue, PolicyParseError> {
    let s = s.trim();
    let inner = if let Some(stripped) = s.strip_prefix('\'') {
        let stripped = stripped
            .strip_suffix('\'')
            .ok_or_else(|| perr("unterminated text"))?;
        if !stripped.starts_with('$') {
            return Ok(TemplateValue::Lit(Value::text(stripped)));
        }
        stripped
    } else {
        s
    };
    if let Some(ref_body) = inner.strip_prefix('$') {
        let (name, delta) = split_offset(ref_body)?;
        let delta = Number::new(delta).ok_or_else(|| perr("offset out of range"))?;
        if let Some(attr) = name.strip_prefix("old.") {
            if !valid_attribute(attr) {
                return Err(perr(alloc::format!("invalid attribute in `$old.{}`", attr)));
            }
            return Ok(TemplateValue::OldRef {
                attr: attr.to_string(),
                delta,
            });
        }
        if !valid_attribute(name) {
            return Err(perr(alloc::format!("invalid attribute in `${}`", name)));
        }
        return Ok(TemplateValue::MetaRef {
            attr: name.to_string(),
            delta,
        });
    }
    let n: f64 = inner
        .parse()
        .map_err(|_| perr(alloc::format!("invalid value `{}`", s)))?;
    Ok(TemplateValue::Lit(
        Value::number(n).ok_or_else(|| perr("number out of range"))?,
    ))
}

fn split_offset(s: &str) -> Result<(&str, f64), PolicyParseError> {
    // The attribute grammar excludes '+' and '-', so the first occurrence
    // after position 0 starts the offset.
    if let Some(i) = s[1..].find(['+', '-']).map(|i| i + 1) {
        let (name, off) = s.split_at(i);
        let delta: f64 = off
            .parse()
            .map_err(|_| perr(alloc::format!("invalid offset `{}`", off)))?;
        Ok((name, delta))
    } else {
        Ok((s, 0.0))
    }
}

/// Parses `[attr,op,tvalue]` groups with optional comma separators.
pub fn parse_template_filter(text: &str) -> Result<TemplateFilter, PolicyParseError> {
    let mut preds = Vec::new();
    let mut rest = text.trim();
    if rest.is_empty() {
        return Err(perr("expected at least one [attr,op,value] group"));
    }
    while !rest.is_empty() {
        let rest2 = rest
            .strip_prefix('[')
            .ok_or_else(|| perr(alloc::format!("expected `[` at `{}`", rest)))?;
        let close = find_group_end(rest2).ok_or_else(|| perr("unterminated `[` group"))?;
        let body = &rest2[..close];
        preds.push(parse_template_group(body)?);
        rest = rest2[close + 1..].trim_start();
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
            if rest.is_empty() {
                return Err(perr("trailing comma"));
            }
        }
    }
    Ok(TemplateFilter::new(preds))
}

/// Finds the `]` closing a group, skipping quoted text.
fn find_group_end(s: &str) -> Option<usize> {
    let mut in_quote = false;
    for (i, c) in s.char_indices() {
        match c {
            '\'' => in_quote = !in_quote,
            ']' if !in_quote => return Some(i),
            _ => {}
        }
    }
    None
}

/// Splits a group body on commas outside quotes.
fn split_group(body: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut start = 0;
    let mut in_quote = false;
    for (i, c) in body.char_indices() {
        match c {
            '\'' => in_quote = !in_quote,
            ',' if !in_quote => {
                parts.push(body[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(body[start..].trim());
    parts
}

fn parse_template_group(body: &str) -> Result<TemplatePredicate, PolicyParseError> {
    let parts = split_group(body);
    let (attr, op, value) = match parts.as_slice() {
        [attr, op] => (*attr, *op, None),
        [attr, op, value] => (*attr, *op, Some(*value)),
        _ => return Err(perr(alloc::format!("malformed group `[{}]`", body))),
    };
    if !valid_attribute(attr) {
        return Err(perr(alloc::format!("invalid attribute `{}`", attr)));
    }
    let op = match op {
        "=" => Op::Eq,
        "!=" => Op::Ne,
        "<" => Op::Lt,
        "<=" => Op::Le,
        ">" => Op::Gt,
        ">=" => Op::Ge,
        "present" => Op::Present,
        other => return Err(perr(alloc::format!("unknown operator `{}`", other))),
    };
    match (op, value) {
        (Op::Present, None) => Ok(TemplatePredicate {
            attribute: attr.to_string(),
            op,
            value: None,
        }),
        (Op::Present, Some(_)) => Err(perr("`present` takes no value")),
        (_, None) => Err(perr(alloc::format!(
            "operator `{}` requires a value",
            op.symbol()
        ))),
        (_, Some(v)) => {
            let tv = parse_template_value(v)?;
            if op.is_ordering() {
                if let TemplateValue::Lit(Value::Text(_)) = tv {
                    return Err(perr("ordering operator requires a number value"));
                }
            }
            Ok(TemplatePredicate {
                attribute: attr.to_string(),
                op,
                value: Some(tv),
            })
        }
    }
}

const INSTRUCTION_KEYWORDS: &[&str] = &[
    "insert_ad",
    "insert_sub",
    "insert_unad",
    "insert_unsub",
    "modify",
    "add",
    "del",
    "set",
    ";",
];

fn parse_instruction(w: &mut Words<'_>) -> Result<Instruction, PolicyParseError> {
    let kw = w.next().ok_or_else(|| perr("expected instruction"))?;
    let stop = &[";"];
    match kw {
        "insert_ad" => Ok(Instruction::InsertAd(parse_template_filter(w.until(stop))?)),
        "insert_sub" => Ok(Instruction::InsertSub(parse_template_filter(
            w.until(stop),
        )?)),
        "insert_unad" => Ok(Instruction::InsertUnad(parse_template_filter(
            w.until(stop),
        )?)),
        "insert_unsub" => Ok(Instruction::InsertUnsub(parse_template_filter(
            w.until(stop),
        )?)),
        "modify" => {
            let pattern = parse_template_filter(w.until(&["add", "del", "set", ";"]))?;
            let mut deltas = Vec::new();
            loop {
                match w.peek() {
                    Some("add") => {
                        w.next();
                        let tf = parse_template_filter(w.until(INSTRUCTION_KEYWORDS))?;
                        deltas.extend(tf.predicates.into_iter().map(ModifyDelta::AddPredicate));
                    }
                    Some("set") => {
                        w.next();
                        let tf = parse_template_filter(w.until(INSTRUCTION_KEYWORDS))?;
                        deltas.extend(tf.predicates.into_iter().map(ModifyDelta::SetPredicate));
                    }
                    Some("del") => {
                        w.next();
                        let attr = w.next().ok_or_else(|| perr("del requires an attribute"))?;
                        if !valid_attribute(attr) {
                            return Err(perr(alloc::format!("invalid attribute `{}`", attr)));
                        }
                        deltas.push(ModifyDelta::DeletePredicate(attr.to_string()));
                    }
                    _ => break,
                }
            }
            if deltas.is_empty() {
                return Err(perr("modify requires at least one add/del/set"));
            }
            Ok(Instruction::Modify { pattern, deltas })
        }
        other => Err(perr(alloc::format!("unknown instruction `{}`", other))),
    }
}

/// Parses a `;`-separated instruction list (the `DO` clause body).
pub fn parse_instruction_list(text: &str) -> Result<Vec<Instruction>, PolicyParseError> {
    let mut w = Words { rest: text.trim() };
    let mut out = Vec::new();
    loop {
        out.push(parse_instruction(&mut w)?);
        match w.peek() {
            Some(";") => {
                w.next();
            }
            None => break,
            Some(other) => return Err(perr(alloc::format!("expected `;`, got `{}`", other))),
        }
    }
    Ok(out)
}

/// Canonical text for an instruction list.
pub fn format_instruction_list(list: &[Instruction]) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    for (i, ins) in list.iter().enumerate() {
        if i > 0 {
            let _ = write!(s, " ; ");
        }
        let _ = write!(s, "{}", ins);
    }
    s
}

/// Parses the `POLICY ...` / `PUBPOLICY ...` grammar.
pub fn parse_policy(text: &str) -> Result<PolicyText, PolicyParseError> {
    let mut w = Words { rest: text.trim() };
    match w.next() {
        Some("POLICY") => {
            let seq: u64 = kv(&mut w, "id")?
                .parse()
                .map_err(|_| perr("id must be an integer"))?;
            let owner = crate::model::NodeId::parse(kv(&mut w, "owner")?)
                .and_then(|n| n.as_client())
                .ok_or_else(|| perr("owner must be a client id"))?;
            let target_role = match kv(&mut w, "target")? {
                "producer" => TargetRole::Producer,
                "consumer" => TargetRole::Consumer,
                other => return Err(perr(alloc::format!("unknown target `{}`", other))),
            };
            if w.next() != Some("WHEN") {
                return Err(perr("expected WHEN"));
            }
            let cond_text = w.until(&["STATE", "DO"]);
            let meta_condition =
                parse_filter(cond_text).map_err(|e| perr(alloc::format!("WHEN: {}", e)))?;
            let mut state_conditions = Vec::new();
            while w.peek() == Some("STATE") {
                w.next();
                let body = w.until(&["STATE", "DO"]);
                let (kind, rest) = if let Some(r) = body.strip_prefix("has_sub(") {
                    (StateConditionKind::HasSub, r)
                } else if let Some(r) = body.strip_prefix("has_ad(") {
                    (StateConditionKind::HasAd, r)
                } else if let Some(r) = body.strip_prefix("lacks_sub(") {
                    (StateConditionKind::LacksSub, r)
                } else if let Some(r) = body.strip_prefix("lacks_ad(") {
                    (StateConditionKind::LacksAd, r)
                } else {
                    return Err(perr(alloc::format!("unknown state condition `{}`", body)));
                };
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| perr("state condition missing `)`"))?;
                let pattern =
                    parse_filter(inner).map_err(|e| perr(alloc::format!("STATE: {}", e)))?;
                state_conditions.push(StateCondition { kind, pattern });
            }
            if w.next() != Some("DO") {
                return Err(perr("expected DO"));
            }
            let mut actions = Vec::new();
            loop {
                actions.push(parse_instruction(&mut w)?);
                match w.peek() {
                    Some(";") => {
                        w.next();
                    }
                    None => break,
                    Some(other) => {
                        return Err(perr(alloc::format!("expected `;`, got `{}`", other)))
                    }
                }
            }
            let pol = Policy {
                id: MessageId::new(owner, seq),
                owner,
                target_role,
                meta_condition,
                state_conditions,
                actions,
            };
            pol.validate().map_err(|e| perr(e.to_string()))?;
            Ok(PolicyText::Policy(pol))
        }
        Some("PUBPOLICY") => {
            let seq: u64 = kv(&mut w, "id")?
                .parse()
                .map_err(|_| perr("id must be an integer"))?;
            let owner = crate::model::NodeId::parse(kv(&mut w, "owner")?)
                .and_then(|n| n.as_client())
                .ok_or_else(|| perr("owner must be a client id"))?;
            if owner.role != ClientRole::Advertiser {
                return Err(perr("publication policies are owned by advertisers"));
            }
            if w.next() != Some("WHEN") {
                return Err(perr("expected WHEN"));
            }
            let meta_condition =
                parse_filter(w.until(&["IF"])).map_err(|e| perr(alloc::format!("WHEN: {}", e)))?;
            if w.next() != Some("IF") {
                return Err(perr("expected IF"));
            }
            let content_condition =
                parse_filter(w.until(&["SET"])).map_err(|e| perr(alloc::format!("IF: {}", e)))?;
            if w.next() != Some("SET") {
                return Err(perr("expected SET"));
            }
            let groups = parse_set_groups(w.until(&[]))?;
            let pol = PublicationPolicy {
                id: MessageId::new(owner, seq),
                owner,
                meta_condition,
                content_condition,
                transform: groups,
            };
            Ok(PolicyText::PubPolicy(pol))
        }
        other => Err(perr(alloc::format!(
            "expected POLICY or PUBPOLICY, got `{:?}`",
            other
        ))),
    }
}

fn parse_set_groups(text: &str) -> Result<Vec<(String, TemplateValue)>, PolicyParseError> {
    let mut out = Vec::new();
    let mut rest = text.trim();
    if rest.is_empty() {
        return Err(perr("SET requires at least one [attr,value] group"));
    }
    while !rest.is_empty() {
        let rest2 = rest
            .strip_prefix('[')
            .ok_or_else(|| perr(alloc::format!("expected `[` at `{}`", rest)))?;
        let close = find_group_end(rest2).ok_or_else(|| perr("unterminated `[` group"))?;
        let parts = split_group(&rest2[..close]);
        let [attr, value] = parts.as_slice() else {
            return Err(perr(alloc::format!(
                "malformed set group `[{}]`",
                &rest2[..close]
            )));
        };
        if !valid_attribute(attr) {
            return Err(perr(alloc::format!("invalid attribute `{}`", attr)));
        }
        out.push((attr.to_string(), parse_template_value(value)?));
        rest = rest2[close + 1..].trim_start();
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
        }
    }
    Ok(out)
}

/// Canonical text for a policy; `parse_policy(format_policy(p))` re-reads it.
pub fn format_policy(p: &PolicyText) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    match p {
        PolicyText::Policy(pol) => {
            let _ = write!(
                s,
                "POLICY id={} owner={} target={} WHEN {}",
                pol.id.seq,
                pol.owner,
                pol.target_role.label(),
                pol.meta_condition
            );
            for sc in &pol.state_conditions {
                let _ = write!(s, " STATE {}({})", sc.kind.label(), sc.pattern);
            }
            let _ = write!(s, " DO ");
            for (i, ins) in pol.actions.iter().enumerate() {
                if i > 0 {
                    let _ = write!(s, " ; ");
                }
                let _ = write!(s, "{}", ins);
            }
        }
        PolicyText::PubPolicy(pol) => {
            let _ = write!(
                s,
                "PUBPOLICY id={} owner={} WHEN {} IF {} SET ",
                pol.id.seq, pol.owner, pol.meta_condition, pol.content_condition
            );
            for (i, (attr, tv)) in pol.transform.iter().enumerate() {
                if i > 0 {
                    let _ = write!(s, ",");
                }
                let _ = write!(s, "[{},{}]", attr, tv);
            }
        }
    }
    s
}
