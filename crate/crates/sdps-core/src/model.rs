//! Value types, the predicate/filter algebra, publication records, and the
//! canonical textual grammar shared by every other module.
//!
//! The grammar is the normative external representation used in scenario
//! files, on the wire, and in CLI arguments:
//!
//! ```text
//! filter       := group (','? group)*
//! group        := '[' attr ',' op (',' value)? ']'
//! op           := '=' | '!=' | '<' | '<=' | '>' | '>=' | 'present'
//! publication  := pair (','? pair)*
//! pair         := '[' attr ',' value ']'
//! attr         := [A-Za-z_][A-Za-z0-9_.]*
//! value        := number | '\'' text '\''
//! ```
//!
//! Text values carry no escape mechanism: a quote, newline, or carriage
//! return cannot appear inside one. Numbers are finite f64 values printed in
//! shortest round-trip decimal form, so `parse(format(x)) == x` exactly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

// ---------------------------------------------------------------------------
// Values
// ---------------------------------------------------------------------------

/// A finite f64. NaN and infinities are unrepresentable; negative zero is
/// normalized to zero so that equal numbers format identically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Number(f64);

impl Number {
    pub fn new(v: f64) -> Option<Number> {
        if v.is_finite() {
            Some(Number(if v == 0.0 { 0.0 } else { v }))
        } else {
            None
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Eq for Number {}

impl Ord for Number {
    fn cmp(&self, other: &Self) -> Ordering {
        // Finite by construction, so partial_cmp never fails.
        self.0.partial_cmp(&other.0).unwrap()
    }
}

impl PartialOrd for Number {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An attribute value: text or a finite number. The kinds are distinct and
/// never coerce into one another.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Value {
    Number(Number),
    Text(String),
}

impl Value {
    pub fn number(v: f64) -> Option<Value> {
        Number::new(v).map(Value::Number)
    }

    pub fn text(s: impl Into<String>) -> Value {
        Value::Text(s.into())
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(n.get()),
            Value::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(t) => Some(t),
            Value::Number(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(n) => write!(f, "{}", n),
            Value::Text(t) => write!(f, "'{}'", t),
        }
    }
}

// ---------------------------------------------------------------------------
// Predicates and filters
// ---------------------------------------------------------------------------

/// Comparison operator of a predicate. `Present` tests attribute existence
/// and carries no value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Present,
}

impl Op {
    pub fn is_ordering(self) -> bool {
        matches!(self, Op::Lt | Op::Le | Op::Gt | Op::Ge)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Eq => "=",
            Op::Ne => "!=",
            Op::Lt => "<",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Ge => ">=",
            Op::Present => "present",
        }
    }
}

pub fn valid_attribute(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// A single typed constraint on one attribute.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Predicate {
    attribute: String,
    op: Op,
    value: Option<Value>,
}

/// Reason a predicate or parse was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelError {
    BadAttribute(String),
    MissingValue,
    UnexpectedValue,
    OrderingOpWithText,
    Parse { pos: usize, what: String },
    DuplicateAttribute(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::BadAttribute(a) => write!(f, "invalid attribute name `{}`", a),
            ModelError::MissingValue => write!(f, "operator requires a value"),
            ModelError::UnexpectedValue => write!(f, "`present` takes no value"),
            ModelError::OrderingOpWithText => {
                write!(f, "ordering operator requires a number value")
            }
            ModelError::Parse { pos, what } => write!(f, "parse error at byte {}: {}", pos, what),
            ModelError::DuplicateAttribute(a) => write!(f, "duplicate attribute `{}`", a),
        }
    }
}

impl core::error::Error for ModelError {}

impl Predicate {
    pub fn new(
        attribute: impl Into<String>,
        op: Op,
        value: Option<Value>,
    ) -> Result<Predicate, ModelError> {
        let attribute = attribute.into();
        if !valid_attribute(&attribute) {
            return Err(ModelError::BadAttribute(attribute));
        }
        match (op, &value) {
            (Op::Present, Some(_)) => return Err(ModelError::UnexpectedValue),
            (Op::Present, None) => {}
            (_, None) => return Err(ModelError::MissingValue),
            (op, Some(Value::Text(_))) if op.is_ordering() => {
                return Err(ModelError::OrderingOpWithText)
            }
            _ => {}
        }
        Ok(Predicate {
            attribute,
            op,
            value,
        })
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn op(&self) -> Op {
        self.op
    }

    pub fn value(&self) -> Option<&Value> {
        self.value.as_ref()
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.value {
            Some(v) => write!(f, "[{},{},{}]", self.attribute, self.op.symbol(), v),
            None => write!(f, "[{},{}]", self.attribute, self.op.symbol()),
        }
    }
}

/// A conjunctive list of predicates in canonical form: sorted by
/// (attribute, op, value) with duplicates removed. Contradictory predicates
/// are legal; such a filter simply never matches.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Filter {
    predicates: Vec<Predicate>,
}

impl Filter {
    /// Canonicalizes: sorts and removes exact duplicates. Idempotent.
    pub fn new(mut predicates: Vec<Predicate>) -> Filter {
        predicates.sort();
        predicates.dedup();
        Filter { predicates }
    }

    pub fn empty() -> Filter {
        Filter::default()
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn is_empty(&self) -> bool {
        self.predicates.is_empty()
    }

    /// Attributes constrained by this filter, deduplicated.
    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        let mut seen = BTreeSet::new();
        self.predicates
            .iter()
            .filter(move |p| seen.insert(p.attribute.clone()))
            .map(|p| p.attribute.as_str())
    }
}

impl fmt::Display for Filter {
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

/// A flat attribute-to-value record; at most one value per attribute.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Publication {
    attrs: BTreeMap<String, Value>,
}

impl Publication {
    pub fn new() -> Publication {
        Publication::default()
    }

    pub fn from_pairs(pairs: Vec<(String, Value)>) -> Result<Publication, ModelError> {
        let mut attrs = BTreeMap::new();
        for (k, v) in pairs {
            if !valid_attribute(&k) {
                return Err(ModelError::BadAttribute(k));
            }
            if attrs.insert(k.clone(), v).is_some() {
                return Err(ModelError::DuplicateAttribute(k));
            }
        }
        Ok(Publication { attrs })
    }

    pub fn get(&self, attr: &str) -> Option<&Value> {
        self.attrs.get(attr)
    }

    /// Inserts or overwrites one attribute.
    pub fn set(&mut self, attr: impl Into<String>, value: Value) {
        self.attrs.insert(attr.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.attrs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    /// The filter requiring exact equality on every attribute of this record.
    pub fn as_exact_filter(&self) -> Filter {
        Filter::new(
            self.attrs
                .iter()
                .map(|(k, v)| Predicate {
                    attribute: k.clone(),
                    op: Op::Eq,
                    value: Some(v.clone()),
                })
                .collect(),
        )
    }
}

impl fmt::Display for Publication {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.attrs.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "[{},{}]", k, v)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

/// Evaluates one predicate against an attribute value (or its absence).
///
/// `present` holds iff the value exists. Every other operator is false on an
/// absent value. A kind mismatch (number operator against a text value or
/// vice versa) evaluates to false rather than erroring, so publications from
/// heterogeneous producers cannot poison matching.
pub fn eval_predicate(p: &Predicate, v: Option<&Value>) -> bool {
    let v = match (p.op, v) {
        (Op::Present, got) => return got.is_some(),
        (_, None) => return false,
        (_, Some(v)) => v,
    };
    let want = p.value.as_ref().expect("non-present op carries a value");
    match (want, v) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.get(), b.get());
            match p.op {
                Op::Eq => b == a,
                Op::Ne => b != a,
                Op::Lt => b < a,
                Op::Le => b <= a,
                Op::Gt => b > a,
                Op::Ge => b >= a,
                Op::Present => unreachable!(),
            }
        }
        (Value::Text(a), Value::Text(b)) => match p.op {
            Op::Eq => b == a,
            Op::Ne => b != a,
            // Unconstructible via Predicate::new; defined as false.
            _ => false,
        },
        _ => false,
    }
}

/// True iff every predicate of `f` holds against `p`.
pub fn match_filter(f: &Filter, p: &Publication) -> bool {
    f.predicates
        .iter()
        .all(|pred| eval_predicate(pred, p.get(&pred.attribute)))
}

/// True iff some publication could satisfy both filters at once.
///
/// Per attribute constrained by either filter, the combined predicate set
/// must admit a single satisfying value. Numeric constraints reduce to an
/// interval plus excluded points; text constraints require all `=` to agree
/// on a value not ruled out by `!=`. A predicate set mixing number-valued
/// and text-valued constraints on one attribute is unsatisfiable because a
/// value has exactly one kind.
pub fn filters_intersect(a: &Filter, b: &Filter) -> bool {
    let mut attrs: BTreeSet<&str> = BTreeSet::new();
    attrs.extend(a.attributes());
    attrs.extend(b.attributes());
    attrs.iter().all(|attr| {
        let preds = a
            .predicates
            .iter()
            .chain(b.predicates.iter())
            .filter(|p| p.attribute == **attr);
        satisfiable(preds)
    })
}

/// Lower or upper interval endpoint; `strict` excludes the endpoint itself.
#[derive(Clone, Copy)]
struct Bound {
    at: f64,
    strict: bool,
}

fn satisfiable<'a>(preds: impl Iterator<Item = &'a Predicate>) -> bool {
    let mut num_eq: Option<f64> = None;
    let mut num_ne: Vec<f64> = Vec::new();
    let mut lower: Option<Bound> = None;
    let mut upper: Option<Bound> = None;
    let mut text_eq: Option<&'a str> = None;
    let mut text_ne: Vec<&'a str> = Vec::new();
    let mut saw_number = false;
    let mut saw_text = false;

    for p in preds {
        match (p.op, p.value.as_ref()) {
            (Op::Present, _) => {}
            (op, Some(Value::Number(n))) => {
                saw_number = true;
                let n = n.get();
                match op {
                    Op::Eq => match num_eq {
                        Some(prev) if prev != n => return false,
                        _ => num_eq = Some(n),
                    },
                    Op::Ne => num_ne.push(n),
                    Op::Gt | Op::Ge => {
                        let b = Bound {
                            at: n,
                            strict: op == Op::Gt,
                        };
                        lower = Some(match lower {
                            Some(cur) if tighter_lower(cur, b) => cur,
                            _ => b,
                        });
                    }
                    Op::Lt | Op::Le => {
                        let b = Bound {
                            at: n,
                            strict: op == Op::Lt,
                        };
                        upper = Some(match upper {
                            Some(cur) if tighter_upper(cur, b) => cur,
                            _ => b,
                        });
                    }
                    Op::Present => unreachable!(),
                }
            }
            (op, Some(Value::Text(t))) => {
                saw_text = true;
                match op {
                    Op::Eq => match text_eq {
                        Some(prev) if prev != t.as_str() => return false,
                        _ => text_eq = Some(t),
                    },
                    Op::Ne => text_ne.push(t),
                    // Ordering on text is unconstructible and never satisfiable.
                    _ => return false,
                }
            }
            (_, None) => unreachable!("non-present op carries a value"),
        }
    }

    if saw_number && saw_text {
        return false;
    }
    if saw_text {
        return match text_eq {
            Some(t) => !text_ne.contains(&t),
            // Infinitely many strings; finitely many exclusions.
            None => true,
        };
    }
    if !saw_number {
        // Only `present`: any value works.
        return true;
    }
    if let Some(v) = num_eq {
        return in_bounds(v, lower, upper) && !num_ne.contains(&v);
    }
    match (lower, upper) {
        (Some(lo), Some(hi)) => {
            if lo.at > hi.at {
                false
            } else if lo.at < hi.at {
                // Non-degenerate real interval; finitely many excluded points
                // cannot empty it.
                true
            } else {
                !lo.strict && !hi.strict && !num_ne.contains(&lo.at)
            }
        }
        // Half-line or full line: always non-empty after point exclusions.
        _ => true,
    }
}

fn tighter_lower(a: Bound, b: Bound) -> bool {
    a.at > b.at || (a.at == b.at && a.strict && !b.strict)
}

fn tighter_upper(a: Bound, b: Bound) -> bool {
    a.at < b.at || (a.at == b.at && a.strict && !b.strict)
}

fn in_bounds(v: f64, lower: Option<Bound>, upper: Option<Bound>) -> bool {
    if let Some(lo) = lower {
        if v < lo.at || (v == lo.at && lo.strict) {
            return false;
        }
    }
    if let Some(hi) = upper {
        if v > hi.at || (v == hi.at && hi.strict) {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(src: &'a str) -> Scanner<'a> {
        Scanner { src, pos: 0 }
    }

    fn err(&self, what: impl Into<String>) -> ModelError {
        ModelError::Parse {
            pos: self.pos,
            what: what.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start_matches([' ', '\t']);
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, c: char) -> bool {
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ModelError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(alloc::format!("expected `{}`", c)))
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos == self.src.len()
    }

    fn ident(&mut self) -> Result<&'a str, ModelError> {
        self.skip_ws();
        let rest = self.rest();
        let end = rest
            .char_indices()
            .find(|(i, c)| {
                if *i == 0 {
                    !(c.is_ascii_alphabetic() || *c == '_')
                } else {
                    !(c.is_ascii_alphanumeric() || *c == '_' || *c == '.')
                }
            })
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        if end == 0 {
            return Err(self.err("expected attribute name"));
        }
        self.pos += end;
        Ok(&rest[..end])
    }

    fn op(&mut self) -> Result<Op, ModelError> {
        self.skip_ws();
        let rest = self.rest();
        let table: [(&str, Op); 7] = [
            ("present", Op::Present),
            ("!=", Op::Ne),
            ("<=", Op::Le),
            (">=", Op::Ge),
            ("<", Op::Lt),
            (">", Op::Gt),
            ("=", Op::Eq),
        ];
        for (sym, op) in table {
            if rest.starts_with(sym) {
                self.pos += sym.len();
                return Ok(op);
            }
        }
        Err(self.err("expected operator"))
    }

    fn value(&mut self) -> Result<Value, ModelError> {
        self.skip_ws();
        if self.eat('\'') {
            let rest = self.rest();
            let end = match rest.find(['\'', '\n', '\r']) {
                Some(i) if rest.as_bytes()[i] == b'\'' => i,
                _ => return Err(self.err("unterminated text value")),
            };
            let text = &rest[..end];
            self.pos += end + 1;
            return Ok(Value::Text(text.to_string()));
        }
        let rest = self.rest();
        let end = rest
            .find(|c: char| !(c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E')))
            .unwrap_or(rest.len());
        if end == 0 {
            return Err(self.err("expected value"));
        }
        let raw = &rest[..end];
        let parsed: f64 = raw
            .parse()
            .map_err(|_| self.err(alloc::format!("invalid number `{}`", raw)))?;
        let n = Number::new(parsed).ok_or_else(|| self.err("number out of range"))?;
        self.pos += end;
        Ok(Value::Number(n))
    }
}

/// Parses the filter grammar into canonical form.
pub fn parse_filter(text: &str) -> Result<Filter, ModelError> {
    let mut s = Scanner::new(text);
    let mut preds = Vec::new();
    loop {
        s.skip_ws();
        s.expect('[')?;
        let attr = s.ident()?.to_string();
        s.skip_ws();
        s.expect(',')?;
        let op = s.op()?;
        let value = if op == Op::Present {
            None
        } else {
            s.skip_ws();
            s.expect(',')?;
            Some(s.value()?)
        };
        s.skip_ws();
        s.expect(']')?;
        let at = s.pos;
        preds.push(Predicate::new(attr, op, value).map_err(|e| match e {
            ModelError::Parse { .. } => e,
            other => ModelError::Parse {
                pos: at,
                what: other.to_string(),
            },
        })?);
        s.skip_ws();
        let had_comma = s.eat(',');
        if s.at_end() {
            if had_comma {
                return Err(s.err("trailing comma"));
            }
            break;
        }
    }
    Ok(Filter::new(preds))
}

/// Parses the publication grammar. At least one pair is required and
/// duplicate attributes are rejected.
pub fn parse_publication(text: &str) -> Result<Publication, ModelError> {
    let mut s = Scanner::new(text);
    let mut pairs = Vec::new();
    loop {
        s.skip_ws();
        s.expect('[')?;
        let attr = s.ident()?.to_string();
        s.skip_ws();
        s.expect(',')?;
        let value = s.value()?;
        s.skip_ws();
        s.expect(']')?;
        pairs.push((attr, value));
        s.skip_ws();
        let had_comma = s.eat(',');
        if s.at_end() {
            if had_comma {
                return Err(s.err("trailing comma"));
            }
            break;
        }
    }
    Publication::from_pairs(pairs)
}

/// Canonical text for a filter; `parse_filter(format_filter(f)) == f`.
pub fn format_filter(f: &Filter) -> String {
    f.to_string()
}

/// Canonical text for a publication.
pub fn format_publication(p: &Publication) -> String {
    p.to_string()
}

// ---------------------------------------------------------------------------
// Node and message identifiers
// ---------------------------------------------------------------------------

/// Data/control role of a client node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClientRole {
    Producer,
    Consumer,
    Advertiser,
    InterestManager,
}

impl ClientRole {
    pub fn tag(self) -> char {
        match self {
            ClientRole::Producer => 'p',
            ClientRole::Consumer => 'c',
            ClientRole::Advertiser => 'a',
            ClientRole::InterestManager => 'm',
        }
    }
}

/// Broker identity: the integer part is unique system-wide and assigned only
/// by the controller's counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BrokerId(pub u64);

impl fmt::Display for BrokerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

/// Client identity: role tag plus the controller-assigned integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId {
    pub role: ClientRole,
    pub num: u64,
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.role.tag(), self.num)
    }
}

/// Any node in the system. The controller itself is addressable for the
/// wire protocol's `from` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Broker(BrokerId),
    Client(ClientId),
    Controller,
}

impl NodeId {
    pub fn num(&self) -> u64 {
        match self {
            NodeId::Broker(b) => b.0,
            NodeId::Client(c) => c.num,
            NodeId::Controller => 0,
        }
    }

    pub fn as_broker(&self) -> Option<BrokerId> {
        match self {
            NodeId::Broker(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_client(&self) -> Option<ClientId> {
        match self {
            NodeId::Client(c) => Some(*c),
            _ => None,
        }
    }

    /// Parses the textual form (`b3`, `p7`, `c2`, `a4`, `m9`, `ctl`).
    pub fn parse(s: &str) -> Option<NodeId> {
        if s == "ctl" {
            return Some(NodeId::Controller);
        }
        let mut chars = s.chars();
        let tag = chars.next()?;
        let num: u64 = chars.as_str().parse().ok()?;
        if num == 0 {
            return None;
        }
        Some(match tag {
            'b' => NodeId::Broker(BrokerId(num)),
            'p' => NodeId::Client(ClientId {
                role: ClientRole::Producer,
                num,
            }),
            'c' => NodeId::Client(ClientId {
                role: ClientRole::Consumer,
                num,
            }),
            'a' => NodeId::Client(ClientId {
                role: ClientRole::Advertiser,
                num,
            }),
            'm' => NodeId::Client(ClientId {
                role: ClientRole::InterestManager,
                num,
            }),
            _ => return None,
        })
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Broker(b) => write!(f, "{}", b),
            NodeId::Client(c) => write!(f, "{}", c),
            NodeId::Controller => write!(f, "ctl"),
        }
    }
}

impl From<BrokerId> for NodeId {
    fn from(b: BrokerId) -> NodeId {
        NodeId::Broker(b)
    }
}

impl From<ClientId> for NodeId {
    fn from(c: ClientId) -> NodeId {
        NodeId::Client(c)
    }
}

/// Unique message identity: issuing node plus its monotonic counter.
/// `(source, seq)` pairs never repeat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MessageId {
    pub source: NodeId,
    pub seq: u64,
}

impl MessageId {
    pub fn new(source: impl Into<NodeId>, seq: u64) -> MessageId {
        MessageId {
            source: source.into(),
            seq,
        }
    }

    /// Parses the `<source>:<seq>` form.
    pub fn parse(s: &str) -> Option<MessageId> {
        let (src, seq) = s.split_once(':')?;
        Some(MessageId {
            source: NodeId::parse(src)?,
            seq: seq.parse().ok()?,
        })
    }
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.source, self.seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(s: &str) -> Filter {
        parse_filter(s).unwrap()
    }

    fn p(s: &str) -> Publication {
        parse_publication(s).unwrap()
    }

    #[test]
    fn parse_filter_basic() {
        let filt = f("[topic,=,'stock'],[price,<,50]");
        assert_eq!(filt.predicates().len(), 2);
        let presence = f("[price,present]");
        assert_eq!(presence.predicates().len(), 1);
        assert_eq!(presence.predicates()[0].op(), Op::Present);
    }

    #[test]
    fn parse_filter_rejects_ordering_on_text() {
        let err = parse_filter("[price,<,'high']").unwrap_err();
        assert!(matches!(err, ModelError::Parse { .. }), "{err}");
        assert!(err.to_string().contains("ordering operator"));
    }

    #[test]
    fn parse_filter_accepts_contradictions() {
        let filt = f("[x,=,1],[x,=,2]");
        assert_eq!(filt.predicates().len(), 2);
        assert!(!match_filter(&filt, &p("[x,1]")));
    }

    #[test]
    fn parse_publication_basic() {
        let rec = p("[topic,'stock'],[price,35]");
        assert_eq!(rec.get("topic"), Some(&Value::text("stock")));
        assert_eq!(rec.get("price"), Some(&Value::number(35.0).unwrap()));
    }

    #[test]
    fn parse_publication_duplicate_attribute() {
        assert_eq!(
            parse_publication("[x,1],[x,2]").unwrap_err(),
            ModelError::DuplicateAttribute("x".into())
        );
    }

    #[test]
    fn parse_publication_empty_is_error() {
        assert!(matches!(
            parse_publication(""),
            Err(ModelError::Parse { .. })
        ));
        assert!(matches!(parse_filter(""), Err(ModelError::Parse { .. })));
    }

    #[test]
    fn parse_reports_position() {
        match parse_filter("[topic,=,'a'],[price,?]") {
            Err(ModelError::Parse { pos, .. }) => assert_eq!(pos, 21),
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn format_is_canonical() {
        let filt = f("[topic,=,'stock'],[price,<,50]");
        assert_eq!(format_filter(&filt), "[price,<,50],[topic,=,'stock']");
        assert_eq!(format_filter(&f("[price,<,50.0]")), "[price,<,50]");
        let rec = p("[topic,'stock'],[price,35]");
        assert_eq!(format_publication(&rec), "[price,35],[topic,'stock']");
    }

    #[test]
    fn canonicalization_dedups_and_is_idempotent() {
        let filt = f("[a,=,1],[a,=,1],[b,present]");
        assert_eq!(filt.predicates().len(), 2);
        let again = Filter::new(filt.predicates().to_vec());
        assert_eq!(again, filt);
    }

    #[test]
    fn whitespace_and_optional_commas() {
        assert_eq!(f("[a,=,1] [b,>,2]"), f("[a,=,1],[b,>,2]"));
        assert_eq!(f(" [ a , = , 1 ] "), f("[a,=,1]"));
        assert_eq!(p("[a,1] [b,'x']"), p("[a,1],[b,'x']"));
    }

    #[test]
    fn eval_predicate_rules() {
        let lt50 = Predicate::new("price", Op::Lt, Value::number(50.0)).unwrap();
        assert!(eval_predicate(&lt50, Some(&Value::number(35.0).unwrap())));
        assert!(!eval_predicate(&lt50, Some(&Value::text("high"))));
        assert!(!eval_predicate(&lt50, None));
        let present = Predicate::new("topic", Op::Present, None).unwrap();
        assert!(!eval_predicate(&present, None));
        assert!(eval_predicate(&present, Some(&Value::text("x"))));
        let ne = Predicate::new("x", Op::Ne, Value::number(5.0)).unwrap();
        assert!(
            !eval_predicate(&ne, Some(&Value::text("y"))),
            "kind mismatch is false even for !="
        );
        assert!(eval_predicate(&ne, Some(&Value::number(6.0).unwrap())));
    }

    #[test]
    fn match_filter_rules() {
        let filt = f("[topic,=,'stock'],[price,<,50]");
        assert!(match_filter(&filt, &p("[topic,'stock'],[price,35]")));
        assert!(!match_filter(&filt, &p("[topic,'bond'],[price,35]")));
        assert!(match_filter(&Filter::empty(), &p("[anything,1]")));
    }

    #[test]
    fn intersect_intervals() {
        assert!(filters_intersect(&f("[price,<,50]"), &f("[price,>,10]")));
        assert!(!filters_intersect(&f("[price,<,10]"), &f("[price,>,50]")));
        assert!(!filters_intersect(&f("[price,<,10]"), &f("[price,>,10]")));
        assert!(filters_intersect(&f("[price,<=,10]"), &f("[price,>=,10]")));
        assert!(!filters_intersect(
            &f("[price,<=,10],[price,>=,10]"),
            &f("[price,!=,10]")
        ));
    }

    #[test]
    fn intersect_text_and_kinds() {
        assert!(filters_intersect(&f("[t,=,'a']"), &f("[t,!=,'b']")));
        assert!(!filters_intersect(&f("[t,=,'a']"), &f("[t,!=,'a']")));
        assert!(!filters_intersect(&f("[t,=,'a']"), &f("[t,=,'b']")));
        assert!(
            !filters_intersect(&f("[t,=,'a']"), &f("[t,<,5]")),
            "kind conflict"
        );
        assert!(filters_intersect(&f("[t,present]"), &f("[t,=,'a']")));
        assert!(filters_intersect(&f("[t,!=,'a']"), &f("[t,!=,'b']")));
    }

    #[test]
    fn intersect_disjoint_attributes() {
        assert!(filters_intersect(&f("[a,=,1]"), &f("[b,=,2]")));
        // A self-contradictory filter can never share a publication.
        assert!(!filters_intersect(&f("[a,=,1],[a,=,2]"), &f("[b,present]")));
    }

    #[test]
    fn node_and_message_ids_round_trip() {
        for s in ["b3", "p7", "c2", "a4", "m9", "ctl"] {
            assert_eq!(NodeId::parse(s).unwrap().to_string(), s);
        }
        assert_eq!(NodeId::parse("x3"), None);
        assert_eq!(NodeId::parse("b0"), None, "ids are positive");
        let id = MessageId::parse("p7:3").unwrap();
        assert_eq!(id.to_string(), "p7:3");
    }

    #[test]
    fn negative_zero_normalizes() {
        let z = parse_publication("[x,-0]").unwrap();
        assert_eq!(format_publication(&z), "[x,0]");
    }
}
