//! Newline-delimited wire encoding: one message per line,
//!
//! ```text
//! v1 <TYPE> <id.source>:<id.seq> <from> [<to>] <payload>
//! ```
//!
//! Fields are space-separated; the optional `to` slot holds a bare node id
//! and every payload grammar starts with something that cannot be one
//! (a bracket, quote, keyword, or `key=` pair), so decoding is unambiguous.
//! Encoding is canonical and bit-exact: `decode(encode(m)) == m`.
//!
//! An empty filter is written `-` where a filter is expected.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;

use crate::matching::{Entry, EntryKind, Origin};
use crate::message::{
    BootstrapReply, BootstrapRequest, Command, Message, Mode, MsgKind, Payload, StatsSample,
};
use crate::model::{
    parse_filter, parse_publication, BrokerId, ClientId, ClientRole, Filter, MessageId, NodeId,
    Publication,
};
use crate::policy::{
    format_instruction_list, format_policy, parse_instruction_list, parse_policy, FireOrder,
    Metadata, PubRule,
};
use crate::routing::{Strategy, StrategyConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireError {
    VersionMismatch(String),
    Truncated,
    UnknownType(String),
    Bad { field: &'static str, text: String },
}

impl fmt::Display for WireError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireError::VersionMismatch(v) => write!(f, "unsupported protocol version `{}`", v),
            WireError::Truncated => write!(f, "truncated message"),
            WireError::UnknownType(t) => write!(f, "unknown message type `{}`", t),
            WireError::Bad { field, text } => write!(f, "bad {}: {}", field, text),
        }
    }
}

impl core::error::Error for WireError {}

fn bad(field: &'static str, text: impl fmt::Display) -> WireError {
    WireError::Bad {
        field,
        text: text.to_string(),
    }
}

fn type_tag(kind: MsgKind, payload: &Payload) -> &'static str {
    match payload {
        Payload::Advertise { .. } => "ADV",
        Payload::Subscribe { .. } => "SUB",
        Payload::Unadvertise { .. } => "UNADV",
        Payload::Unsubscribe { .. } => "UNSUB",
        Payload::Publish { .. } => "PUB",
        Payload::Deliver { .. } => "DLV",
        Payload::Feedback { .. } => "FBK",
        Payload::Metadata { .. } => "META",
        Payload::InstallPolicy { .. } => "POL",
        Payload::RemovePolicy { .. } => "UNPOL",
        Payload::Fire(_) => "FIRE",
        Payload::InstallPubRule(_) => "PRULE",
        Payload::RetractPubRule { .. } => "UNPRULE",
        Payload::Attach { .. } => "ATTACH",
        Payload::Detach { .. } => "DETACH",
        Payload::Depart { .. } => "DEPART",
        Payload::BootstrapRequest(_) => "BOOT",
        Payload::BootstrapReply(_) => "BOOTR",
        Payload::Heartbeat(_) => "HB",
        Payload::Hello { .. } => "HELLO",
        Payload::Command(_) => "CMD",
        Payload::Error { .. } => {
            let _ = kind;
            "ERR"
        }
    }
}

fn filter_text(f: &Filter) -> String {
    if f.is_empty() {
        "-".into()
    } else {
        f.to_string()
    }
}

fn parse_filter_wire(s: &str) -> Result<Filter, WireError> {
    if s.trim() == "-" {
        Ok(Filter::empty())
    } else {
        parse_filter(s).map_err(|e| bad("filter", e))
    }
}

fn role_label(r: ClientRole) -> &'static str {
    match r {
        ClientRole::Producer => "producer",
        ClientRole::Consumer => "consumer",
        ClientRole::Advertiser => "advertiser",
        ClientRole::InterestManager => "im",
    }
}

fn parse_role(s: &str) -> Result<ClientRole, WireError> {
    Ok(match s {
        "producer" => ClientRole::Producer,
        "consumer" => ClientRole::Consumer,
        "advertiser" => ClientRole::Advertiser,
        "im" => ClientRole::InterestManager,
        other => return Err(bad("role", other)),
    })
}

fn mode_text(m: Mode) -> String {
    match m {
        Mode::AdvertisementBased => "adv".into(),
        Mode::Rendezvous { relay } => format!("rzv:{}", relay),
        Mode::RendezvousRoot => "root".into(),
    }
}

fn parse_mode(s: &str) -> Result<Mode, WireError> {
    if s == "adv" {
        return Ok(Mode::AdvertisementBased);
    }
    if s == "root" {
        return Ok(Mode::RendezvousRoot);
    }
    if let Some(rest) = s.strip_prefix("rzv:") {
        let relay = parse_broker(rest)?;
        return Ok(Mode::Rendezvous { relay });
    }
    Err(bad("mode", s))
}

fn parse_node(s: &str) -> Result<NodeId, WireError> {
    NodeId::parse(s).ok_or_else(|| bad("node id", s))
}

fn parse_broker(s: &str) -> Result<BrokerId, WireError> {
    parse_node(s)?
        .as_broker()
        .ok_or_else(|| bad("broker id", s))
}

fn parse_client(s: &str) -> Result<ClientId, WireError> {
    parse_node(s)?
        .as_client()
        .ok_or_else(|| bad("client id", s))
}

fn parse_mid(s: &str) -> Result<MessageId, WireError> {
    MessageId::parse(s).ok_or_else(|| bad("message id", s))
}

/// Splits the next whitespace-delimited token off `rest`.
fn token<'a>(rest: &mut &'a str) -> Option<&'a str> {
    let trimmed = rest.trim_start();
    if trimmed.is_empty() {
        *rest = trimmed;
        return None;
    }
    let end = trimmed.find(' ').unwrap_or(trimmed.len());
    *rest = &trimmed[end..];
    Some(&trimmed[..end])
}

fn expect_token<'a>(rest: &mut &'a str) -> Result<&'a str, WireError> {
    token(rest).ok_or(WireError::Truncated)
}

/// Strips `key=` from the next token.
fn kv<'a>(rest: &mut &'a str, key: &'static str) -> Result<&'a str, WireError> {
    let tok = expect_token(rest)?;
    tok.strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| bad(key, tok))
}

fn opt_kv<'a>(rest: &mut &'a str, key: &str) -> Option<&'a str> {
    let probe = rest.trim_start();
    let tok = probe.split(' ').next()?;
    let val = tok.strip_prefix(key)?.strip_prefix('=')?;
    *rest = &probe[tok.len()..];
    Some(val)
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

/// Encodes a message as one newline-terminated line.
pub fn encode_message(m: &Message) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "v1 {} {} {}",
        type_tag(m.kind(), &m.payload),
        m.id,
        m.from
    );
    if let Some(to) = m.to {
        let _ = write!(s, " {}", to);
    }
    let _ = write!(s, " ");
    encode_payload(&mut s, &m.payload);
    s.push('\n');
    s
}

fn encode_payload(s: &mut String, p: &Payload) {
    match p {
        Payload::Advertise { entry, edge } | Payload::Subscribe { entry, edge } => {
            let _ = write!(s, "s={}", entry.source);
            if let Some(e) = edge {
                let _ = write!(s, " e={}", e);
            }
            if let Origin::PolicyGenerated { policy, target } = entry.origin {
                let _ = write!(s, " pol={} tgt={}", policy, target);
            }
            let _ = write!(s, " {}", filter_text(&entry.filter));
        }
        Payload::Unadvertise { target } | Payload::Unsubscribe { target } => {
            let _ = write!(s, "x={}", target);
        }
        Payload::Publish { publication } => {
            let _ = write!(s, "{}", publication);
        }
        Payload::Deliver {
            subscriber,
            matched,
            publication_id,
            publication,
        } => {
            let _ = write!(
                s,
                "s={} m={} p={} {}",
                subscriber, matched, publication_id, publication
            );
        }
        Payload::Feedback { publication } => {
            let _ = write!(s, "{}", publication);
        }
        Payload::Metadata { meta, edge } => {
            let _ = write!(s, "c={} v={}", meta.client, meta.version);
            if let Some(e) = edge {
                let _ = write!(s, " e={}", e);
            }
            let _ = write!(s, " {}", pub_text(&meta.attrs));
        }
        Payload::InstallPolicy { policy, edge } => {
            if let Some(e) = edge {
                let _ = write!(s, "e={} ", e);
            }
            let _ = write!(s, "{}", format_policy(policy));
        }
        Payload::RemovePolicy { target } => {
            let _ = write!(s, "x={}", target);
        }
        Payload::Fire(order) => {
            let _ = write!(
                s,
                "pol={} tgt={} v={}",
                order.policy, order.target, order.md_version
            );
            if order.reinjection {
                let _ = write!(s, " re");
            }
            if !order.instructions.is_empty() {
                let _ = write!(s, " DO {}", format_instruction_list(&order.instructions));
            }
        }
        Payload::InstallPubRule(rule) => {
            let _ = write!(
                s,
                "pol={} tgt={} v={} IF {} SET ",
                rule.policy,
                rule.producer,
                rule.md_version,
                filter_text(&rule.content)
            );
            for (i, (attr, v)) in rule.sets.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                let _ = write!(s, "[{},{}]", attr, v);
            }
            if rule.sets.is_empty() {
                let _ = write!(s, "-");
            }
        }
        Payload::RetractPubRule { policy, producer } => {
            let _ = write!(s, "pol={} tgt={}", policy, producer);
        }
        Payload::Attach { client, feedback } => {
            let _ = write!(s, "c={}", client);
            if *feedback {
                let _ = write!(s, " fb");
            }
        }
        Payload::Detach { client } | Payload::Depart { client } => {
            let _ = write!(s, "c={}", client);
        }
        Payload::BootstrapRequest(req) => match req {
            BootstrapRequest::Broker { addr } => {
                let _ = write!(s, "role=broker");
                if let Some(a) = addr {
                    let _ = write!(s, " addr='{}'", sanitize(a));
                }
            }
            BootstrapRequest::Client {
                role,
                existing,
                feedback,
            } => {
                let _ = write!(s, "role={}", role_label(*role));
                if let Some(c) = existing {
                    let _ = write!(s, " id={}", c);
                }
                if *feedback {
                    let _ = write!(s, " fb");
                }
            }
        },
        Payload::BootstrapReply(r) => {
            let _ = write!(s, "id={}", r.id);
            if let Some((b, addr)) = &r.edge {
                let _ = write!(s, " edge={}", b);
                if let Some(a) = addr {
                    let _ = write!(s, "@{}", sanitize(a));
                }
            }
            if !r.neighbors.is_empty() {
                let _ = write!(s, " nbr=");
                for (i, (b, addr)) in r.neighbors.iter().enumerate() {
                    if i > 0 {
                        s.push(',');
                    }
                    let _ = write!(s, "{}", b);
                    if let Some(a) = addr {
                        let _ = write!(s, "@{}", sanitize(a));
                    }
                }
            }
            let _ = write!(s, " mode={}", mode_text(r.mode));
            let _ = write!(s, " strat={}", r.strategy.strategy.label());
            if let Some(root) = r.strategy.rendezvous {
                let _ = write!(s, ":{}", root);
            }
            if !r.next_hops.is_empty() {
                let _ = write!(s, " hops=");
                for (i, (t, via)) in r.next_hops.iter().enumerate() {
                    if i > 0 {
                        s.push(',');
                    }
                    let _ = write!(s, "{}:{}", t, via);
                }
            }
            let _ = write!(s, " thb={} k={}", r.heartbeat_period, r.failure_multiplier);
        }
        Payload::Heartbeat(sample) => {
            let _ = write!(s, "stats ");
            if sample.processed.is_empty() {
                let _ = write!(s, "-");
            } else {
                for (i, (k, n)) in sample.processed.iter().enumerate() {
                    if i > 0 {
                        s.push(',');
                    }
                    let _ = write!(s, "{}={}", k.label(), n);
                }
            }
            let _ = write!(s, " entries ");
            if sample.client_entries.is_empty() {
                let _ = write!(s, "-");
            } else {
                for (i, (c, n)) in sample.client_entries.iter().enumerate() {
                    if i > 0 {
                        s.push(',');
                    }
                    let _ = write!(s, "{}={}", c, n);
                }
            }
        }
        Payload::Hello { addr } => {
            let _ = write!(s, "hi");
            if let Some(a) = addr {
                let _ = write!(s, " addr='{}'", sanitize(a));
            }
        }
        Payload::Command(cmd) => encode_command(s, cmd),
        Payload::Error { text } => {
            let _ = write!(s, "'{}'", sanitize(text));
        }
    }
}

fn encode_command(s: &mut String, cmd: &Command) {
    let _ = write!(s, "cmd={}", cmd.label());
    match cmd {
        Command::AddNeighbor(b, addr) => {
            let _ = write!(s, " b={}", b);
            if let Some(a) = addr {
                let _ = write!(s, " addr='{}'", sanitize(a));
            }
        }
        Command::RemoveNeighbor(b) => {
            let _ = write!(s, " b={}", b);
        }
        Command::InstallNextHops(map) => {
            let _ = write!(s, " map=");
            if map.is_empty() {
                let _ = write!(s, "-");
            } else {
                for (i, (t, via)) in map.iter().enumerate() {
                    if i > 0 {
                        s.push(',');
                    }
                    let _ = write!(s, "{}:{}", t, via);
                }
            }
        }
        Command::SetMode(mode) => {
            let _ = write!(s, " mode={}", mode_text(*mode));
        }
        Command::SetControlRendezvous(b) => {
            let _ = write!(s, " b={}", b);
        }
        Command::MigrateClients { clients, to } => {
            let _ = write!(s, " to={} clients=", to);
            for (i, c) in clients.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{}", c);
            }
        }
        Command::PurgeSources(clients) => {
            let _ = write!(s, " clients=");
            for (i, c) in clients.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{}", c);
            }
        }
        Command::ResendControl { to } | Command::Rehome { to } => {
            let _ = write!(s, " to={}", to);
        }
    }
}

fn pub_text(p: &Publication) -> String {
    if p.is_empty() {
        "-".into()
    } else {
        p.to_string()
    }
}

fn parse_pub_wire(s: &str) -> Result<Publication, WireError> {
    if s.trim() == "-" {
        Ok(Publication::new())
    } else {
        parse_publication(s).map_err(|e| bad("publication", e))
    }
}

/// Newlines and quotes cannot travel in a line-delimited quoted slot.
fn sanitize(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c == '\'' || c == '\n' || c == '\r' {
                '_'
            } else {
                c
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Decodes one line (the trailing newline is optional).
pub fn decode_message(line: &str) -> Result<Message, WireError> {
    let line = line.trim_end_matches(['\n', '\r']);
    let mut rest = line;
    let version = expect_token(&mut rest)?;
    if version != "v1" {
        return Err(WireError::VersionMismatch(version.into()));
    }
    let tag = expect_token(&mut rest)?;
    let id = parse_mid(expect_token(&mut rest)?)?;
    let from = parse_node(expect_token(&mut rest)?)?;
    // Optional `to`: a bare node id; no payload grammar starts with one.
    let mut to = None;
    {
        let probe = rest.trim_start();
        if let Some(tok) = probe.split(' ').next() {
            if !tok.is_empty() && !tok.contains('=') && !tok.contains(':') {
                if let Some(node) = NodeId::parse(tok) {
                    to = Some(node);
                    rest = &probe[tok.len()..];
                }
            }
        }
    }
    let payload = decode_payload(tag, id, &mut rest)?;
    Ok(Message {
        id,
        from,
        to,
        payload,
    })
}

fn decode_entry(
    kind: EntryKind,
    id: MessageId,
    rest: &mut &str,
) -> Result<(Entry, Option<BrokerId>), WireError> {
    let source = parse_client(kv(rest, "s")?)?;
    let edge = match opt_kv(rest, "e") {
        Some(v) => Some(parse_broker(v)?),
        None => None,
    };
    let origin = match opt_kv(rest, "pol") {
        Some(p) => {
            let policy = parse_mid(p)?;
            let target = parse_client(kv(rest, "tgt")?)?;
            Origin::PolicyGenerated { policy, target }
        }
        None => Origin::ClientIssued,
    };
    let filter = parse_filter_wire(rest.trim())?;
    *rest = "";
    Ok((
        Entry {
            id,
            source,
            kind,
            filter,
            origin,
        },
        edge,
    ))
}

fn decode_payload(tag: &str, id: MessageId, rest: &mut &str) -> Result<Payload, WireError> {
    Ok(match tag {
        "ADV" => {
            let (entry, edge) = decode_entry(EntryKind::Advertisement, id, rest)?;
            Payload::Advertise { entry, edge }
        }
        "SUB" => {
            let (entry, edge) = decode_entry(EntryKind::Subscription, id, rest)?;
            Payload::Subscribe { entry, edge }
        }
        "UNADV" => Payload::Unadvertise {
            target: parse_mid(kv(rest, "x")?)?,
        },
        "UNSUB" => Payload::Unsubscribe {
            target: parse_mid(kv(rest, "x")?)?,
        },
        "PUB" => Payload::Publish {
            publication: parse_pub_wire(core::mem::take(rest))?,
        },
        "DLV" => {
            let subscriber = parse_client(kv(rest, "s")?)?;
            let matched = parse_mid(kv(rest, "m")?)?;
            let publication_id = parse_mid(kv(rest, "p")?)?;
            let publication = parse_pub_wire(core::mem::take(rest))?;
            Payload::Deliver {
                subscriber,
                matched,
                publication_id,
                publication,
            }
        }
        "FBK" => Payload::Feedback {
            publication: parse_pub_wire(core::mem::take(rest))?,
        },
        "META" => {
            let client = parse_client(kv(rest, "c")?)?;
            let version: u64 = kv(rest, "v")?.parse().map_err(|e| bad("version", e))?;
            let edge = match opt_kv(rest, "e") {
                Some(v) => Some(parse_broker(v)?),
                None => None,
            };
            let attrs = parse_pub_wire(core::mem::take(rest))?;
            Payload::Metadata {
                meta: Metadata {
                    client,
                    version,
                    attrs,
                },
                edge,
            }
        }
        "POL" => {
            let edge = match opt_kv(rest, "e") {
                Some(v) => Some(parse_broker(v)?),
                None => None,
            };
            let policy = parse_policy(rest.trim()).map_err(|e| bad("policy", e))?;
            *rest = "";
            Payload::InstallPolicy { policy, edge }
        }
        "UNPOL" => Payload::RemovePolicy {
            target: parse_mid(kv(rest, "x")?)?,
        },
        "FIRE" => {
            let policy = parse_mid(kv(rest, "pol")?)?;
            let target = parse_client(kv(rest, "tgt")?)?;
            let md_version: u64 = kv(rest, "v")?.parse().map_err(|e| bad("version", e))?;
            let mut reinjection = false;
            let mut instructions = Vec::new();
            let trimmed = rest.trim_start();
            let trimmed = match trimmed.strip_prefix("re") {
                Some(r) if r.is_empty() || r.starts_with(' ') => {
                    reinjection = true;
                    r.trim_start()
                }
                _ => trimmed,
            };
            if let Some(body) = trimmed.strip_prefix("DO ") {
                instructions = parse_instruction_list(body).map_err(|e| bad("instructions", e))?;
            } else if !trimmed.is_empty() {
                return Err(bad("fire", trimmed));
            }
            *rest = "";
            Payload::Fire(FireOrder {
                policy,
                target,
                md_version,
                instructions,
                reinjection,
            })
        }
        "PRULE" => {
            let policy = parse_mid(kv(rest, "pol")?)?;
            let producer = parse_client(kv(rest, "tgt")?)?;
            let md_version: u64 = kv(rest, "v")?.parse().map_err(|e| bad("version", e))?;
            let trimmed = rest.trim_start();
            let body = trimmed.strip_prefix("IF ").ok_or(WireError::Truncated)?;
            let set_at = body.find(" SET ").ok_or(WireError::Truncated)?;
            let content = parse_filter_wire(&body[..set_at])?;
            let sets_text = body[set_at + 5..].trim();
            let mut sets = Vec::new();
            if sets_text != "-" {
                let parsed = parse_pub_wire(sets_text)?;
                for (k, v) in parsed.iter() {
                    sets.push((k.to_string(), v.clone()));
                }
            }
            *rest = "";
            Payload::InstallPubRule(PubRule {
                policy,
                producer,
                md_version,
                content,
                sets,
            })
        }
        "UNPRULE" => {
            let policy = parse_mid(kv(rest, "pol")?)?;
            let producer = parse_client(kv(rest, "tgt")?)?;
            Payload::RetractPubRule { policy, producer }
        }
        "ATTACH" => {
            let client = parse_client(kv(rest, "c")?)?;
            let feedback = rest.trim() == "fb";
            *rest = "";
            Payload::Attach { client, feedback }
        }
        "DETACH" => Payload::Detach {
            client: parse_client(kv(rest, "c")?)?,
        },
        "DEPART" => Payload::Depart {
            client: parse_client(kv(rest, "c")?)?,
        },
        "BOOT" => {
            let role = kv(rest, "role")?;
            if role == "broker" {
                let addr = match opt_kv(rest, "addr") {
                    Some(a) => Some(unquote(a)?),
                    None => None,
                };
                Payload::BootstrapRequest(BootstrapRequest::Broker { addr })
            } else {
                let role = parse_role(role)?;
                let existing = match opt_kv(rest, "id") {
                    Some(v) => Some(parse_client(v)?),
                    None => None,
                };
                let feedback = rest.trim() == "fb";
                *rest = "";
                Payload::BootstrapRequest(BootstrapRequest::Client {
                    role,
                    existing,
                    feedback,
                })
            }
        }
        "BOOTR" => decode_bootstrap_reply(rest)?,
        "HB" => {
            let keyword = expect_token(rest)?;
            if keyword != "stats" {
                return Err(bad("heartbeat", keyword));
            }
            let stats_tok = expect_token(rest)?;
            let mut processed = BTreeMap::new();
            if stats_tok != "-" {
                for part in stats_tok.split(',') {
                    let (k, v) = part.split_once('=').ok_or_else(|| bad("stats", part))?;
                    let kind = MsgKind::ALL
                        .into_iter()
                        .find(|m| m.label() == k)
                        .ok_or_else(|| bad("stats kind", k))?;
                    processed.insert(kind, v.parse().map_err(|e| bad("stats count", e))?);
                }
            }
            let keyword = expect_token(rest)?;
            if keyword != "entries" {
                return Err(bad("heartbeat", keyword));
            }
            let entries_tok = expect_token(rest)?;
            let mut client_entries = BTreeMap::new();
            if entries_tok != "-" {
                for part in entries_tok.split(',') {
                    let (c, v) = part.split_once('=').ok_or_else(|| bad("entries", part))?;
                    client_entries.insert(
                        parse_client(c)?,
                        v.parse().map_err(|e| bad("entry count", e))?,
                    );
                }
            }
            Payload::Heartbeat(StatsSample {
                processed,
                client_entries,
            })
        }
        "HELLO" => {
            let tag = expect_token(rest)?;
            if tag != "hi" {
                return Err(bad("hello", tag));
            }
            let addr = match opt_kv(rest, "addr") {
                Some(a) => Some(unquote(a)?),
                None => None,
            };
            Payload::Hello { addr }
        }
        "CMD" => Payload::Command(decode_command(rest)?),
        "ERR" => {
            let trimmed = rest.trim();
            let text = trimmed
                .strip_prefix('\'')
                .and_then(|t| t.strip_suffix('\''))
                .ok_or_else(|| bad("error text", trimmed))?;
            let text = text.to_string();
            *rest = "";
            Payload::Error { text }
        }
        other => return Err(WireError::UnknownType(other.into())),
    })
}

fn unquote(s: &str) -> Result<String, WireError> {
    s.strip_prefix('\'')
        .and_then(|t| t.strip_suffix('\''))
        .map(|t| t.to_string())
        .ok_or_else(|| bad("quoted text", s))
}

fn decode_bootstrap_reply(rest: &mut &str) -> Result<Payload, WireError> {
    let id = parse_node(kv(rest, "id")?)?;
    let edge = match opt_kv(rest, "edge") {
        Some(v) => {
            let (b, addr) = split_addr(v)?;
            Some((b, addr))
        }
        None => None,
    };
    let mut neighbors = Vec::new();
    if let Some(v) = opt_kv(rest, "nbr") {
        for part in v.split(',') {
            neighbors.push(split_addr(part)?);
        }
    }
    let mode = parse_mode(kv(rest, "mode")?)?;
    let strat_text = kv(rest, "strat")?;
    let strategy = match strat_text.split_once(':') {
        Some((name, root)) => StrategyConfig::new(
            Strategy::parse(name).ok_or_else(|| bad("strategy", name))?,
            Some(parse_broker(root)?),
        ),
        None => StrategyConfig::new(
            Strategy::parse(strat_text).ok_or_else(|| bad("strategy", strat_text))?,
            None,
        ),
    };
    let mut next_hops = BTreeMap::new();
    if let Some(v) = opt_kv(rest, "hops") {
        for part in v.split(',') {
            let (t, via) = part.split_once(':').ok_or_else(|| bad("hops", part))?;
            next_hops.insert(parse_broker(t)?, parse_broker(via)?);
        }
    }
    let heartbeat_period: u64 = kv(rest, "thb")?.parse().map_err(|e| bad("thb", e))?;
    let failure_multiplier: u64 = kv(rest, "k")?.parse().map_err(|e| bad("k", e))?;
    Ok(Payload::BootstrapReply(BootstrapReply {
        id,
        neighbors,
        edge,
        mode,
        strategy,
        next_hops,
        heartbeat_period,
        failure_multiplier,
    }))
}

fn split_addr(s: &str) -> Result<(BrokerId, Option<String>), WireError> {
    match s.split_once('@') {
        Some((b, addr)) => Ok((parse_broker(b)?, Some(addr.to_string()))),
        None => Ok((parse_broker(s)?, None)),
    }
}

fn decode_command(rest: &mut &str) -> Result<Command, WireError> {
    let label = kv(rest, "cmd")?;
    Ok(match label {
        "add-neighbor" => {
            let b = parse_broker(kv(rest, "b")?)?;
            let addr = match opt_kv(rest, "addr") {
                Some(a) => Some(unquote(a)?),
                None => None,
            };
            Command::AddNeighbor(b, addr)
        }
        "remove-neighbor" => Command::RemoveNeighbor(parse_broker(kv(rest, "b")?)?),
        "next-hops" => {
            let v = kv(rest, "map")?;
            let mut map = BTreeMap::new();
            if v != "-" {
                for part in v.split(',') {
                    let (t, via) = part.split_once(':').ok_or_else(|| bad("map", part))?;
                    map.insert(parse_broker(t)?, parse_broker(via)?);
                }
            }
            Command::InstallNextHops(map)
        }
        "set-mode" => Command::SetMode(parse_mode(kv(rest, "mode")?)?),
        "set-rendezvous" => Command::SetControlRendezvous(parse_broker(kv(rest, "b")?)?),
        "migrate" => {
            let to = parse_broker(kv(rest, "to")?)?;
            let mut clients = Vec::new();
            for part in kv(rest, "clients")?.split(',') {
                clients.push(parse_client(part)?);
            }
            Command::MigrateClients { clients, to }
        }
        "purge-sources" => {
            let mut clients = Vec::new();
            for part in kv(rest, "clients")?.split(',') {
                clients.push(parse_client(part)?);
            }
            Command::PurgeSources(clients)
        }
        "resend-control" => Command::ResendControl {
            to: parse_broker(kv(rest, "to")?)?,
        },
        "rehome" => Command::Rehome {
            to: parse_broker(kv(rest, "to")?)?,
        },
        other => return Err(bad("command", other)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn producer(n: u64) -> ClientId {
        ClientId {
            role: ClientRole::Producer,
            num: n,
        }
    }

    #[test]
    fn spec_publish_line() {
        let msg = Message::new(
            MessageId::new(producer(7), 3),
            producer(7),
            Payload::Publish {
                publication: parse_publication("[price,35]").unwrap(),
            },
        );
        assert_eq!(encode_message(&msg), "v1 PUB p7:3 p7 [price,35]\n");
        assert_eq!(decode_message("v1 PUB p7:3 p7 [price,35]").unwrap(), msg);
    }

    #[test]
    fn version_mismatch_rejected() {
        assert_eq!(
            decode_message("v2 PUB p7:3 p7 [price,35]").unwrap_err(),
            WireError::VersionMismatch("v2".into())
        );
    }

    #[test]
    fn truncated_and_unknown_rejected() {
        assert_eq!(
            decode_message("v1 PUB p7:3").unwrap_err(),
            WireError::Truncated
        );
        assert!(matches!(
            decode_message("v1 WHAT p7:3 p7 [a,1]").unwrap_err(),
            WireError::UnknownType(_)
        ));
    }

    #[test]
    fn directed_to_field_round_trips() {
        let msg = Message::directed(
            MessageId::new(BrokerId(2), 9),
            BrokerId(2),
            BrokerId(5),
            Payload::Unsubscribe {
                target: MessageId::new(producer(7), 1),
            },
        );
        let line = encode_message(&msg);
        assert_eq!(line, "v1 UNSUB b2:9 b2 b5 x=p7:1\n");
        assert_eq!(decode_message(&line).unwrap(), msg);
    }

    #[test]
    fn generated_entry_round_trips() {
        let entry = Entry {
            id: MessageId::new(BrokerId(1), 4),
            source: producer(7),
            kind: EntryKind::Advertisement,
            filter: parse_filter("[topic,=,'Norway']").unwrap(),
            origin: Origin::PolicyGenerated {
                policy: MessageId::new(
                    ClientId {
                        role: ClientRole::Advertiser,
                        num: 3,
                    },
                    1,
                ),
                target: producer(7),
            },
        };
        let msg = Message::new(
            MessageId::new(BrokerId(1), 4),
            BrokerId(1),
            Payload::Advertise {
                entry,
                edge: Some(BrokerId(1)),
            },
        );
        let line = encode_message(&msg);
        assert_eq!(decode_message(&line).unwrap(), msg);
    }
}
