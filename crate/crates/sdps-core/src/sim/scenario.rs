//! Scenario files: UTF-8 lines `<time> <action> <args...>`, `#` comments.
//!
//! ```text
//! 0  join-broker
//! 1  join-client producer [feedback]
//! 2  join-client consumer
//! 5  advertise p4 [price,<,100]
//! 6  subscribe c5 [price,<,50]
//! 9  publish p4 [price,35]
//! 12 metadata p4 [meta.country,'Norway']
//! 14 install-policy a6 POLICY id=1 owner=a6 target=producer WHEN ... DO ...
//! 16 remove-policy a6 a6:1
//! 20 unadvertise p4 p4:1
//! 21 unsubscribe c5 c5:1
//! 30 fail-broker b2
//! 35 depart-client c5
//! 40 heartbeat-tick
//! ```
//!
//! Node names refer to controller-assigned ids, which are predictable: one
//! counter across all roles, in join order.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::model::{
    parse_filter, parse_publication, BrokerId, ClientId, ClientRole, Filter, MessageId, NodeId,
    Publication,
};
use crate::policy::{parse_policy, PolicyText};

pub type Tick = u64;

/// One scripted action.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    JoinBroker,
    JoinClient {
        role: ClientRole,
        feedback: bool,
    },
    Advertise {
        client: ClientId,
        filter: Filter,
    },
    Unadvertise {
        client: ClientId,
        target: MessageId,
    },
    Subscribe {
        client: ClientId,
        filter: Filter,
    },
    Unsubscribe {
        client: ClientId,
        target: MessageId,
    },
    Publish {
        client: ClientId,
        publication: Publication,
    },
    Metadata {
        client: ClientId,
        attrs: Publication,
    },
    InstallPolicy {
        client: ClientId,
        policy: PolicyText,
    },
    RemovePolicy {
        client: ClientId,
        target: MessageId,
    },
    FailBroker {
        broker: BrokerId,
    },
    DepartClient {
        client: ClientId,
    },
    HeartbeatTick,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEvent {
    pub time: Tick,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    pub line: usize,
    pub what: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "scenario line {}: {}", self.line, self.what)
    }
}

impl core::error::Error for ScenarioError {}

fn client_arg(tok: &str, line: usize) -> Result<ClientId, ScenarioError> {
    NodeId::parse(tok)
        .and_then(|n| n.as_client())
        .ok_or_else(|| ScenarioError {
            line,
            what: format!("expected client id, got `{}`", tok),
        })
}

fn id_arg(tok: &str, line: usize) -> Result<MessageId, ScenarioError> {
    MessageId::parse(tok).ok_or_else(|| ScenarioError {
        line,
        what: format!("expected message id, got `{}`", tok),
    })
}

/// Parses a scenario. Events may appear out of time order; the runner
/// processes them in (time, line order).
pub fn load_scenario(text: &str) -> Result<Vec<ScenarioEvent>, ScenarioError> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        };
        let trimmed = stripped.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut parts = trimmed.splitn(3, char::is_whitespace);
        let time: Tick = parts.next().unwrap().parse().map_err(|_| ScenarioError {
            line,
            what: "expected integer time".into(),
        })?;
        let verb = parts.next().ok_or_else(|| ScenarioError {
            line,
            what: "expected action".into(),
        })?;
        let rest = parts.next().unwrap_or("").trim();
        let mut arg_words = rest.splitn(2, char::is_whitespace);
        let action = match verb {
            "join-broker" => {
                if !rest.is_empty() {
                    return Err(ScenarioError {
                        line,
                        what: "join-broker takes no args".into(),
                    });
                }
                Action::JoinBroker
            }
            "join-client" => {
                let role = match arg_words.next().unwrap_or("") {
                    "producer" => ClientRole::Producer,
                    "consumer" => ClientRole::Consumer,
                    "advertiser" => ClientRole::Advertiser,
                    "im" | "interest-manager" => ClientRole::InterestManager,
                    other => {
                        return Err(ScenarioError {
                            line,
                            what: format!("unknown role `{}`", other),
                        })
                    }
                };
                let feedback = match arg_words.next().map(str::trim) {
                    None | Some("") => false,
                    Some("feedback") => true,
                    Some(other) => {
                        return Err(ScenarioError {
                            line,
                            what: format!("unexpected arg `{}`", other),
                        })
                    }
                };
                Action::JoinClient { role, feedback }
            }
            "advertise" | "subscribe" => {
                let client = client_arg(arg_words.next().unwrap_or(""), line)?;
                let filter = parse_filter(arg_words.next().unwrap_or("").trim()).map_err(|e| {
                    ScenarioError {
                        line,
                        what: e.to_string(),
                    }
                })?;
                if verb == "advertise" {
                    Action::Advertise { client, filter }
                } else {
                    Action::Subscribe { client, filter }
                }
            }
            "unadvertise" | "unsubscribe" => {
                let client = client_arg(arg_words.next().unwrap_or(""), line)?;
                let target = id_arg(arg_words.next().unwrap_or("").trim(), line)?;
                if verb == "unadvertise" {
                    Action::Unadvertise { client, target }
                } else {
                    Action::Unsubscribe { client, target }
                }
            }
            "publish" => {
                let client = client_arg(arg_words.next().unwrap_or(""), line)?;
                let publication = parse_publication(arg_words.next().unwrap_or("").trim())
                    .map_err(|e| ScenarioError {
                        line,
                        what: e.to_string(),
                    })?;
                Action::Publish {
                    client,
                    publication,
                }
            }
            "metadata" => {
                let client = client_arg(arg_words.next().unwrap_or(""), line)?;
                let attrs =
                    parse_publication(arg_words.next().unwrap_or("").trim()).map_err(|e| {
                        ScenarioError {
                            line,
                            what: e.to_string(),
                        }
                    })?;
                Action::Metadata { client, attrs }
            }
            "install-policy" => {
                let client = client_arg(arg_words.next().unwrap_or(""), line)?;
                let policy = parse_policy(arg_words.next().unwrap_or("").trim()).map_err(|e| {
                    ScenarioError {
                        line,
                        what: e.to_string(),
                    }
                })?;
                Action::InstallPolicy { client, policy }
            }
            "remove-policy" => {
                let client = client_arg(arg_words.next().unwrap_or(""), line)?;
                let target = id_arg(arg_words.next().unwrap_or("").trim(), line)?;
                Action::RemovePolicy { client, target }
            }
            "fail-broker" => {
                let broker = NodeId::parse(rest)
                    .and_then(|n| n.as_broker())
                    .ok_or_else(|| ScenarioError {
                        line,
                        what: format!("expected broker id, got `{}`", rest),
                    })?;
                Action::FailBroker { broker }
            }
            "depart-client" => Action::DepartClient {
                client: client_arg(rest, line)?,
            },
            "heartbeat-tick" => {
                if !rest.is_empty() {
                    return Err(ScenarioError {
                        line,
                        what: "heartbeat-tick takes no args".into(),
                    });
                }
                Action::HeartbeatTick
            }
            other => {
                return Err(ScenarioError {
                    line,
                    what: format!("unknown action `{}`", other),
                })
            }
        };
        events.push(ScenarioEvent { time, action });
    }
    Ok(events)
}

/// Inserts a broker failure, checking the broker joined earlier. Join order
/// determines ids, so the nth `join-broker` line creates broker n'th id.
pub fn inject_fault(
    events: &mut Vec<ScenarioEvent>,
    broker: BrokerId,
    time: Tick,
) -> Result<(), ScenarioError> {
    let mut counter = 0u64;
    let mut joined_at = None;
    for ev in events.iter() {
        counter += match ev.action {
            Action::JoinBroker | Action::JoinClient { .. } => 1,
            _ => 0,
        };
        if matches!(ev.action, Action::JoinBroker) && counter == broker.0 {
            joined_at = Some(ev.time);
            break;
        }
    }
    match joined_at {
        Some(t) if t < time => {
            events.push(ScenarioEvent {
                time,
                action: Action::FailBroker { broker },
            });
            Ok(())
        }
        Some(_) => Err(ScenarioError {
            line: 0,
            what: format!("{} joins too late", broker),
        }),
        None => Err(ScenarioError {
            line: 0,
            what: format!("unknown broker {}", broker),
        }),
    }
}
