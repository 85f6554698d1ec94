//! Randomized scenario and message generation for verification runs.
//!
//! Generation is seed-deterministic: the same seed always yields the same
//! scenario, so failures reproduce exactly.
//!
//! Scenarios keep the control plane and the data plane separated in time:
//! after any burst of advertisements, subscriptions, metadata, or policy
//! changes the script waits out a settle gap before publishing. Delivery
//! guarantees hold at quiescence; in-flight control churn carries none,
//! and the oracle compares against settled state.

use sdps_core::matching::{Entry, EntryKind, Origin};
use sdps_core::message::{
    BootstrapReply, BootstrapRequest, Command, Message, Mode, Payload, StatsSample,
};
use sdps_core::model::{
    parse_filter, parse_publication, BrokerId, ClientId, ClientRole, MessageId, NodeId,
};
use sdps_core::policy::{parse_policy, Metadata};
use sdps_core::routing::{Strategy, StrategyConfig};
use sdps_core::sim::{Action, ScenarioEvent, Tick};

/// splitmix64: tiny, fast, and stable across platforms and releases.
#[derive(Debug, Clone)]
pub struct Rng(u64);

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng(seed.wrapping_add(0x9e3779b97f4a7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n.max(1)
    }

    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.below(hi - lo + 1)
    }

    pub fn chance(&mut self, percent: u64) -> bool {
        self.below(100) < percent
    }

    pub fn pick<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len() as u64) as usize]
    }
}

const TOPICS: &[&str] = &["stock", "bond", "news", "metal"];
const AREAS: &[&str] = &["north", "south", "east"];

/// Knobs for scenario generation, all bounded by the verification limits
/// (≤ 12 brokers, ≤ 30 clients, ≤ 200 publications).
#[derive(Debug, Clone)]
pub struct GenParams {
    pub max_brokers: u64,
    pub max_producers: u64,
    pub max_consumers: u64,
    pub publications: u64,
    pub with_policies: bool,
    pub with_pub_policies: bool,
    pub with_ad_state_conditions: bool,
    pub with_sub_state_conditions: bool,
    pub with_metadata_churn: bool,
    pub with_retractions: bool,
    pub with_failure: bool,
    /// Quiescence gap after control-plane bursts.
    pub gap: Tick,
}

impl Default for GenParams {
    fn default() -> GenParams {
        GenParams {
            max_brokers: 12,
            max_producers: 6,
            max_consumers: 8,
            publications: 40,
            with_policies: false,
            with_pub_policies: false,
            with_ad_state_conditions: false,
            with_sub_state_conditions: false,
            with_metadata_churn: false,
            with_retractions: true,
            with_failure: false,
            gap: 64,
        }
    }
}

struct ClientPlan {
    id: ClientId,
    // Per-client sequence mirror of the simulator's allocator (the attach
    // message consumes seq 1), so retractions can reference issued ids.
    seq: u64,
    issued: Vec<MessageId>,
}

impl ClientPlan {
    fn issue(&mut self) -> MessageId {
        self.seq += 1;
        let id = MessageId::new(self.id, self.seq);
        self.issued.push(id);
        id
    }

    fn bump(&mut self) {
        self.seq += 1;
    }
}

fn number_filter(rng: &mut Rng, attr: &str) -> String {
    let a = rng.range(0, 80) as i64;
    match rng.below(5) {
        0 => format!("[{attr},<,{}]", a + 10),
        1 => format!("[{attr},<=,{a}]"),
        2 => format!("[{attr},>,{a}]"),
        3 => format!("[{attr},>=,{a}]"),
        _ => format!("[{attr},present]"),
    }
}

fn text_filter(rng: &mut Rng, attr: &str, pool: &[&str]) -> String {
    match rng.below(3) {
        0 => format!("[{attr},=,'{}']", rng.pick(pool)),
        1 => format!("[{attr},!=,'{}']", rng.pick(pool)),
        _ => format!("[{attr},present]"),
    }
}

fn random_filter(rng: &mut Rng) -> String {
    let mut parts = Vec::new();
    if rng.chance(70) {
        parts.push(text_filter(rng, "topic", TOPICS));
    }
    if rng.chance(60) {
        parts.push(number_filter(rng, "price"));
    }
    if rng.chance(25) {
        parts.push(number_filter(rng, "volume"));
    }
    if parts.is_empty() {
        parts.push(format!("[topic,=,'{}']", rng.pick(TOPICS)));
    }
    parts.join(",")
}

fn random_publication(rng: &mut Rng) -> String {
    let mut parts = vec![
        format!("[topic,'{}']", rng.pick(TOPICS)),
        format!("[price,{}]", rng.range(0, 90)),
    ];
    if rng.chance(40) {
        parts.push(format!("[volume,{}]", rng.range(0, 50)));
    }
    parts.join(",")
}

/// Generates one randomized scenario. Node ids are predictable from join
/// order, which the generator tracks to reference clients and entries.
pub fn generate_scenario(seed: u64, params: &GenParams) -> Vec<ScenarioEvent> {
    let mut rng = Rng::new(seed);
    let mut events = Vec::new();
    let mut t: Tick = 0;
    let gap = params.gap;

    let n_brokers = rng.range(2, params.max_brokers.max(2));
    let n_producers = rng.range(1, params.max_producers.max(1));
    let n_consumers = rng.range(1, params.max_consumers.max(1));
    let mut counter = 0u64;

    for _ in 0..n_brokers {
        events.push(ScenarioEvent {
            time: t,
            action: Action::JoinBroker,
        });
        counter += 1;
    }
    t += 2;

    let mut producers = Vec::new();
    let mut consumers = Vec::new();
    let mut advertiser = None;
    let mut interest_manager = None;
    for _ in 0..n_producers {
        counter += 1;
        let id = ClientId {
            role: ClientRole::Producer,
            num: counter,
        };
        events.push(ScenarioEvent {
            time: t,
            action: Action::JoinClient {
                role: ClientRole::Producer,
                feedback: false,
            },
        });
        producers.push(ClientPlan {
            id,
            seq: 1,
            issued: Vec::new(),
        });
    }
    for _ in 0..n_consumers {
        counter += 1;
        let id = ClientId {
            role: ClientRole::Consumer,
            num: counter,
        };
        events.push(ScenarioEvent {
            time: t,
            action: Action::JoinClient {
                role: ClientRole::Consumer,
                feedback: false,
            },
        });
        consumers.push(ClientPlan {
            id,
            seq: 1,
            issued: Vec::new(),
        });
    }
    if params.with_policies || params.with_pub_policies {
        counter += 1;
        let adv = ClientId {
            role: ClientRole::Advertiser,
            num: counter,
        };
        events.push(ScenarioEvent {
            time: t,
            action: Action::JoinClient {
                role: ClientRole::Advertiser,
                feedback: false,
            },
        });
        advertiser = Some(ClientPlan {
            id: adv,
            seq: 1,
            issued: Vec::new(),
        });
        counter += 1;
        let im = ClientId {
            role: ClientRole::InterestManager,
            num: counter,
        };
        events.push(ScenarioEvent {
            time: t,
            action: Action::JoinClient {
                role: ClientRole::InterestManager,
                feedback: false,
            },
        });
        interest_manager = Some(ClientPlan {
            id: im,
            seq: 1,
            issued: Vec::new(),
        });
    }
    t += 2;

    // Control burst: advertisements, subscriptions, metadata, policies.
    for p in producers.iter_mut() {
        for _ in 0..rng.range(1, 2) {
            let id = p.issue();
            let _ = id;
            events.push(ScenarioEvent {
                time: t,
                action: Action::Advertise {
                    client: p.id,
                    filter: parse_filter(&broad_ad(&mut rng)).unwrap(),
                },
            });
            t += 1;
        }
    }
    for c in consumers.iter_mut() {
        for _ in 0..rng.range(1, 3) {
            c.issue();
            events.push(ScenarioEvent {
                time: t,
                action: Action::Subscribe {
                    client: c.id,
                    filter: parse_filter(&random_filter(&mut rng)).unwrap(),
                },
            });
            t += 1;
        }
    }

    if params.with_policies || params.with_pub_policies {
        // Metadata first, so installs fire immediately for some targets.
        for p in producers.iter_mut() {
            if rng.chance(70) {
                p.bump();
                events.push(ScenarioEvent {
                    time: t,
                    action: Action::Metadata {
                        client: p.id,
                        attrs: parse_publication(&format!(
                            "[meta.country,'{}'],[meta.tier,'{}']",
                            rng.pick(TOPICS),
                            if rng.chance(50) { "gold" } else { "basic" },
                        ))
                        .unwrap(),
                    },
                });
                t += 1;
            }
        }
        for c in consumers.iter_mut() {
            if rng.chance(70) {
                c.bump();
                events.push(ScenarioEvent {
                    time: t,
                    action: Action::Metadata {
                        client: c.id,
                        attrs: parse_publication(&format!(
                            "[meta.area,'{}'],[meta.rank,{}]",
                            rng.pick(AREAS),
                            rng.range(1, 9),
                        ))
                        .unwrap(),
                    },
                });
                t += 1;
            }
        }
        t += gap;

        if params.with_policies {
            let adv = advertiser.as_mut().unwrap();
            let mut pid = 0;
            if rng.chance(80) {
                pid += 1;
                adv.bump();
                let state = if params.with_ad_state_conditions && rng.chance(50) {
                    " STATE has_ad([price,present])"
                } else {
                    ""
                };
                let text = format!(
                    "POLICY id={pid} owner={} target=producer WHEN [meta.country,present]{state} DO insert_ad [topic,=,'$meta.country']",
                    adv.id
                );
                events.push(ScenarioEvent {
                    time: t,
                    action: Action::InstallPolicy {
                        client: adv.id,
                        policy: parse_policy(&text).unwrap(),
                    },
                });
                t += 1;
            }
            let im = interest_manager.as_mut().unwrap();
            let mut im_pid = 0;
            if rng.chance(80) {
                im_pid += 1;
                im.bump();
                let state = if params.with_sub_state_conditions && rng.chance(50) {
                    " STATE has_sub([price,present])"
                } else {
                    ""
                };
                let choice = rng.below(2);
                let action = if choice == 0 {
                    "insert_sub [area,=,'$meta.area']"
                } else {
                    "insert_sub [price,<,$meta.rank+60],[topic,present]"
                };
                let text = format!(
                    "POLICY id={im_pid} owner={} target=consumer WHEN [meta.area,present]{state} DO {action}",
                    im.id
                );
                events.push(ScenarioEvent {
                    time: t,
                    action: Action::InstallPolicy {
                        client: im.id,
                        policy: parse_policy(&text).unwrap(),
                    },
                });
                t += 1;
            }
            // Producers publish into the policy-generated regions too.
        }
        if params.with_pub_policies {
            let adv = advertiser.as_mut().unwrap();
            adv.bump();
            let text = format!(
                "PUBPOLICY id=9 owner={} WHEN [meta.tier,=,'gold'] IF [price,present] SET [grade,'$meta.tier']",
                adv.id
            );
            events.push(ScenarioEvent {
                time: t,
                action: Action::InstallPolicy {
                    client: adv.id,
                    policy: parse_policy(&text).unwrap(),
                },
            });
            t += 1;
            // Give the transform something to hit.
            if let Some(c) = consumers.first_mut() {
                c.issue();
                events.push(ScenarioEvent {
                    time: t,
                    action: Action::Subscribe {
                        client: c.id,
                        filter: parse_filter("[grade,=,'gold']").unwrap(),
                    },
                });
                t += 1;
            }
        }
    }
    t += gap;

    // Data phase, with optional churn bursts between publication runs.
    let mut published = 0;
    let phases = if params.with_metadata_churn || params.with_retractions || params.with_failure {
        3
    } else {
        1
    };
    let mut failed = false;
    for phase in 0..phases {
        let quota = params.publications / phases + u64::from(phase == 0);
        for _ in 0..quota {
            if published >= params.publications {
                break;
            }
            let which = rng.below(producers.len() as u64) as usize;
            let p = &mut producers[which];
            p.bump();
            events.push(ScenarioEvent {
                time: t,
                action: Action::Publish {
                    client: p.id,
                    publication: parse_publication(&random_publication(&mut rng)).unwrap(),
                },
            });
            published += 1;
            t += rng.range(1, 2);
        }
        if phase + 1 == phases {
            break;
        }
        // Let in-flight publications drain before the control plane churns.
        t += gap;
        // Churn burst. Re-issue after a failure renumbers entries, so no
        // scripted retraction can reference them once a broker has died.
        if params.with_retractions && !failed && rng.chance(60) {
            for c in consumers.iter_mut() {
                if !c.issued.is_empty() && rng.chance(40) {
                    let target = c.issued.remove(0);
                    c.bump();
                    events.push(ScenarioEvent {
                        time: t,
                        action: Action::Unsubscribe {
                            client: c.id,
                            target,
                        },
                    });
                    t += 1;
                }
            }
            for p in producers.iter_mut() {
                if p.issued.len() > 1 && rng.chance(25) {
                    let target = p.issued.remove(0);
                    p.bump();
                    events.push(ScenarioEvent {
                        time: t,
                        action: Action::Unadvertise {
                            client: p.id,
                            target,
                        },
                    });
                    t += 1;
                }
            }
        }
        if params.with_metadata_churn {
            for c in consumers.iter_mut() {
                if rng.chance(50) {
                    c.bump();
                    events.push(ScenarioEvent {
                        time: t,
                        action: Action::Metadata {
                            client: c.id,
                            attrs: parse_publication(&format!(
                                "[meta.area,'{}'],[meta.rank,{}]",
                                rng.pick(AREAS),
                                rng.range(1, 9),
                            ))
                            .unwrap(),
                        },
                    });
                    t += 1;
                }
            }
        }
        if params.with_failure && !failed {
            failed = true;
            // Control traffic still in flight would die with the broker;
            // the delivery guarantee is for failures of settled state.
            t += gap;
            let victim = BrokerId(rng.range(1, n_brokers));
            events.push(ScenarioEvent {
                time: t,
                action: Action::FailBroker { broker: victim },
            });
            t += 3 * gap; // detection + repair + re-bootstrap + settle
        }
        t += gap;
    }
    events
}

fn broad_ad(rng: &mut Rng) -> String {
    // Advertisements cover wide regions so publications land inside them
    // often enough to exercise forwarding.
    let mut parts = vec!["[topic,present]".to_string()];
    if rng.chance(50) {
        parts.push(format!("[price,<,{}]", rng.range(50, 120)));
    } else {
        parts.push("[price,present]".to_string());
    }
    parts.join(",")
}

// ---------------------------------------------------------------------------
// Random wire messages (round-trip corpus)
// ---------------------------------------------------------------------------

fn random_node(rng: &mut Rng) -> NodeId {
    match rng.below(6) {
        0 => NodeId::Broker(BrokerId(rng.range(1, 40))),
        1 => NodeId::Client(ClientId {
            role: ClientRole::Producer,
            num: rng.range(1, 40),
        }),
        2 => NodeId::Client(ClientId {
            role: ClientRole::Consumer,
            num: rng.range(1, 40),
        }),
        3 => NodeId::Client(ClientId {
            role: ClientRole::Advertiser,
            num: rng.range(1, 40),
        }),
        4 => NodeId::Client(ClientId {
            role: ClientRole::InterestManager,
            num: rng.range(1, 40),
        }),
        _ => NodeId::Controller,
    }
}

fn random_client(rng: &mut Rng, role: ClientRole) -> ClientId {
    ClientId {
        role,
        num: rng.range(1, 40),
    }
}

fn random_mid(rng: &mut Rng) -> MessageId {
    MessageId::new(random_node(rng), rng.range(1, 9999))
}

fn random_entry(rng: &mut Rng, kind: EntryKind) -> Entry {
    let source = random_client(
        rng,
        if kind == EntryKind::Advertisement {
            ClientRole::Producer
        } else {
            ClientRole::Consumer
        },
    );
    let origin = if rng.chance(30) {
        Origin::PolicyGenerated {
            policy: MessageId::new(random_client(rng, ClientRole::Advertiser), rng.range(1, 9)),
            target: source,
        }
    } else {
        Origin::ClientIssued
    };
    Entry {
        id: random_mid(rng),
        source,
        kind,
        filter: parse_filter(&random_filter(rng)).unwrap(),
        origin,
    }
}

/// One random message covering every payload type; used for wire
/// round-trip verification.
pub fn random_message(rng: &mut Rng) -> Message {
    let mut id = random_mid(rng);
    let from = random_node(rng);
    let payload = match rng.below(18) {
        0 => {
            let entry = random_entry(rng, EntryKind::Advertisement);
            id = entry.id; // entries travel under their own id
            Payload::Advertise {
                entry,
                edge: rng.chance(60).then(|| BrokerId(rng.range(1, 20))),
            }
        }
        1 => {
            let entry = random_entry(rng, EntryKind::Subscription);
            id = entry.id;
            Payload::Subscribe {
                entry,
                edge: rng.chance(60).then(|| BrokerId(rng.range(1, 20))),
            }
        }
        2 => Payload::Unadvertise {
            target: random_mid(rng),
        },
        3 => Payload::Unsubscribe {
            target: random_mid(rng),
        },
        4 => Payload::Publish {
            publication: parse_publication(&random_publication(rng)).unwrap(),
        },
        5 => Payload::Deliver {
            subscriber: random_client(rng, ClientRole::Consumer),
            matched: random_mid(rng),
            publication_id: random_mid(rng),
            publication: parse_publication(&random_publication(rng)).unwrap(),
        },
        6 => Payload::Feedback {
            publication: parse_publication(&random_publication(rng)).unwrap(),
        },
        7 => Payload::Metadata {
            meta: Metadata {
                client: random_client(rng, ClientRole::Producer),
                version: rng.range(1, 50),
                attrs: parse_publication(&format!("[meta.area,'{}']", rng.pick(AREAS))).unwrap(),
            },
            edge: rng.chance(60).then(|| BrokerId(rng.range(1, 20))),
        },
        8 => {
            let owner = random_client(rng, ClientRole::InterestManager);
            let text = format!(
                "POLICY id={} owner={} target=consumer WHEN [meta.area,present] STATE has_sub([price,present]) DO insert_sub [area,=,'$meta.area'] ; modify [price,present] set [price,<,$old.price+10] del volume",
                rng.range(1, 9),
                owner
            );
            Payload::InstallPolicy {
                policy: parse_policy(&text).unwrap(),
                edge: rng.chance(60).then(|| BrokerId(rng.range(1, 20))),
            }
        }
        9 => Payload::RemovePolicy {
            target: random_mid(rng),
        },
        10 => {
            let owner = random_client(rng, ClientRole::Advertiser);
            let text = format!(
                "PUBPOLICY id={} owner={} WHEN [meta.tier,=,'gold'] IF [price,>,{}] SET [grade,'$meta.tier'],[boost,{}]",
                rng.range(1, 9),
                owner,
                rng.range(1, 80),
                rng.range(1, 5),
            );
            Payload::InstallPolicy {
                policy: parse_policy(&text).unwrap(),
                edge: rng.chance(60).then(|| BrokerId(rng.range(1, 20))),
            }
        }
        11 => {
            let target = random_client(rng, ClientRole::Consumer);
            let instructions = if rng.chance(70) {
                sdps_core::policy::parse_instruction_list(&format!(
                    "insert_sub [area,=,'{}'] ; insert_unsub [price,>,{}]",
                    rng.pick(AREAS),
                    rng.range(1, 80),
                ))
                .unwrap()
            } else {
                Vec::new()
            };
            Payload::Fire(sdps_core::policy::FireOrder {
                policy: random_mid(rng),
                target,
                md_version: rng.range(1, 40),
                instructions,
                reinjection: rng.chance(20),
            })
        }
        12 => Payload::InstallPubRule(sdps_core::policy::PubRule {
            policy: random_mid(rng),
            producer: random_client(rng, ClientRole::Producer),
            md_version: rng.range(1, 40),
            content: parse_filter(&random_filter(rng)).unwrap(),
            sets: vec![(
                "grade".into(),
                sdps_core::model::Value::text(*rng.pick(&["gold", "basic"])),
            )],
        }),
        13 => Payload::Command(random_command(rng)),
        14 => Payload::Attach {
            client: random_client(rng, ClientRole::Consumer),
            feedback: rng.chance(50),
        },
        15 => Payload::Heartbeat(random_stats(rng)),
        16 => Payload::BootstrapRequest(if rng.chance(50) {
            BootstrapRequest::Broker {
                addr: rng
                    .chance(50)
                    .then(|| format!("127.0.0.1:{}", rng.range(1024, 65000))),
            }
        } else {
            BootstrapRequest::Client {
                role: *rng.pick(&[ClientRole::Producer, ClientRole::Consumer]),
                existing: rng
                    .chance(30)
                    .then(|| random_client(rng, ClientRole::Consumer)),
                feedback: rng.chance(30),
            }
        }),
        _ => Payload::BootstrapReply(random_bootstrap_reply(rng)),
    };
    let mut msg = Message::new(id, from, payload);
    if rng.chance(40) {
        msg.to = Some(random_node(rng));
    }
    msg
}

fn random_command(rng: &mut Rng) -> Command {
    match rng.below(9) {
        0 => Command::AddNeighbor(
            BrokerId(rng.range(1, 20)),
            rng.chance(50)
                .then(|| format!("127.0.0.1:{}", rng.range(1024, 65000))),
        ),
        1 => Command::RemoveNeighbor(BrokerId(rng.range(1, 20))),
        2 => {
            let mut map = std::collections::BTreeMap::new();
            for _ in 0..rng.below(5) {
                map.insert(BrokerId(rng.range(1, 20)), BrokerId(rng.range(1, 20)));
            }
            Command::InstallNextHops(map)
        }
        3 => Command::SetMode(*rng.pick(&[
            Mode::AdvertisementBased,
            Mode::RendezvousRoot,
            Mode::Rendezvous { relay: BrokerId(3) },
        ])),
        4 => Command::SetControlRendezvous(BrokerId(rng.range(1, 20))),
        5 => Command::MigrateClients {
            clients: vec![random_client(rng, ClientRole::Consumer)],
            to: BrokerId(rng.range(1, 20)),
        },
        6 => Command::PurgeSources(vec![
            random_client(rng, ClientRole::Producer),
            random_client(rng, ClientRole::Consumer),
        ]),
        7 => Command::ResendControl {
            to: BrokerId(rng.range(1, 20)),
        },
        _ => Command::Rehome {
            to: BrokerId(rng.range(1, 20)),
        },
    }
}

fn random_stats(rng: &mut Rng) -> StatsSample {
    let mut sample = StatsSample::default();
    for kind in sdps_core::message::MsgKind::ALL {
        if rng.chance(40) {
            sample.processed.insert(kind, rng.range(0, 500));
        }
    }
    for _ in 0..rng.below(4) {
        sample
            .client_entries
            .insert(random_client(rng, ClientRole::Consumer), rng.range(0, 9));
    }
    sample
}

fn random_bootstrap_reply(rng: &mut Rng) -> BootstrapReply {
    let mut next_hops = std::collections::BTreeMap::new();
    for _ in 0..rng.below(4) {
        next_hops.insert(BrokerId(rng.range(1, 20)), BrokerId(rng.range(1, 20)));
    }
    BootstrapReply {
        id: random_node(rng),
        neighbors: (0..rng.below(3))
            .map(|_| {
                (
                    BrokerId(rng.range(1, 20)),
                    rng.chance(50)
                        .then(|| format!("127.0.0.1:{}", rng.range(1024, 65000))),
                )
            })
            .collect(),
        edge: rng.chance(50).then(|| {
            (
                BrokerId(rng.range(1, 20)),
                Some(format!("127.0.0.1:{}", rng.range(1024, 65000))),
            )
        }),
        mode: *rng.pick(&[
            Mode::AdvertisementBased,
            Mode::RendezvousRoot,
            Mode::Rendezvous { relay: BrokerId(2) },
        ]),
        strategy: StrategyConfig::new(
            *rng.pick(&[
                Strategy::MetadataFlood,
                Strategy::PolicyFlood,
                Strategy::Rendezvous,
            ]),
            rng.chance(70).then(|| BrokerId(rng.range(1, 20))),
        ),
        next_hops,
        heartbeat_period: rng.range(1, 5),
        failure_multiplier: rng.range(2, 5),
    }
}

/// Renders events back into scenario file lines.
pub fn render_scenario(events: &[ScenarioEvent]) -> Vec<String> {
    use sdps_core::policy::format_policy;
    events
        .iter()
        .map(|ev| {
            let body = match &ev.action {
                Action::JoinBroker => "join-broker".to_string(),
                Action::JoinClient { role, feedback } => {
                    let role = match role {
                        ClientRole::Producer => "producer",
                        ClientRole::Consumer => "consumer",
                        ClientRole::Advertiser => "advertiser",
                        ClientRole::InterestManager => "im",
                    };
                    if *feedback {
                        format!("join-client {role} feedback")
                    } else {
                        format!("join-client {role}")
                    }
                }
                Action::Advertise { client, filter } => format!("advertise {client} {filter}"),
                Action::Subscribe { client, filter } => format!("subscribe {client} {filter}"),
                Action::Unadvertise { client, target } => {
                    format!("unadvertise {client} {target}")
                }
                Action::Unsubscribe { client, target } => {
                    format!("unsubscribe {client} {target}")
                }
                Action::Publish {
                    client,
                    publication,
                } => {
                    format!("publish {client} {publication}")
                }
                Action::Metadata { client, attrs } => format!("metadata {client} {attrs}"),
                Action::InstallPolicy { client, policy } => {
                    format!("install-policy {client} {}", format_policy(policy))
                }
                Action::RemovePolicy { client, target } => {
                    format!("remove-policy {client} {target}")
                }
                Action::FailBroker { broker } => format!("fail-broker {broker}"),
                Action::DepartClient { client } => format!("depart-client {client}"),
                Action::HeartbeatTick => "heartbeat-tick".to_string(),
            };
            format!("{} {}", ev.time, body)
        })
        .collect()
}
