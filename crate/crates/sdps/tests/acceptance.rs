//! Acceptance suite: one test per verification criterion, each printing a
//! pass line (run with `--nocapture` to see them). Every tolerance is
//! pinned here; delivery comparisons are exact.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use sdps::client::Client;
use sdps::daemon::{spawn_broker, spawn_controller};
use sdps::gen::{generate_scenario, random_message, GenParams, Rng};
use sdps_core::message::ControllerConfig;
use sdps_core::model::{
    eval_predicate, filters_intersect, format_publication, match_filter, parse_filter,
    parse_publication, ClientId, ClientRole, Filter, MessageId, Predicate, Value,
};
use sdps_core::policy::parse_policy;
use sdps_core::routing::{Forwarding, Strategy};
use sdps_core::sim::{
    load_scenario, oracle_deliveries, oracle_fired_keys, oracle_generated, run, RunConfig,
};

fn config(strategy: Strategy, forwarding: Forwarding) -> RunConfig {
    RunConfig {
        controller: ControllerConfig {
            strategy,
            forwarding,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn pass(criterion: &str, detail: String) {
    println!("acceptance: {criterion}: PASS ({detail})");
}

/// Criterion 1 — 500 randomized scenarios: the simulator's delivered set
/// equals the centralized oracle exactly; total runtime under 60 s.
#[test]
fn c1_delivery_oracle_equivalence() {
    let started = Instant::now();
    let mut total_deliveries = 0u64;
    for seed in 0..500u64 {
        let params = GenParams {
            with_policies: seed % 2 == 0,
            with_pub_policies: seed % 4 == 0,
            with_metadata_churn: seed % 3 == 0,
            with_retractions: true,
            publications: 30 + (seed % 6) * 34, // up to 200
            max_brokers: 2 + seed % 11,         // up to 12
            ..Default::default()
        };
        let events = generate_scenario(seed, &params);
        let report = run(
            &events,
            config(Strategy::PolicyFlood, Forwarding::AdvertisementBased),
        );
        let expected = oracle_deliveries(&report.trace);
        assert_eq!(
            report.delivered, expected,
            "seed {seed}: simulator and oracle disagree; diags={:?}",
            report.diags
        );
        total_deliveries += report.delivered.len() as u64;
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    pass(
        "criterion 1 (delivery oracle equivalence)",
        format!("500 scenarios, {total_deliveries} deliveries, {elapsed:?}"),
    );
}

/// Criterion 2 — advertisement-based and rendezvous forwarding yield
/// identical delivered sets on 100 randomized scenarios.
#[test]
fn c2_forwarding_mode_equivalence() {
    let mut compared = 0u64;
    for seed in 1000..1100u64 {
        let params = GenParams {
            with_policies: seed % 2 == 0,
            with_sub_state_conditions: seed % 4 == 0,
            with_metadata_churn: seed % 3 == 0,
            publications: 40,
            ..Default::default()
        };
        let events = generate_scenario(seed, &params);
        let adv = run(
            &events,
            config(Strategy::PolicyFlood, Forwarding::AdvertisementBased),
        );
        let rzv = run(
            &events,
            config(Strategy::PolicyFlood, Forwarding::Rendezvous),
        );
        assert_eq!(
            adv.delivered, rzv.delivered,
            "seed {seed}: forwarding modes disagree; adv_diags={:?} rzv_diags={:?}",
            adv.diags, rzv.diags
        );
        assert_eq!(adv.delivered, oracle_deliveries(&adv.trace), "seed {seed}");
        compared += adv.delivered.len() as u64;
    }
    pass(
        "criterion 2 (forwarding-mode equivalence)",
        format!("100 scenarios, {compared} deliveries each side"),
    );
}

/// Criterion 3 — the three control-routing strategies yield identical
/// generated entries and deliveries on 100 policy scenarios, and the quorum
/// property holds at quiescence in every run.
#[test]
fn c3_control_routing_transparency() {
    let strategies = [
        Strategy::MetadataFlood,
        Strategy::PolicyFlood,
        Strategy::Rendezvous,
    ];
    let mut runs = 0u64;
    for seed in 2000..2100u64 {
        let params = GenParams {
            with_policies: true,
            with_pub_policies: seed % 3 == 0,
            with_ad_state_conditions: seed % 2 == 0,
            with_metadata_churn: seed % 2 == 1,
            publications: 30,
            max_brokers: 2 + seed % 9,
            ..Default::default()
        };
        let events = generate_scenario(seed, &params);
        let reports: Vec<_> = strategies
            .iter()
            .map(|s| run(&events, config(*s, Forwarding::AdvertisementBased)))
            .collect();
        let expected_gen = oracle_generated(&reports[0].trace);
        for (s, r) in strategies.iter().zip(&reports) {
            assert!(r.quorum_ok, "seed {seed} strategy {s:?}: quorum violated");
            assert_eq!(
                r.delivered, reports[0].delivered,
                "seed {seed} strategy {s:?}: deliveries diverge; diags={:?}",
                r.diags
            );
            assert_eq!(
                r.generated, expected_gen,
                "seed {seed} strategy {s:?}: generated entries diverge"
            );
            runs += 1;
        }
        assert_eq!(
            reports[0].delivered,
            oracle_deliveries(&reports[0].trace),
            "seed {seed}"
        );
    }
    pass(
        "criterion 3 (control-routing transparency)",
        format!("{runs} strategy runs"),
    );
}

/// Criterion 4 — per (policy, target, metadata version), the firing count
/// is exactly 1 under every strategy.
#[test]
fn c4_exactly_once_policy_firing() {
    let mut checked = 0u64;
    for seed in 3000..3040u64 {
        let params = GenParams {
            with_policies: true,
            with_metadata_churn: true,
            publications: 20,
            ..Default::default()
        };
        let events = generate_scenario(seed, &params);
        for strategy in [
            Strategy::MetadataFlood,
            Strategy::PolicyFlood,
            Strategy::Rendezvous,
        ] {
            let report = run(&events, config(strategy, Forwarding::AdvertisementBased));
            let expected: BTreeSet<(MessageId, ClientId, u64)> = oracle_fired_keys(&report.trace);
            let got: BTreeSet<(MessageId, ClientId, u64)> =
                report.metrics.firing_counts.keys().copied().collect();
            assert_eq!(
                got, expected,
                "seed {seed} strategy {strategy:?}: fired key sets differ"
            );
            for (key, count) in &report.metrics.firing_counts {
                assert_eq!(
                    *count, 1,
                    "seed {seed} strategy {strategy:?}: {key:?} fired {count}x"
                );
            }
            checked += report.metrics.firing_counts.len() as u64;
        }
    }
    pass(
        "criterion 4 (exactly-once policy firing)",
        format!("{checked} firings checked"),
    );
}

/// Criterion 5 — a location-style parametric policy over 50 metadata
/// updates keeps exactly one live generated subscription per target at
/// every quiescent point, and each delivery window matches the then-current
/// metadata.
#[test]
fn c5_parametric_replacement() {
    let areas = ["north", "south", "east"];
    let mut lines = vec![
        "0 join-broker".to_string(),
        "0 join-broker".to_string(),
        "0 join-broker".to_string(),
        "4 join-client consumer".to_string(),
        "4 join-client im".to_string(),
        "4 join-client producer".to_string(),
        "8 advertise p6 [area,present],[price,present]".to_string(),
        "12 install-policy m5 POLICY id=1 owner=m5 target=consumer WHEN [meta.area,present] DO insert_sub [area,=,'$meta.area']".to_string(),
    ];
    let mut t = 80u64;
    let mut checkpoints = Vec::new();
    for i in 0..50u64 {
        let area = areas[(i % 3) as usize];
        lines.push(format!("{t} metadata c4 [meta.area,'{area}']"));
        t += 64; // settle
        checkpoints.push(t - 1);
        for probe in areas {
            lines.push(format!("{t} publish p6 [area,'{probe}'],[price,{i}]"));
            t += 2;
        }
        t += 8;
    }
    let text = lines.join("\n");
    let events = load_scenario(&text).unwrap();
    let mut cfg = config(Strategy::PolicyFlood, Forwarding::AdvertisementBased);
    cfg.checkpoints = checkpoints;
    let report = run(&events, cfg);

    let expected = oracle_deliveries(&report.trace);
    assert_eq!(
        report.delivered, expected,
        "window deliveries track current metadata"
    );
    // 50 windows, one matching publication each.
    assert_eq!(report.delivered.len(), 50);
    for (tick, counts) in &report.checkpoint_generations {
        assert_eq!(
            counts.len(),
            1,
            "t={tick}: exactly one (policy,target) generation"
        );
        for ((_, target), n) in counts {
            assert_eq!(
                *n, 1,
                "t={tick}: one live generated subscription for {target}"
            );
        }
    }
    assert_eq!(report.checkpoint_generations.len(), 50);
    pass(
        "criterion 5 (parametric replacement)",
        format!("50 metadata updates, {} deliveries", report.delivered.len()),
    );
}

/// Criterion 6 — single-broker failure in 50 randomized scenarios:
/// post-repair tree connectivity, orphaned clients re-bootstrapped, and
/// post-repair deliveries matching the oracle suffix.
#[test]
fn c6_failure_recovery() {
    let mut windows = 0usize;
    for seed in 4000..4050u64 {
        let params = GenParams {
            with_policies: seed % 2 == 0,
            with_failure: true,
            publications: 36,
            max_brokers: 3 + seed % 10,
            ..Default::default()
        };
        let events = generate_scenario(seed, &params);
        let forwarding = if seed % 2 == 0 {
            Forwarding::AdvertisementBased
        } else {
            Forwarding::Rendezvous
        };
        let report = run(&events, config(Strategy::PolicyFlood, forwarding));
        assert!(report.tree_connected, "seed {seed}: tree not reconnected");
        assert!(
            report.all_clients_attached,
            "seed {seed}: orphaned client left behind"
        );
        let expected = report.filter_comparable(&oracle_deliveries(&report.trace));
        let got = report.delivered_comparable();
        assert_eq!(
            got, expected,
            "seed {seed} ({forwarding:?}): post-repair deliveries diverge; windows={:?} diags={:?}",
            report.exclusion_windows, report.diags
        );
        windows += report.exclusion_windows.len();
    }
    pass(
        "criterion 6 (failure recovery)",
        format!("50 scenarios, {windows} repair windows"),
    );
}

/// Criterion 7 — unadvertised publications: drop mode yields zero
/// deliveries and zero feedback; feedback mode yields exactly one feedback
/// per offending publish. Exhaustive 20-case grid.
#[test]
fn c7_unadvertised_publications() {
    let cases: Vec<(bool, u64)> = (0..10)
        .map(|i| (false, i))
        .chain((0..10).map(|i| (true, i)))
        .collect();
    assert_eq!(cases.len(), 20);
    for (feedback, variant) in cases {
        let offenders = 1 + variant % 4;
        let inside = variant % 3;
        let mut lines = vec![
            "0 join-broker".to_string(),
            "0 join-broker".to_string(),
            format!(
                "4 join-client producer{}",
                if feedback { " feedback" } else { "" }
            ),
            "4 join-client consumer".to_string(),
            format!("8 advertise p3 [price,<,{}]", 50 + variant),
            "9 subscribe c4 [price,present]".to_string(),
        ];
        let mut t = 80;
        for i in 0..offenders {
            lines.push(format!("{t} publish p3 [price,{}]", 100 + i)); // outside
            t += 4;
        }
        for i in 0..inside {
            lines.push(format!("{t} publish p3 [price,{i}]")); // inside
            t += 4;
        }
        let events = load_scenario(&lines.join("\n")).unwrap();
        let report = run(
            &events,
            config(Strategy::PolicyFlood, Forwarding::AdvertisementBased),
        );
        assert_eq!(
            report.delivered.len() as u64,
            inside,
            "only advertised publications deliver"
        );
        if feedback {
            assert_eq!(
                report.metrics.feedbacks, offenders,
                "one feedback per offending publish (variant {variant})"
            );
        } else {
            assert_eq!(
                report.metrics.feedbacks, 0,
                "drop mode is silent (variant {variant})"
            );
        }
        assert_eq!(report.delivered, oracle_deliveries(&report.trace));
    }
    pass(
        "criterion 7 (unadvertised publications)",
        "20-case grid".to_string(),
    );
}

/// Criterion 8 — wire protocol: encode/decode round-trip identity on 10^4
/// generated messages, and simulator/daemon parity on scenario S1 plus two
/// policy scenarios over localhost.
#[test]
fn c8_wire_protocol_and_daemon_parity() {
    let mut rng = Rng::new(0x817e);
    let mut count = 0;
    for _ in 0..10_000 {
        let msg = random_message(&mut rng);
        let line = sdps_core::wire::encode_message(&msg);
        let back = sdps_core::wire::decode_message(&line)
            .unwrap_or_else(|e| panic!("decode failed: {e}\nline: {line}"));
        assert_eq!(back, msg, "round trip mismatch for {line}");
        count += 1;
    }

    // Parity: the daemon cluster reproduces the simulator's delivered
    // multisets for S1 and two policy scenarios.
    let parity = [s1_parity, country_parity, parametric_parity];
    for (i, scenario) in parity.iter().enumerate() {
        let started = Instant::now();
        scenario();
        let elapsed = started.elapsed();
        assert!(
            elapsed < Duration::from_secs(10),
            "parity scenario {i} took {elapsed:?}"
        );
    }
    pass(
        "criterion 8 (wire protocol + daemon parity)",
        format!("{count} messages, 3 scenarios"),
    );
}

/// Criterion 9 — core algebra against brute-force oracles, 10^4 random
/// instances each.
#[test]
fn c9_core_algebra_oracles() {
    let mut rng = Rng::new(0xa1_9e_b4);
    // filters_intersect vs the probe-grid oracle.
    for i in 0..10_000 {
        let a = random_small_filter(&mut rng);
        let b = random_small_filter(&mut rng);
        assert_eq!(
            filters_intersect(&a, &b),
            probe_intersects(&a, &b),
            "case {i}: {a} vs {b}"
        );
    }
    // match_publication vs a linear scan.
    use sdps_core::matching::{Entry, EntryKind, EntryStore};
    for i in 0..10_000 {
        let mut store = EntryStore::new();
        let mut all = Vec::new();
        for n in 0..rng.range(0, 20) {
            let c = ClientId {
                role: ClientRole::Consumer,
                num: 1 + n % 5,
            };
            let e = Entry::new(
                MessageId::new(c, i * 100 + n),
                c,
                EntryKind::Subscription,
                random_small_filter(&mut rng),
            );
            store.insert(e.clone()).unwrap();
            all.push(e);
        }
        let p = random_small_publication(&mut rng);
        let got: BTreeSet<MessageId> = store.match_publication(&p).iter().map(|e| e.id).collect();
        let want: BTreeSet<MessageId> = all
            .iter()
            .filter(|e| match_filter(&e.filter, &p))
            .map(|e| e.id)
            .collect();
        assert_eq!(got, want, "case {i}: {p}");
    }
    pass(
        "criterion 9 (core algebra oracles)",
        "2 x 10^4 instances".to_string(),
    );
}

// ---------------------------------------------------------------------------
// Probe-grid oracle (independent of filters_intersect): per attribute,
// some candidate value must satisfy every predicate from both filters.
// Candidates: the numeric constants, midpoints of adjacent constants, one
// value beyond each extreme, the text constants, and a fresh text.
// ---------------------------------------------------------------------------

fn probe_intersects(a: &Filter, b: &Filter) -> bool {
    let mut attrs: Vec<&str> = a.attributes().chain(b.attributes()).collect();
    attrs.sort();
    attrs.dedup();
    attrs.into_iter().all(|attr| {
        let preds: Vec<&Predicate> = a
            .predicates()
            .iter()
            .chain(b.predicates().iter())
            .filter(|p| p.attribute() == attr)
            .collect();
        probe_candidates(&preds)
            .iter()
            .any(|v| preds.iter().all(|p| eval_predicate(p, Some(v))))
    })
}

fn probe_candidates(preds: &[&Predicate]) -> Vec<Value> {
    let mut nums: Vec<f64> = preds
        .iter()
        .filter_map(|p| p.value().and_then(|v| v.as_number()))
        .collect();
    nums.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nums.dedup();
    let mut texts: Vec<&str> = preds
        .iter()
        .filter_map(|p| p.value().and_then(|v| v.as_text()))
        .collect();
    texts.sort();
    texts.dedup();
    let mut out = Vec::new();
    if let (Some(first), Some(last)) = (nums.first(), nums.last()) {
        out.push(Value::number(first - 1.0).unwrap());
        out.push(Value::number(last + 1.0).unwrap());
    }
    for w in nums.windows(2) {
        out.push(Value::number((w[0] + w[1]) / 2.0).unwrap());
    }
    for n in &nums {
        out.push(Value::number(*n).unwrap());
    }
    if nums.is_empty() {
        out.push(Value::number(0.0).unwrap());
    }
    let fresh: String = "~".repeat(texts.iter().map(|t| t.len()).max().unwrap_or(0) + 1);
    out.push(Value::text(fresh));
    for t in texts {
        out.push(Value::text(t));
    }
    out
}

fn random_small_filter(rng: &mut Rng) -> Filter {
    let attrs = ["a", "b", "c"];
    let texts = ["x", "y", "zz"];
    let n = rng.range(1, 4);
    let mut parts = Vec::new();
    for _ in 0..n {
        let attr = rng.pick(&attrs);
        let part = match rng.below(8) {
            0 => format!("[{attr},present]"),
            1 => format!("[{attr},=,'{}']", rng.pick(&texts)),
            2 => format!("[{attr},!=,'{}']", rng.pick(&texts)),
            3 => format!("[{attr},=,{}]", rng.range(0, 12) as f64 / 2.0),
            4 => format!("[{attr},!=,{}]", rng.range(0, 12) as f64 / 2.0),
            5 => format!("[{attr},<,{}]", rng.range(0, 12) as f64 / 2.0),
            6 => format!("[{attr},<=,{}]", rng.range(0, 12) as f64 / 2.0),
            _ => {
                if rng.chance(50) {
                    format!("[{attr},>,{}]", rng.range(0, 12) as f64 / 2.0)
                } else {
                    format!("[{attr},>=,{}]", rng.range(0, 12) as f64 / 2.0)
                }
            }
        };
        parts.push(part);
    }
    parse_filter(&parts.join(",")).unwrap()
}

fn random_small_publication(rng: &mut Rng) -> sdps_core::model::Publication {
    let attrs = ["a", "b", "c"];
    let texts = ["x", "y", "zz"];
    let mut parts = Vec::new();
    for attr in attrs {
        if rng.chance(70) {
            if rng.chance(50) {
                parts.push(format!("[{attr},{}]", rng.range(0, 12) as f64 / 2.0));
            } else {
                parts.push(format!("[{attr},'{}']", rng.pick(&texts)));
            }
        }
    }
    if parts.is_empty() {
        parts.push("[a,1]".to_string());
    }
    parse_publication(&parts.join(",")).unwrap()
}

// ---------------------------------------------------------------------------
// Daemon parity scenarios (criterion 8)
// ---------------------------------------------------------------------------

const TICK: Duration = Duration::from_millis(40);
const SETTLE: Duration = Duration::from_millis(500);

struct Cluster {
    controller: sdps::daemon::DaemonHandle,
    brokers: Vec<sdps::daemon::DaemonHandle>,
}

impl Cluster {
    fn start(n: usize) -> Cluster {
        let cfg = ControllerConfig {
            strategy: Strategy::PolicyFlood,
            forwarding: Forwarding::AdvertisementBased,
            ..Default::default()
        };
        let controller = spawn_controller("127.0.0.1:0", cfg, TICK).expect("controller");
        let ctl = controller.addr.to_string();
        let mut brokers = Vec::new();
        for _ in 0..n {
            brokers.push(spawn_broker(&ctl, "127.0.0.1:0").expect("broker"));
            std::thread::sleep(Duration::from_millis(50));
        }
        std::thread::sleep(SETTLE);
        Cluster {
            controller,
            brokers,
        }
    }

    fn stop(self) {
        for b in self.brokers {
            b.stop();
        }
        self.controller.stop();
    }
}

/// The simulator's S1 delivered multiset, reproduced over TCP.
fn s1_parity() {
    // Simulator side.
    let text = "\
0 join-broker
0 join-broker
0 join-broker
5 join-client producer
5 join-client consumer
10 advertise p4 [price,<,100]
30 subscribe c5 [price,<,50]
60 publish p4 [price,10]
62 publish p4 [price,35]
64 publish p4 [price,60]
66 publish p4 [price,49]
68 publish p4 [price,100]
";
    let events = load_scenario(text).unwrap();
    let sim = run(
        &events,
        config(Strategy::PolicyFlood, Forwarding::AdvertisementBased),
    );
    let sim_pubs: Vec<String> = sim
        .log
        .iter()
        .map(|r| format_publication(&r.publication))
        .collect();

    // Daemon side.
    let cluster = Cluster::start(3);
    let ctl = cluster.controller.addr.to_string();
    let mut producer = Client::connect(&ctl, ClientRole::Producer, false).unwrap();
    let mut consumer = Client::connect(&ctl, ClientRole::Consumer, false).unwrap();
    producer
        .advertise(parse_filter("[price,<,100]").unwrap())
        .unwrap();
    consumer
        .subscribe(parse_filter("[price,<,50]").unwrap())
        .unwrap();
    std::thread::sleep(SETTLE);
    for price in [10, 35, 60, 49, 100] {
        producer
            .publish(parse_publication(&format!("[price,{price}]")).unwrap())
            .unwrap();
        std::thread::sleep(Duration::from_millis(25));
    }
    let deliveries = consumer.recv_deliveries(sim_pubs.len(), Duration::from_secs(5));
    let got: Vec<String> = deliveries
        .iter()
        .map(|d| format_publication(&d.publication))
        .collect();
    assert_eq!(got, sim_pubs, "daemon parity with simulator on S1");
    cluster.stop();
}

fn country_parity() {
    let text = "\
0 join-broker
0 join-broker
5 join-client producer
5 join-client advertiser
5 join-client consumer
20 metadata p3 [meta.country,'Norway']
30 subscribe c5 [topic,=,'Norway']
40 install-policy a4 POLICY id=1 owner=a4 target=producer WHEN [meta.country,present] DO insert_ad [topic,=,'$meta.country']
80 publish p3 [topic,'Norway']
";
    let events = load_scenario(text).unwrap();
    let sim = run(
        &events,
        config(Strategy::PolicyFlood, Forwarding::AdvertisementBased),
    );
    let sim_pubs: Vec<String> = sim
        .log
        .iter()
        .map(|r| format_publication(&r.publication))
        .collect();
    assert_eq!(sim_pubs.len(), 1);

    let cluster = Cluster::start(2);
    let ctl = cluster.controller.addr.to_string();
    let mut producer = Client::connect(&ctl, ClientRole::Producer, false).unwrap();
    let mut advertiser = Client::connect(&ctl, ClientRole::Advertiser, false).unwrap();
    let mut consumer = Client::connect(&ctl, ClientRole::Consumer, false).unwrap();
    producer
        .set_metadata(parse_publication("[meta.country,'Norway']").unwrap())
        .unwrap();
    consumer
        .subscribe(parse_filter("[topic,=,'Norway']").unwrap())
        .unwrap();
    std::thread::sleep(SETTLE);
    let text = format!(
        "POLICY id=1 owner={} target=producer WHEN [meta.country,present] DO insert_ad [topic,=,'$meta.country']",
        advertiser.id
    );
    advertiser
        .install_policy(parse_policy(&text).unwrap())
        .unwrap();
    std::thread::sleep(SETTLE);
    producer
        .publish(parse_publication("[topic,'Norway']").unwrap())
        .unwrap();
    let deliveries = consumer.recv_deliveries(1, Duration::from_secs(5));
    let got: Vec<String> = deliveries
        .iter()
        .map(|d| format_publication(&d.publication))
        .collect();
    assert_eq!(
        got, sim_pubs,
        "daemon parity with simulator on the country policy"
    );
    cluster.stop();
}

fn parametric_parity() {
    let text = "\
0 join-broker
0 join-broker
5 join-client consumer
5 join-client im
5 join-client producer
10 advertise p5 [area,present]
20 install-policy m4 POLICY id=1 owner=m4 target=consumer WHEN [meta.area,present] DO insert_sub [area,=,'$meta.area']
40 metadata c3 [meta.area,'north']
100 publish p5 [area,'north']
102 publish p5 [area,'south']
160 metadata c3 [meta.area,'south']
220 publish p5 [area,'north']
222 publish p5 [area,'south']
";
    let events = load_scenario(text).unwrap();
    let sim = run(
        &events,
        config(Strategy::PolicyFlood, Forwarding::AdvertisementBased),
    );
    let sim_pubs: Vec<String> = sim
        .log
        .iter()
        .map(|r| format_publication(&r.publication))
        .collect();
    assert_eq!(sim_pubs, vec!["[area,'north']", "[area,'south']"]);

    let cluster = Cluster::start(2);
    let ctl = cluster.controller.addr.to_string();
    let mut producer = Client::connect(&ctl, ClientRole::Producer, false).unwrap();
    let mut im = Client::connect(&ctl, ClientRole::InterestManager, false).unwrap();
    let mut consumer = Client::connect(&ctl, ClientRole::Consumer, false).unwrap();
    producer
        .advertise(parse_filter("[area,present]").unwrap())
        .unwrap();
    consumer
        .set_metadata(parse_publication("[meta.area,'north']").unwrap())
        .unwrap();
    std::thread::sleep(SETTLE);
    let text = format!(
        "POLICY id=1 owner={} target=consumer WHEN [meta.area,present] DO insert_sub [area,=,'$meta.area']",
        im.id
    );
    im.install_policy(parse_policy(&text).unwrap()).unwrap();
    std::thread::sleep(SETTLE);
    producer
        .publish(parse_publication("[area,'north']").unwrap())
        .unwrap();
    producer
        .publish(parse_publication("[area,'south']").unwrap())
        .unwrap();
    let mut got: Vec<String> = consumer
        .recv_deliveries(1, Duration::from_secs(5))
        .iter()
        .map(|d| format_publication(&d.publication))
        .collect();
    consumer
        .set_metadata(parse_publication("[meta.area,'south']").unwrap())
        .unwrap();
    std::thread::sleep(SETTLE);
    producer
        .publish(parse_publication("[area,'north']").unwrap())
        .unwrap();
    producer
        .publish(parse_publication("[area,'south']").unwrap())
        .unwrap();
    got.extend(
        consumer
            .recv_deliveries(1, Duration::from_secs(5))
            .iter()
            .map(|d| format_publication(&d.publication)),
    );
    assert_eq!(
        got, sim_pubs,
        "daemon parity with simulator on the parametric policy"
    );
    cluster.stop();
}
