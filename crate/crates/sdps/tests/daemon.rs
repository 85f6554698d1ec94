//! Daemon integration: controller and brokers over localhost TCP must
//! reproduce the simulator's delivered sets, survive a broker crash, and
//! honor the connectivity exit path.

use std::collections::BTreeSet;
use std::time::Duration;

use sdps::client::Client;
use sdps::daemon::{spawn_broker, spawn_controller, DaemonHandle};
use sdps_core::message::ControllerConfig;
use sdps_core::model::{format_publication, parse_filter, parse_publication, ClientRole};
use sdps_core::policy::parse_policy;
use sdps_core::routing::{Forwarding, Strategy};

const TICK: Duration = Duration::from_millis(50);
const SETTLE: Duration = Duration::from_millis(600);

struct Cluster {
    controller: DaemonHandle,
    brokers: Vec<DaemonHandle>,
}

impl Cluster {
    fn start(n: usize, strategy: Strategy, forwarding: Forwarding) -> Cluster {
        let cfg = ControllerConfig {
            strategy,
            forwarding,
            ..Default::default()
        };
        let controller = spawn_controller("127.0.0.1:0", cfg, TICK).expect("controller");
        let ctl = controller.addr.to_string();
        let mut brokers = Vec::new();
        for _ in 0..n {
            brokers.push(spawn_broker(&ctl, "127.0.0.1:0").expect("broker"));
            std::thread::sleep(Duration::from_millis(60));
        }
        std::thread::sleep(SETTLE);
        Cluster {
            controller,
            brokers,
        }
    }

    fn ctl(&self) -> String {
        self.controller.addr.to_string()
    }

    fn stop(self) {
        for b in self.brokers {
            b.stop();
        }
        self.controller.stop();
    }
}

/// Scenario S1 over real sockets: prices 10, 35, 49 delivered; 60 misses
/// the subscription; 100 is outside the advertisement.
#[test]
fn s1_parity_over_localhost() {
    let cluster = Cluster::start(3, Strategy::PolicyFlood, Forwarding::AdvertisementBased);
    let ctl = cluster.ctl();

    let mut producer = Client::connect(&ctl, ClientRole::Producer, false).expect("producer");
    let mut consumer = Client::connect(&ctl, ClientRole::Consumer, false).expect("consumer");
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
        std::thread::sleep(Duration::from_millis(30));
    }
    let deliveries = consumer.recv_deliveries(3, Duration::from_secs(5));
    let got: Vec<String> = deliveries
        .iter()
        .map(|d| format_publication(&d.publication))
        .collect();
    assert_eq!(got, vec!["[price,10]", "[price,35]", "[price,49]"]);
    // No extra delivery arrives.
    assert!(consumer
        .recv_deliveries(1, Duration::from_millis(300))
        .is_empty());
    cluster.stop();
}

#[test]
fn rendezvous_parity_over_localhost() {
    let cluster = Cluster::start(3, Strategy::Rendezvous, Forwarding::Rendezvous);
    let ctl = cluster.ctl();
    let mut producer = Client::connect(&ctl, ClientRole::Producer, false).expect("producer");
    let mut consumer = Client::connect(&ctl, ClientRole::Consumer, false).expect("consumer");
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
        std::thread::sleep(Duration::from_millis(30));
    }
    let deliveries = consumer.recv_deliveries(3, Duration::from_secs(5));
    let got: BTreeSet<String> = deliveries
        .iter()
        .map(|d| format_publication(&d.publication))
        .collect();
    let want: BTreeSet<String> = ["[price,10]", "[price,35]", "[price,49]"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    assert_eq!(got, want);
    cluster.stop();
}

/// An advertiser policy generates the producer's advertisement from its
/// metadata; the publication then routes on the generated ad.
#[test]
fn country_policy_parity_over_localhost() {
    let cluster = Cluster::start(2, Strategy::PolicyFlood, Forwarding::AdvertisementBased);
    let ctl = cluster.ctl();

    let mut producer = Client::connect(&ctl, ClientRole::Producer, false).expect("producer");
    let mut advertiser = Client::connect(&ctl, ClientRole::Advertiser, false).expect("advertiser");
    let mut consumer = Client::connect(&ctl, ClientRole::Consumer, false).expect("consumer");

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
    assert_eq!(deliveries.len(), 1);
    assert_eq!(
        format_publication(&deliveries[0].publication),
        "[topic,'Norway']"
    );
    cluster.stop();
}

/// A metadata update replaces the parametric subscription: the old filter
/// stops matching and the new one starts.
#[test]
fn parametric_resubscription_over_localhost() {
    let cluster = Cluster::start(2, Strategy::PolicyFlood, Forwarding::AdvertisementBased);
    let ctl = cluster.ctl();

    let mut producer = Client::connect(&ctl, ClientRole::Producer, false).expect("producer");
    let mut im = Client::connect(&ctl, ClientRole::InterestManager, false).expect("im");
    let mut consumer = Client::connect(&ctl, ClientRole::Consumer, false).expect("consumer");

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
    let first = consumer.recv_deliveries(1, Duration::from_secs(5));
    assert_eq!(first.len(), 1);
    assert_eq!(format_publication(&first[0].publication), "[area,'north']");

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
    let second = consumer.recv_deliveries(1, Duration::from_secs(5));
    assert_eq!(second.len(), 1);
    assert_eq!(format_publication(&second[0].publication), "[area,'south']");
    cluster.stop();
}

/// Killing a broker (no goodbye) triggers heartbeat-silence detection and
/// repair; the orphaned client re-bootstraps and deliveries resume.
#[test]
fn broker_crash_repairs_and_clients_reconnect() {
    let mut cluster = Cluster::start(3, Strategy::PolicyFlood, Forwarding::AdvertisementBased);
    let ctl = cluster.ctl();

    let mut producer = Client::connect(&ctl, ClientRole::Producer, false).expect("producer");
    let mut consumer = Client::connect(&ctl, ClientRole::Consumer, false).expect("consumer");
    producer
        .advertise(parse_filter("[price,present]").unwrap())
        .unwrap();
    let sub_filter = parse_filter("[price,<,50]").unwrap();
    consumer.subscribe(sub_filter.clone()).unwrap();
    std::thread::sleep(SETTLE);
    producer
        .publish(parse_publication("[price,10]").unwrap())
        .unwrap();
    assert_eq!(consumer.recv_deliveries(1, Duration::from_secs(5)).len(), 1);

    // Kill the consumer's edge broker abruptly.
    let edge = consumer.edge;
    let victim = cluster
        .brokers
        .iter()
        .position(|b| b.node.as_broker() == Some(edge))
        .expect("edge broker handle");
    cluster.brokers.remove(victim).stop();

    // Silence threshold is 3 ticks; give detection, repair, and the
    // client re-bootstrap plenty of room.
    std::thread::sleep(Duration::from_millis(800));
    consumer.rehome().expect("re-bootstrap after edge failure");
    consumer.subscribe(sub_filter).unwrap();
    std::thread::sleep(SETTLE);

    producer
        .publish(parse_publication("[price,20]").unwrap())
        .unwrap();
    let post = consumer.recv_deliveries(1, Duration::from_secs(5));
    assert_eq!(post.len(), 1, "delivery after repair");
    assert_eq!(format_publication(&post[0].publication), "[price,20]");
    cluster.stop();
}

/// Startup without a reachable controller retries, then fails (the CLI
/// maps this to exit code 2).
#[test]
fn broker_without_controller_errors_out() {
    let err = spawn_broker("127.0.0.1:9", "127.0.0.1:0");
    assert!(err.is_err());
}
