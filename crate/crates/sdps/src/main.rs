//! `sdps` — content-based publish/subscribe overlay with a centralized
//! controller.
//!
//! Exit codes: 0 ok, 1 usage, 2 connectivity, 3 scenario/verification
//! failure. Log level via `SDPS_LOG` (error|warn|info|debug).

use std::process::ExitCode;
use std::time::Duration;

use sdps::client::Client;
use sdps::gen::{generate_scenario, GenParams};
use sdps::{daemon, logger};
use sdps_core::message::ControllerConfig;
use sdps_core::model::{parse_filter, parse_publication, ClientRole};
use sdps_core::policy::parse_policy;
use sdps_core::routing::{Forwarding, Strategy};
use sdps_core::sim::{
    load_scenario, oracle_deliveries, render_delivery_log, render_metrics, run, RunConfig,
};

fn usage() -> ExitCode {
    eprintln!(
        "usage:
  sdps sim run <scenario> [--control-routing metadata-flood|policy-flood|rendezvous]
               [--forwarding adv|rendezvous] [--seed N] [--metrics] [--check]
  sdps sim gen [--seed N] [--policies] [--pubs N]
  sdps controller --listen H:P [--control-routing S] [--forwarding F] [--tick-ms N] [--degree N]
  sdps broker --controller H:P --listen H:P
  sdps client producer --controller H:P [--feedback] [--meta PUB] [--advertise F]... [--publish P]...
  sdps client consumer --controller H:P [--meta PUB] --subscribe F [--expect N] [--timeout-ms N]
  sdps client advertiser|im --controller H:P --policy FILE
  sdps client meta --controller H:P [--role producer|consumer] --set PUB"
    );
    ExitCode::from(1)
}

struct Args {
    tokens: Vec<String>,
    pos: usize,
}

impl Args {
    fn next(&mut self) -> Option<String> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    /// Every occurrence of `--flag VALUE`, in order.
    fn values(&self, flag: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut i = self.pos;
        while i < self.tokens.len() {
            if self.tokens[i] == flag {
                if let Some(v) = self.tokens.get(i + 1) {
                    out.push(v.clone());
                }
                i += 2;
            } else {
                i += 1;
            }
        }
        out
    }

    fn value(&self, flag: &str) -> Option<String> {
        self.values(flag).into_iter().next()
    }

    fn has(&self, flag: &str) -> bool {
        self.tokens[self.pos..].iter().any(|t| t == flag)
    }
}

fn main() -> ExitCode {
    let tokens: Vec<String> = std::env::args().skip(1).collect();
    let mut args = Args { tokens, pos: 0 };
    match args.next().as_deref() {
        Some("sim") => cmd_sim(args),
        Some("controller") => cmd_controller(args),
        Some("broker") => cmd_broker(args),
        Some("client") => cmd_client(args),
        _ => usage(),
    }
}

fn parse_routing(args: &Args) -> Result<(Strategy, Forwarding), ExitCode> {
    let strategy = match args.value("--control-routing") {
        Some(s) => Strategy::parse(&s).ok_or_else(|| {
            eprintln!("unknown control-routing strategy `{s}`");
            ExitCode::from(1)
        })?,
        None => Strategy::PolicyFlood,
    };
    let forwarding = match args.value("--forwarding") {
        Some(s) => Forwarding::parse(&s).ok_or_else(|| {
            eprintln!("unknown forwarding mode `{s}`");
            ExitCode::from(1)
        })?,
        None => Forwarding::AdvertisementBased,
    };
    Ok((strategy, forwarding))
}

fn cmd_sim(mut args: Args) -> ExitCode {
    match args.next().as_deref() {
        Some("run") => {}
        Some("gen") => {
            let seed = args
                .value("--seed")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            let params = GenParams {
                with_policies: args.has("--policies"),
                publications: args
                    .value("--pubs")
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(40),
                ..Default::default()
            };
            for line in sdps::gen::render_scenario(&generate_scenario(seed, &params)) {
                println!("{line}");
            }
            return ExitCode::SUCCESS;
        }
        _ => return usage(),
    }
    let Some(path) = args.next() else {
        return usage();
    };
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {path}: {e}");
            return ExitCode::from(1);
        }
    };
    let events = match load_scenario(&text) {
        Ok(ev) => ev,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(3);
        }
    };
    let (strategy, forwarding) = match parse_routing(&args) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let seed = args
        .value("--seed")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let cfg = RunConfig {
        controller: ControllerConfig {
            strategy,
            forwarding,
            ..Default::default()
        },
        seed,
        ..Default::default()
    };
    let report = run(&events, cfg);
    print!("{}", render_delivery_log(&report.log));
    if args.has("--metrics") {
        print!("{}", render_metrics(&report.metrics));
    }
    if args.has("--check") {
        let expected = report.filter_comparable(&oracle_deliveries(&report.trace));
        let got = report.delivered_comparable();
        if got != expected {
            eprintln!("oracle mismatch: got {got:?}, expected {expected:?}");
            return ExitCode::from(3);
        }
        eprintln!("oracle check: ok ({} deliveries)", report.delivered.len());
    }
    ExitCode::SUCCESS
}

fn cmd_controller(args: Args) -> ExitCode {
    let Some(listen) = args.value("--listen") else {
        return usage();
    };
    let (strategy, forwarding) = match parse_routing(&args) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let tick = args
        .value("--tick-ms")
        .and_then(|s| s.parse().ok())
        .unwrap_or(100);
    let degree = args
        .value("--degree")
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let cfg = ControllerConfig {
        strategy,
        forwarding,
        max_degree: degree,
        ..Default::default()
    };
    match daemon::spawn_controller(&listen, cfg, Duration::from_millis(tick)) {
        Ok(handle) => {
            logger::info("controller", &format!("listening on {}", handle.addr));
            loop {
                std::thread::sleep(Duration::from_secs(3600));
            }
        }
        Err(e) => {
            eprintln!("cannot bind {listen}: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_broker(args: Args) -> ExitCode {
    let (Some(controller), Some(listen)) = (args.value("--controller"), args.value("--listen"))
    else {
        return usage();
    };
    match daemon::spawn_broker(&controller, &listen) {
        Ok(handle) => {
            logger::info(
                &handle.node.to_string(),
                &format!("listening on {}", handle.addr),
            );
            loop {
                std::thread::sleep(Duration::from_secs(3600));
            }
        }
        Err(e) => {
            eprintln!("cannot start broker: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_client(mut args: Args) -> ExitCode {
    let Some(role_text) = args.next() else {
        return usage();
    };
    let Some(controller) = args.value("--controller") else {
        return usage();
    };
    let role = match role_text.as_str() {
        "producer" => ClientRole::Producer,
        "consumer" => ClientRole::Consumer,
        "advertiser" => ClientRole::Advertiser,
        "im" => ClientRole::InterestManager,
        "meta" => match args.value("--role").as_deref() {
            Some("consumer") => ClientRole::Consumer,
            _ => ClientRole::Producer,
        },
        _ => return usage(),
    };
    let feedback = args.has("--feedback");
    let mut client = match Client::connect(&controller, role, feedback) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cannot join: {e}");
            return ExitCode::from(2);
        }
    };
    logger::info(
        &client.id.to_string(),
        &format!("attached to {}", client.edge),
    );

    if let Some(md) = args.value("--meta").or_else(|| args.value("--set")) {
        match parse_publication(&md) {
            Ok(attrs) => {
                if client.set_metadata(attrs).is_err() {
                    return ExitCode::from(2);
                }
            }
            Err(e) => {
                eprintln!("bad metadata: {e}");
                return ExitCode::from(1);
            }
        }
    }

    let code = run_client_role(&role_text, &args, &mut client);
    let _ = client.depart();
    code
}

fn run_client_role(role_text: &str, args: &Args, client: &mut Client) -> ExitCode {
    match role_text {
        "producer" => {
            for f in args.values("--advertise") {
                match parse_filter(&f) {
                    Ok(filter) => match client.advertise(filter) {
                        Ok(id) => println!("advertised {id}"),
                        Err(_) => return ExitCode::from(2),
                    },
                    Err(e) => {
                        eprintln!("bad filter: {e}");
                        return ExitCode::from(1);
                    }
                }
            }
            // Let routing state settle before data flows.
            std::thread::sleep(Duration::from_millis(500));
            for p in args.values("--publish") {
                match parse_publication(&p) {
                    Ok(publication) => {
                        match client.publish(publication) {
                            Ok(id) => println!("published {id}"),
                            Err(_) => return ExitCode::from(2),
                        }
                        if args.has("--feedback") {
                            if let Some(fb) = client.recv_feedback(Duration::from_millis(300)) {
                                println!("feedback {fb}");
                            }
                        } else {
                            std::thread::sleep(Duration::from_millis(50));
                        }
                    }
                    Err(e) => {
                        eprintln!("bad publication: {e}");
                        return ExitCode::from(1);
                    }
                }
            }
            ExitCode::SUCCESS
        }
        "consumer" => {
            for f in args.values("--subscribe") {
                match parse_filter(&f) {
                    Ok(filter) => match client.subscribe(filter) {
                        Ok(id) => println!("subscribed {id}"),
                        Err(_) => return ExitCode::from(2),
                    },
                    Err(e) => {
                        eprintln!("bad filter: {e}");
                        return ExitCode::from(1);
                    }
                }
            }
            let expect = args.value("--expect").and_then(|s| s.parse().ok());
            let timeout = args
                .value("--timeout-ms")
                .and_then(|s| s.parse().ok())
                .unwrap_or(10_000);
            let deliveries = client
                .recv_deliveries(expect.unwrap_or(usize::MAX), Duration::from_millis(timeout));
            let n = deliveries.len();
            for d in deliveries {
                println!("{}", d.publication);
            }
            match expect {
                Some(want) if n < want => {
                    eprintln!("expected {want} deliveries, got {n}");
                    ExitCode::from(3)
                }
                _ => ExitCode::SUCCESS,
            }
        }
        "advertiser" | "im" => {
            let Some(path) = args.value("--policy") else {
                return usage();
            };
            let text = match std::fs::read_to_string(&path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot read {path}: {e}");
                    return ExitCode::from(1);
                }
            };
            for line in text
                .lines()
                .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            {
                match parse_policy(line) {
                    Ok(policy) => {
                        if client.install_policy(policy).is_err() {
                            return ExitCode::from(2);
                        }
                        println!("installed policy");
                    }
                    Err(e) => {
                        eprintln!("{e}");
                        return ExitCode::from(1);
                    }
                }
            }
            // Give floods a moment before the connection drops.
            std::thread::sleep(Duration::from_millis(300));
            ExitCode::SUCCESS
        }
        "meta" => {
            std::thread::sleep(Duration::from_millis(200));
            ExitCode::SUCCESS
        }
        _ => usage(),
    }
}
