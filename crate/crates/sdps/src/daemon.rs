//! TCP daemons wrapping the core state machines. The transport is the only
//! substitution point: brokers and the controller run the identical logic
//! the simulator drives in memory.
//!
//! Logical time is counted in heartbeat periods: every daemon owns a ticker
//! thread firing once per period, and the tick counter is the clock handed
//! to the core. Per-connection FIFO comes from TCP plus one reader thread
//! per connection funneling into the single-writer loop.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use sdps_core::broker::{Broker, BrokerOut, Hop};
use sdps_core::controller::{Controller, ControllerOut};
use sdps_core::message::{BootstrapRequest, Command, ControllerConfig, Message, Payload};
use sdps_core::model::{BrokerId, ClientId, NodeId};
use sdps_core::wire::{decode_message, encode_message};

use crate::logger;
use crate::net::{read_line, spawn_reader, spawn_reader_buffered, ConnId, NetEvent, Writer};

/// A running daemon. `stop` halts it abruptly, with no goodbye traffic —
/// indistinguishable from a crash, which is exactly what the failure tests
/// want.
pub struct DaemonHandle {
    pub addr: SocketAddr,
    pub node: NodeId,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl DaemonHandle {
    pub fn stop(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

enum Ev {
    Net(NetEvent),
    Conn(TcpStream),
}

fn spawn_acceptor(listener: TcpListener, tx: Sender<Ev>, shutdown: Arc<AtomicBool>) {
    listener
        .set_nonblocking(true)
        .expect("nonblocking listener");
    thread::spawn(move || {
        while !shutdown.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nodelay(true).ok();
                    if tx.send(Ev::Conn(stream)).is_err() {
                        return;
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(2));
                }
                Err(_) => return,
            }
        }
    });
}

fn spawn_ticker(tx: Sender<Ev>, period: Duration, shutdown: Arc<AtomicBool>) {
    thread::spawn(move || {
        while !shutdown.load(Ordering::SeqCst) {
            thread::sleep(period);
            if tx.send(Ev::Net(NetEvent::Tick)).is_err() {
                return;
            }
        }
    });
}

/// Bridges reader-thread events into the daemon's unified inbox.
fn bridge(tx: Sender<Ev>) -> Sender<NetEvent> {
    let (net_tx, net_rx) = channel::<NetEvent>();
    thread::spawn(move || {
        for ev in net_rx {
            if tx.send(Ev::Net(ev)).is_err() {
                return;
            }
        }
    });
    net_tx
}

// ---------------------------------------------------------------------------
// Controller daemon
// ---------------------------------------------------------------------------

/// Binds and serves the controller: bootstraps joining nodes, collects
/// heartbeats over the brokers' persistent connections, pushes commands,
/// and sweeps for failures once per heartbeat period.
pub fn spawn_controller(
    listen: &str,
    cfg: ControllerConfig,
    tick: Duration,
) -> std::io::Result<DaemonHandle> {
    let listener = TcpListener::bind(listen)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let (tx, rx) = channel();
    spawn_acceptor(listener, tx.clone(), shutdown.clone());
    spawn_ticker(tx.clone(), tick, shutdown.clone());
    let flag = shutdown.clone();
    let thread = thread::spawn(move || controller_loop(cfg, tx, rx, flag));
    Ok(DaemonHandle {
        addr,
        node: NodeId::Controller,
        shutdown,
        thread: Some(thread),
    })
}

fn controller_loop(
    cfg: ControllerConfig,
    tx: Sender<Ev>,
    rx: Receiver<Ev>,
    shutdown: Arc<AtomicBool>,
) {
    let mut controller = Controller::new(cfg);
    let mut writers: HashMap<ConnId, Writer> = HashMap::new();
    let mut broker_conns: HashMap<BrokerId, ConnId> = HashMap::new();
    let mut next_conn = 0u64;
    let mut ticks = 0u64;
    let net_tx = bridge(tx);

    let dispatch = |outs: Vec<ControllerOut>,
                    reply_to: Option<ConnId>,
                    writers: &HashMap<ConnId, Writer>,
                    broker_conns: &mut HashMap<BrokerId, ConnId>| {
        for out in outs {
            match out {
                ControllerOut::Reply(msg) => {
                    if let Payload::BootstrapReply(r) = &msg.payload {
                        if let (NodeId::Broker(b), Some(conn)) = (r.id, reply_to) {
                            broker_conns.insert(b, conn);
                        }
                    }
                    if let Some(conn) = reply_to {
                        if let Some(w) = writers.get(&conn) {
                            let _ = w.send_line(&encode_message(&msg));
                        }
                    }
                }
                ControllerOut::ToBroker(b, msg) => {
                    if let Some(w) = broker_conns.get(&b).and_then(|c| writers.get(c)) {
                        let _ = w.send_line(&encode_message(&msg));
                    } else {
                        logger::debug("controller", &format!("no connection to {}", b));
                    }
                }
                ControllerOut::Diag(text) => logger::info("controller", &text),
            }
        }
    };

    loop {
        if shutdown.load(Ordering::SeqCst) {
            return;
        }
        let ev = match rx.recv_timeout(Duration::from_millis(10)) {
            Ok(ev) => ev,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return,
        };
        match ev {
            Ev::Conn(stream) => {
                next_conn += 1;
                let id = ConnId(next_conn);
                match stream.try_clone() {
                    Ok(clone) => {
                        writers.insert(id, Writer::new(clone));
                        spawn_reader(stream, id, net_tx.clone());
                    }
                    Err(e) => logger::warn("controller", &format!("clone failed: {e}")),
                }
            }
            Ev::Net(NetEvent::Tick) => {
                ticks += 1;
                let outs = controller.sweep(ticks);
                dispatch(outs, None, &writers, &mut broker_conns);
            }
            Ev::Net(NetEvent::Closed(id)) => {
                writers.remove(&id);
                broker_conns.retain(|_, c| *c != id);
            }
            Ev::Net(NetEvent::Line(id, line)) => {
                let msg = match decode_message(&line) {
                    Ok(m) => m,
                    Err(e) => {
                        // Connection-scoped error reply on malformed input.
                        if let Some(w) = writers.get(&id) {
                            let err = Message::new(
                                sdps_core::model::MessageId::new(NodeId::Controller, 0),
                                NodeId::Controller,
                                Payload::Error {
                                    text: e.to_string(),
                                },
                            );
                            let _ = w.send_line(&encode_message(&err));
                        }
                        continue;
                    }
                };
                match msg.payload {
                    Payload::BootstrapRequest(req) => {
                        let outs = controller.handle_bootstrap(req, ticks);
                        dispatch(outs, Some(id), &writers, &mut broker_conns);
                    }
                    Payload::Heartbeat(sample) => {
                        if let Some(b) = msg.from.as_broker() {
                            let outs = controller.handle_heartbeat(b, sample, ticks);
                            dispatch(outs, Some(id), &writers, &mut broker_conns);
                        }
                    }
                    Payload::Depart { client } => {
                        let outs = controller.handle_depart(client);
                        dispatch(outs, Some(id), &writers, &mut broker_conns);
                    }
                    Payload::Error { text } => logger::warn("controller", &text),
                    other => logger::debug(
                        "controller",
                        &format!("ignoring {:?} from {}", other.kind(), msg.from),
                    ),
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Broker daemon
// ---------------------------------------------------------------------------

/// Bootstraps against the controller, connects the overlay, and runs the
/// broker state machine over TCP inboxes. Returns an error if the
/// controller stays unreachable after bounded retries.
pub fn spawn_broker(controller_addr: &str, listen: &str) -> std::io::Result<DaemonHandle> {
    let listener = TcpListener::bind(listen)?;
    let addr = listener.local_addr()?;

    let mut last_err = None;
    let mut ctl_stream = None;
    for _ in 0..10 {
        match TcpStream::connect(controller_addr) {
            Ok(s) => {
                ctl_stream = Some(s);
                break;
            }
            Err(e) => {
                last_err = Some(e);
                thread::sleep(Duration::from_millis(100));
            }
        }
    }
    let ctl_stream = match ctl_stream {
        Some(s) => s,
        None => return Err(last_err.unwrap()),
    };
    ctl_stream.set_nodelay(true).ok();
    let ctl_writer = Writer::new(ctl_stream.try_clone()?);
    let mut ctl_reader = BufReader::new(ctl_stream);

    // Synchronous bootstrap exchange.
    let boot = Message::new(
        sdps_core::model::MessageId::new(NodeId::Controller, 0),
        NodeId::Controller,
        Payload::BootstrapRequest(BootstrapRequest::Broker {
            addr: Some(addr.to_string()),
        }),
    );
    ctl_writer.send_line(&encode_message(&boot))?;
    let line = read_line(&mut ctl_reader)?;
    let reply = decode_message(&line)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let reply = match reply.payload {
        Payload::BootstrapReply(r) => r,
        Payload::Error { text } => {
            return Err(std::io::Error::new(
                std::io::ErrorKind::ConnectionRefused,
                text,
            ))
        }
        other => {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unexpected bootstrap response {:?}", other.kind()),
            ))
        }
    };
    let my_id = reply
        .id
        .as_broker()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "not a broker id"))?;

    let shutdown = Arc::new(AtomicBool::new(false));
    let (tx, rx) = channel();
    spawn_acceptor(listener, tx.clone(), shutdown.clone());
    let tick = Duration::from_millis(100);
    spawn_ticker(tx.clone(), tick, shutdown.clone());

    let flag = shutdown.clone();
    let my_addr = addr.to_string();
    let thread = thread::spawn(move || {
        broker_loop(my_id, my_addr, reply, ctl_writer, ctl_reader, tx, rx, flag);
    });
    Ok(DaemonHandle {
        addr,
        node: NodeId::Broker(my_id),
        shutdown,
        thread: Some(thread),
    })
}

const CTL_CONN: ConnId = ConnId(0);

struct BrokerNet {
    me: BrokerId,
    my_addr: String,
    ctl: Writer,
    addrs: HashMap<BrokerId, String>,
    broker_writers: HashMap<BrokerId, Writer>,
    client_writers: HashMap<ClientId, Writer>,
    conn_nodes: HashMap<ConnId, NodeId>,
    unidentified: HashMap<ConnId, Writer>,
    pending: HashMap<BrokerId, Vec<String>>,
    seq: u64,
}

impl BrokerNet {
    /// Dials a neighbor and identifies ourselves. Only the higher-id side
    /// dials, so exactly one connection exists per tree edge.
    fn maybe_dial(&mut self, b: BrokerId, net_tx: &Sender<NetEvent>) {
        if self.broker_writers.contains_key(&b) || self.me.0 < b.0 {
            return;
        }
        let Some(addr) = self.addrs.get(&b).cloned() else {
            return;
        };
        match TcpStream::connect(&addr) {
            Ok(stream) => {
                stream.set_nodelay(true).ok();
                let writer = match stream.try_clone() {
                    Ok(c) => Writer::new(c),
                    Err(_) => return,
                };
                self.seq += 1;
                let hello = Message::new(
                    sdps_core::model::MessageId::new(NodeId::Broker(self.me), self.seq),
                    NodeId::Broker(self.me),
                    Payload::Hello {
                        addr: Some(self.my_addr.clone()),
                    },
                );
                if writer.send_line(&encode_message(&hello)).is_err() {
                    return;
                }
                self.seq += 1;
                let conn = ConnId(u64::MAX - self.seq);
                self.conn_nodes.insert(conn, NodeId::Broker(b));
                self.broker_writers.insert(b, writer);
                spawn_reader(stream, conn, net_tx.clone());
                self.flush(b);
            }
            Err(e) => logger::debug(&self.me.to_string(), &format!("dial {} failed: {e}", b)),
        }
    }

    fn flush(&mut self, b: BrokerId) {
        let Some(lines) = self.pending.remove(&b) else {
            return;
        };
        if let Some(w) = self.broker_writers.get(&b) {
            for line in lines {
                let _ = w.send_line(&line);
            }
        }
    }

    fn send_broker(&mut self, b: BrokerId, line: String, net_tx: &Sender<NetEvent>) {
        self.maybe_dial(b, net_tx);
        match self.broker_writers.get(&b) {
            Some(w) => {
                if w.send_line(&line).is_err() {
                    self.broker_writers.remove(&b);
                    self.pending.entry(b).or_default().push(line);
                }
            }
            None => self.pending.entry(b).or_default().push(line),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn broker_loop(
    me: BrokerId,
    my_addr: String,
    reply: sdps_core::message::BootstrapReply,
    ctl_writer: Writer,
    ctl_reader: BufReader<TcpStream>,
    tx: Sender<Ev>,
    rx: Receiver<Ev>,
    shutdown: Arc<AtomicBool>,
) {
    let who = me.to_string();
    let mut broker = Broker::new(me, reply.mode, reply.strategy);
    let net_tx = bridge(tx);
    spawn_reader_buffered(ctl_reader, CTL_CONN, net_tx.clone());

    let mut net = BrokerNet {
        me,
        my_addr,
        ctl: ctl_writer,
        addrs: HashMap::new(),
        broker_writers: HashMap::new(),
        client_writers: HashMap::new(),
        conn_nodes: HashMap::new(),
        unidentified: HashMap::new(),
        pending: HashMap::new(),
        seq: 0,
    };

    // Install bootstrap configuration, then connect to the listed
    // neighbors (the joining side has the highest id and dials).
    let mut startup: Vec<BrokerOut> = Vec::new();
    let mk = |payload| {
        Message::directed(
            sdps_core::model::MessageId::new(NodeId::Controller, 0),
            NodeId::Controller,
            me,
            payload,
        )
    };
    startup.extend(
        broker.handle_control(mk(Payload::Command(Command::InstallNextHops(
            reply.next_hops,
        )))),
    );
    for (n, addr) in &reply.neighbors {
        if let Some(a) = addr {
            net.addrs.insert(*n, a.clone());
        }
        startup.extend(
            broker.handle_control(mk(Payload::Command(Command::AddNeighbor(*n, addr.clone())))),
        );
    }
    let mut loopbacks: Vec<Message> = Vec::new();
    dispatch_broker_outs(&who, startup, &mut net, &net_tx, &mut loopbacks);
    for (n, _) in &reply.neighbors {
        net.maybe_dial(*n, &net_tx);
    }

    let mut next_conn = 1u64;
    loop {
        if shutdown.load(Ordering::SeqCst) {
            return;
        }
        while let Some(msg) = loopbacks.pop() {
            let outs = broker.handle(Hop::Neighbor(me), msg);
            dispatch_broker_outs(&who, outs, &mut net, &net_tx, &mut loopbacks);
        }
        let ev = match rx.recv_timeout(Duration::from_millis(10)) {
            Ok(ev) => ev,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return,
        };
        match ev {
            Ev::Conn(stream) => {
                next_conn += 1;
                let id = ConnId(next_conn);
                match stream.try_clone() {
                    Ok(clone) => {
                        net.unidentified.insert(id, Writer::new(clone));
                        spawn_reader(stream, id, net_tx.clone());
                    }
                    Err(e) => logger::warn(&who, &format!("clone failed: {e}")),
                }
            }
            Ev::Net(NetEvent::Tick) => {
                let hb = broker.heartbeat();
                let _ = net.ctl.send_line(&encode_message(&hb));
            }
            Ev::Net(NetEvent::Closed(id)) => {
                if let Some(node) = net.conn_nodes.remove(&id) {
                    match node {
                        NodeId::Broker(b) => {
                            net.broker_writers.remove(&b);
                        }
                        NodeId::Client(c) => {
                            net.client_writers.remove(&c);
                        }
                        NodeId::Controller => {}
                    }
                }
                net.unidentified.remove(&id);
            }
            Ev::Net(NetEvent::Line(id, line)) => {
                let msg = match decode_message(&line) {
                    Ok(m) => m,
                    Err(e) => {
                        logger::warn(&who, &format!("bad line dropped: {e}"));
                        continue;
                    }
                };
                let outs = if id == CTL_CONN {
                    let dial = match &msg.payload {
                        Payload::Command(Command::AddNeighbor(b, addr)) => {
                            if let Some(a) = addr {
                                net.addrs.insert(*b, a.clone());
                            }
                            Some(*b)
                        }
                        _ => None,
                    };
                    let outs = broker.handle_control(msg);
                    if let Some(b) = dial {
                        net.maybe_dial(b, &net_tx);
                    }
                    outs
                } else {
                    match net.conn_nodes.get(&id).copied() {
                        Some(NodeId::Broker(b)) => broker.handle(Hop::Neighbor(b), msg),
                        Some(NodeId::Client(c)) => broker.handle(Hop::Client(c), msg),
                        Some(NodeId::Controller) => broker.handle_control(msg),
                        None => {
                            // First line identifies the peer: brokers say
                            // hello, clients attach.
                            match &msg.payload {
                                Payload::Hello { addr } => {
                                    if let Some(b) = msg.from.as_broker() {
                                        net.conn_nodes.insert(id, NodeId::Broker(b));
                                        if let Some(w) = net.unidentified.remove(&id) {
                                            net.broker_writers.insert(b, w);
                                        }
                                        if let Some(a) = addr {
                                            net.addrs.insert(b, a.clone());
                                        }
                                        net.flush(b);
                                    }
                                    Vec::new()
                                }
                                Payload::Attach { client, .. } => {
                                    let c = *client;
                                    net.conn_nodes.insert(id, NodeId::Client(c));
                                    if let Some(w) = net.unidentified.remove(&id) {
                                        net.client_writers.insert(c, w);
                                    }
                                    broker.handle(Hop::Client(c), msg)
                                }
                                _ => {
                                    logger::warn(
                                        &who,
                                        &format!(
                                            "message from unidentified peer {} dropped",
                                            msg.from
                                        ),
                                    );
                                    Vec::new()
                                }
                            }
                        }
                    }
                };
                dispatch_broker_outs(&who, outs, &mut net, &net_tx, &mut loopbacks);
            }
        }
    }
}

fn dispatch_broker_outs(
    who: &str,
    outs: Vec<BrokerOut>,
    net: &mut BrokerNet,
    net_tx: &Sender<NetEvent>,
    loopbacks: &mut Vec<Message>,
) {
    for out in outs {
        match out {
            BrokerOut::Send { next, msg } => {
                let line = encode_message(&msg);
                match next {
                    Hop::Neighbor(b) => net.send_broker(b, line, net_tx),
                    Hop::Client(c) => {
                        if let Some(w) = net.client_writers.get(&c) {
                            let _ = w.send_line(&line);
                        } else {
                            logger::debug(who, &format!("client {} not connected", c));
                        }
                    }
                }
            }
            BrokerOut::ToController(msg) => {
                let _ = net.ctl.send_line(&encode_message(&msg));
            }
            BrokerOut::Loopback(msg) => loopbacks.push(msg),
            BrokerOut::Diag(text) => logger::info(who, &text),
        }
    }
}
