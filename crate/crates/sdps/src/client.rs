//! Programmatic client: bootstraps against the controller, attaches to the
//! assigned edge broker, and speaks the wire protocol. The CLI subcommands
//! and the daemon parity tests both drive this.

use std::io::BufReader;
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use sdps_core::matching::{Entry, EntryKind};
use sdps_core::message::{BootstrapRequest, Command, Message, Payload};
use sdps_core::model::{ClientId, ClientRole, Filter, MessageId, NodeId, Publication};
use sdps_core::policy::{Metadata, PolicyText};
use sdps_core::wire::{decode_message, encode_message};

use crate::net::{read_line, spawn_reader, ConnId, NetEvent, Writer};

fn invalid(text: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, text.into())
}

/// A connected client.
pub struct Client {
    pub id: ClientId,
    pub edge: sdps_core::model::BrokerId,
    controller_addr: String,
    feedback: bool,
    writer: Writer,
    rx: Receiver<NetEvent>,
    seq: u64,
    md_version: u64,
}

/// One received delivery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub publication_id: MessageId,
    pub matched: MessageId,
    pub publication: Publication,
}

impl Client {
    /// Bootstraps a new identity and attaches to the assigned edge broker.
    /// The controller connection is dropped after the exchange; clients do
    /// not hold one open.
    pub fn connect(
        controller_addr: &str,
        role: ClientRole,
        feedback: bool,
    ) -> std::io::Result<Client> {
        Self::connect_inner(controller_addr, role, feedback, None)
    }

    fn connect_inner(
        controller_addr: &str,
        role: ClientRole,
        feedback: bool,
        existing: Option<ClientId>,
    ) -> std::io::Result<Client> {
        let ctl = TcpStream::connect(controller_addr)?;
        ctl.set_nodelay(true).ok();
        let ctl_writer = Writer::new(ctl.try_clone()?);
        let mut ctl_reader = BufReader::new(ctl);
        let boot = Message::new(
            MessageId::new(NodeId::Controller, 0),
            NodeId::Controller,
            Payload::BootstrapRequest(BootstrapRequest::Client {
                role,
                existing,
                feedback,
            }),
        );
        ctl_writer.send_line(&encode_message(&boot))?;
        let reply =
            decode_message(&read_line(&mut ctl_reader)?).map_err(|e| invalid(e.to_string()))?;
        let reply = match reply.payload {
            Payload::BootstrapReply(r) => r,
            Payload::Error { text } => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::ConnectionRefused,
                    text,
                ))
            }
            other => return Err(invalid(format!("unexpected {:?}", other.kind()))),
        };
        let id = reply
            .id
            .as_client()
            .ok_or_else(|| invalid("not a client id"))?;
        let (edge, edge_addr) = match reply.edge {
            Some((b, Some(addr))) => (b, addr),
            _ => return Err(invalid("bootstrap reply carries no edge address")),
        };

        let stream = TcpStream::connect(&edge_addr)?;
        stream.set_nodelay(true).ok();
        let writer = Writer::new(stream.try_clone()?);
        let (tx, rx) = channel();
        spawn_reader(stream, ConnId(1), tx);
        let mut client = Client {
            id,
            edge,
            controller_addr: controller_addr.to_string(),
            feedback,
            writer,
            rx,
            seq: 0,
            md_version: 0,
        };
        let attach_id = client.next_id();
        client.send(Message::new(
            attach_id,
            id,
            Payload::Attach {
                client: id,
                feedback,
            },
        ))?;
        Ok(client)
    }

    fn next_id(&mut self) -> MessageId {
        self.seq += 1;
        MessageId::new(self.id, self.seq)
    }

    fn send(&self, msg: Message) -> std::io::Result<()> {
        self.writer.send_line(&encode_message(&msg))
    }

    pub fn advertise(&mut self, filter: Filter) -> std::io::Result<MessageId> {
        let id = self.next_id();
        let entry = Entry::new(id, self.id, EntryKind::Advertisement, filter);
        self.send(Message::new(
            id,
            self.id,
            Payload::Advertise { entry, edge: None },
        ))?;
        Ok(id)
    }

    pub fn subscribe(&mut self, filter: Filter) -> std::io::Result<MessageId> {
        let id = self.next_id();
        let entry = Entry::new(id, self.id, EntryKind::Subscription, filter);
        self.send(Message::new(
            id,
            self.id,
            Payload::Subscribe { entry, edge: None },
        ))?;
        Ok(id)
    }

    pub fn unadvertise(&mut self, target: MessageId) -> std::io::Result<()> {
        let id = self.next_id();
        self.send(Message::new(id, self.id, Payload::Unadvertise { target }))
    }

    pub fn unsubscribe(&mut self, target: MessageId) -> std::io::Result<()> {
        let id = self.next_id();
        self.send(Message::new(id, self.id, Payload::Unsubscribe { target }))
    }

    pub fn publish(&mut self, publication: Publication) -> std::io::Result<MessageId> {
        let id = self.next_id();
        self.send(Message::new(id, self.id, Payload::Publish { publication }))?;
        Ok(id)
    }

    pub fn set_metadata(&mut self, attrs: Publication) -> std::io::Result<()> {
        self.md_version += 1;
        let meta = Metadata {
            client: self.id,
            version: self.md_version,
            attrs,
        };
        let id = self.next_id();
        self.send(Message::new(
            id,
            self.id,
            Payload::Metadata { meta, edge: None },
        ))
    }

    pub fn install_policy(&mut self, policy: PolicyText) -> std::io::Result<()> {
        let id = self.next_id();
        self.send(Message::new(
            id,
            self.id,
            Payload::InstallPolicy { policy, edge: None },
        ))
    }

    pub fn remove_policy(&mut self, target: MessageId) -> std::io::Result<()> {
        let id = self.next_id();
        self.send(Message::new(id, self.id, Payload::RemovePolicy { target }))
    }

    /// Announces departure to the edge broker and, best effort, to the
    /// controller.
    pub fn depart(mut self) -> std::io::Result<()> {
        let id = self.next_id();
        self.send(Message::new(
            id,
            self.id,
            Payload::Detach { client: self.id },
        ))?;
        if let Ok(ctl) = TcpStream::connect(&self.controller_addr) {
            let w = Writer::new(ctl);
            let depart = Message::new(
                MessageId::new(self.id, self.seq + 1),
                self.id,
                Payload::Depart { client: self.id },
            );
            let _ = w.send_line(&encode_message(&depart));
        }
        Ok(())
    }

    /// Blocks until `count` deliveries arrive or the deadline passes.
    /// Handles re-home commands transparently by re-bootstrapping.
    pub fn recv_deliveries(&mut self, count: usize, timeout: Duration) -> Vec<Delivery> {
        let deadline = Instant::now() + timeout;
        let mut out = Vec::new();
        while out.len() < count {
            let remaining = match deadline.checked_duration_since(Instant::now()) {
                Some(d) if !d.is_zero() => d,
                _ => break,
            };
            match self.rx.recv_timeout(remaining) {
                Ok(NetEvent::Line(_, line)) => match decode_message(&line) {
                    Ok(msg) => match msg.payload {
                        Payload::Deliver {
                            publication_id,
                            matched,
                            publication,
                            ..
                        } => {
                            out.push(Delivery {
                                publication_id,
                                matched,
                                publication,
                            });
                        }
                        Payload::Command(Command::Rehome { .. }) if self.rehome().is_err() => {
                            break;
                        }
                        _ => {}
                    },
                    Err(e) => crate::logger::warn(&self.id.to_string(), &e.to_string()),
                },
                Ok(_) => {}
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        out
    }

    /// Waits for one feedback message.
    pub fn recv_feedback(&mut self, timeout: Duration) -> Option<Publication> {
        let deadline = Instant::now() + timeout;
        loop {
            let remaining = deadline.checked_duration_since(Instant::now())?;
            match self.rx.recv_timeout(remaining) {
                Ok(NetEvent::Line(_, line)) => {
                    if let Ok(msg) = decode_message(&line) {
                        if let Payload::Feedback { publication } = msg.payload {
                            return Some(publication);
                        }
                    }
                }
                Ok(_) => {}
                Err(_) => return None,
            }
        }
    }

    /// Re-bootstraps with the existing identity after a migration command
    /// or edge failure, re-attaching at the newly assigned edge.
    pub fn rehome(&mut self) -> std::io::Result<()> {
        let fresh = Self::connect_inner(
            &self.controller_addr,
            self.id.role,
            self.feedback,
            Some(self.id),
        )?;
        self.edge = fresh.edge;
        self.writer = fresh.writer;
        self.rx = fresh.rx;
        // Sequence numbers continue; entries must be re-issued by the
        // caller, which knows what it had issued.
        self.seq += fresh.seq;
        Ok(())
    }
}
