//! Line-delimited TCP plumbing shared by the daemons: one reader thread per
//! connection funnels lines into the owner's single ordered inbox, and a
//! cloned write handle serializes outbound lines per connection.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex};
use std::thread;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnId(pub u64);

/// Inbox events of a daemon loop.
#[derive(Debug)]
pub enum NetEvent {
    Line(ConnId, String),
    Closed(ConnId),
    Tick,
}

/// Serialized write half of a connection.
#[derive(Clone)]
pub struct Writer {
    inner: Arc<Mutex<TcpStream>>,
}

impl Writer {
    pub fn new(stream: TcpStream) -> Writer {
        Writer {
            inner: Arc::new(Mutex::new(stream)),
        }
    }

    pub fn send_line(&self, line: &str) -> std::io::Result<()> {
        let mut guard = self.inner.lock().unwrap();
        guard.write_all(line.as_bytes())?;
        if !line.ends_with('\n') {
            guard.write_all(b"\n")?;
        }
        guard.flush()
    }
}

/// Spawns the reader thread for one connection. Lines arrive in the inbox
/// in read order, preserving per-connection FIFO.
pub fn spawn_reader(stream: TcpStream, id: ConnId, tx: Sender<NetEvent>) {
    spawn_reader_buffered(BufReader::new(stream), id, tx);
}

/// Same, continuing from an existing buffered reader (so bytes read ahead
/// during a synchronous bootstrap exchange are not lost).
pub fn spawn_reader_buffered(reader: BufReader<TcpStream>, id: ConnId, tx: Sender<NetEvent>) {
    thread::spawn(move || {
        for line in reader.lines() {
            match line {
                Ok(l) => {
                    if tx.send(NetEvent::Line(id, l)).is_err() {
                        return;
                    }
                }
                Err(_) => break,
            }
        }
        let _ = tx.send(NetEvent::Closed(id));
    });
}

/// Blocking single-line read on a buffered reader, used during the
/// synchronous bootstrap exchange.
pub fn read_line(reader: &mut BufReader<TcpStream>) -> std::io::Result<String> {
    let mut line = String::new();
    let n = reader.read_line(&mut line)?;
    if n == 0 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "connection closed",
        ));
    }
    Ok(line)
}
