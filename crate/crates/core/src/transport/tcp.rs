//! Socket fabric: the same frame bytes as the loopback fabric, carried
//! over TCP. For each linked pair the lower rank listens and the higher
//! rank connects; a both-role endpoint connects to its own listener.
//!
//! Each link runs one writer thread (drains the bounded outbound queue,
//! batching writes) and one reader thread (reassembles frames into the
//! bounded inbound queue, so a slow consumer back-pressures the peer
//! through the TCP window).

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender, TryRecvError};

use crate::error::{Error, Result};
use crate::frame::{parse_header, Frame, HEADER_LEN};
use crate::transport::{
    check_hello, hello_frame, Endpoint, EndpointId, Fabric, Link, RendezvousSpec, Role,
};

const ACCEPT_POLL: Duration = Duration::from_millis(5);
const CONNECT_RETRY: Duration = Duration::from_millis(15);
const IO_BUF: usize = 64 * 1024;

/// Stateless: every rendezvous carries its own roster and options.
#[derive(Debug, Default, Clone, Copy)]
pub struct TcpFabric;

impl TcpFabric {
    pub fn new() -> Self {
        TcpFabric
    }
}

enum Handshake {
    /// We dialed this peer; the socket is our write side.
    Outbound(EndpointId, TcpStream),
    /// The peer dialed us; the socket is our read side.
    Inbound(EndpointId, TcpStream),
}

impl Fabric for TcpFabric {
    fn rendezvous(&self, spec: &RendezvousSpec) -> Result<Endpoint> {
        spec.validate()?;
        let local = spec.local_rank;
        let local_role = spec.local_role;
        let deadline = Instant::now() + spec.options.rendezvous_timeout;
        let peers = spec.peer_ranks();

        // Lower rank listens, higher connects; a self-link does both.
        let outbound: Vec<EndpointId> = peers.iter().copied().filter(|p| *p <= local).collect();
        let inbound: Vec<EndpointId> = peers.iter().copied().filter(|p| *p >= local).collect();

        let (results_tx, results_rx) = unbounded::<Result<Handshake>>();
        let done = Arc::new(AtomicBool::new(false));

        if !inbound.is_empty() {
            let addr = spec
                .entry(local)
                .and_then(|e| e.addr)
                .ok_or_else(|| Error::Connection(format!("no listen address for {local}")))?;
            let listener = bind_with_retry(addr, deadline)?;
            listener.set_nonblocking(true)?;
            let expect = inbound.len();
            let roster = spec.roster.clone();
            let tx = results_tx.clone();
            let done = Arc::clone(&done);
            thread::spawn(move || {
                accept_loop(listener, expect, roster, local, local_role, deadline, tx, done)
            });
        }

        for peer in &outbound {
            let peer = *peer;
            let addr = match spec.entry(peer).and_then(|e| e.addr) {
                Some(a) => a,
                None => return Err(Error::Connection(format!("no address for {peer}"))),
            };
            let peer_role = spec.entry(peer).unwrap().role;
            let tx = results_tx.clone();
            thread::spawn(move || {
                tx.send(connect_peer(addr, peer, peer_role, local, local_role, deadline))
                    .ok();
            });
        }
        drop(results_tx);

        // Collect one outbound socket per dialed peer and one inbound
        // socket per expected caller, failing fast on any handshake error.
        let mut out_socks: Vec<(EndpointId, TcpStream)> = Vec::new();
        let mut in_socks: Vec<(EndpointId, TcpStream)> = Vec::new();
        while out_socks.len() < outbound.len() || in_socks.len() < inbound.len() {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let hs = match results_rx.recv_timeout(remaining.max(Duration::from_millis(1))) {
                Ok(r) => r,
                Err(_) => {
                    done.store(true, Ordering::Release);
                    let missing: Vec<String> = outbound
                        .iter()
                        .filter(|p| !out_socks.iter().any(|(q, _)| q == *p))
                        .chain(inbound.iter().filter(|p| !in_socks.iter().any(|(q, _)| q == *p)))
                        .map(|p| p.to_string())
                        .collect();
                    return Err(Error::Connection(format!(
                        "rendezvous timed out after {:?}; unresolved peers: {}",
                        spec.options.rendezvous_timeout,
                        missing.join(", ")
                    )));
                }
            };
            match hs {
                Ok(Handshake::Outbound(p, s)) => out_socks.push((p, s)),
                Ok(Handshake::Inbound(p, s)) => {
                    if in_socks.iter().any(|(q, _)| *q == p) {
                        done.store(true, Ordering::Release);
                        return Err(Error::Protocol(format!(
                            "duplicate rank: two HELLOs declared {p}"
                        )));
                    }
                    in_socks.push((p, s));
                }
                Err(e) => {
                    done.store(true, Ordering::Release);
                    return Err(e);
                }
            }
        }
        done.store(true, Ordering::Release);

        let mut links = Vec::new();
        for peer in peers {
            let write_sock;
            let read_sock;
            if peer == local {
                // Self-link: the dialed socket writes, the accepted one reads.
                write_sock = take_sock(&mut out_socks, peer)?;
                read_sock = take_sock(&mut in_socks, peer)?;
            } else if peer < local {
                let s = take_sock(&mut out_socks, peer)?;
                read_sock = s.try_clone()?;
                write_sock = s;
            } else {
                let s = take_sock(&mut in_socks, peer)?;
                read_sock = s.try_clone()?;
                write_sock = s;
            }
            let peer_role = spec.entry(peer).unwrap().role;
            links.push(spawn_link(
                peer,
                peer_role,
                write_sock,
                read_sock,
                spec.options.queue_depth,
            )?);
        }
        Ok(Endpoint::new(local, links))
    }
}

fn take_sock(socks: &mut Vec<(EndpointId, TcpStream)>, peer: EndpointId) -> Result<TcpStream> {
    let idx = socks
        .iter()
        .position(|(p, _)| *p == peer)
        .ok_or_else(|| Error::Connection(format!("no socket established for {peer}")))?;
    Ok(socks.swap_remove(idx).1)
}

fn bind_with_retry(addr: SocketAddr, deadline: Instant) -> Result<TcpListener> {
    loop {
        match TcpListener::bind(addr) {
            Ok(l) => return Ok(l),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(Error::Connection(format!("cannot bind {addr}: {e}")));
                }
                thread::sleep(CONNECT_RETRY);
            }
        }
    }
}

/// Dial `addr` until the deadline, then run the HELLO exchange: we write
/// first, the acceptor answers.
fn connect_peer(
    addr: SocketAddr,
    peer: EndpointId,
    peer_role: Role,
    local: EndpointId,
    local_role: Role,
    deadline: Instant,
) -> Result<Handshake> {
    let stream = loop {
        match TcpStream::connect(addr) {
            Ok(s) => break s,
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(Error::Connection(format!(
                        "cannot reach {peer} at {addr}: {e}"
                    )));
                }
                thread::sleep(CONNECT_RETRY);
            }
        }
    };
    let mut stream = stream;
    stream.set_nodelay(true)?;
    stream.write_all(&hello_frame(local, local_role).encode())?;
    let frame = read_frame_deadline(&mut stream, deadline)?;
    check_hello(&frame, peer, peer_role)?;
    stream.set_read_timeout(None)?;
    Ok(Handshake::Outbound(peer, stream))
}

#[allow(clippy::too_many_arguments)]
fn accept_loop(
    listener: TcpListener,
    expect: usize,
    roster: Vec<super::RosterEntry>,
    local: EndpointId,
    local_role: Role,
    deadline: Instant,
    results: Sender<Result<Handshake>>,
    done: Arc<AtomicBool>,
) {
    let mut accepted = 0usize;
    while accepted < expect && !done.load(Ordering::Acquire) {
        if Instant::now() >= deadline {
            return; // the collector reports the timeout
        }
        match listener.accept() {
            Ok((stream, _)) => {
                accepted += 1;
                let roster = roster.clone();
                let results = results.clone();
                thread::spawn(move || {
                    results
                        .send(accept_handshake(stream, roster, local, local_role, deadline))
                        .ok();
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(_) => return,
        }
    }
}

/// Acceptor side of the HELLO exchange: read the caller's HELLO to learn
/// who it is, vet it against the roster, then answer with our own.
fn accept_handshake(
    mut stream: TcpStream,
    roster: Vec<super::RosterEntry>,
    local: EndpointId,
    local_role: Role,
    deadline: Instant,
) -> Result<Handshake> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let frame = read_frame_deadline(&mut stream, deadline)?;
    let claimed = EndpointId(frame.sender_rank);
    let entry = roster
        .iter()
        .find(|e| e.rank == claimed)
        .ok_or_else(|| Error::Protocol(format!("HELLO from {claimed}, which is not in the roster")))?;
    check_hello(&frame, claimed, entry.role)?;
    if !local_role.links_with(entry.role) {
        return Err(Error::Protocol(format!(
            "{claimed} ('{}') must not link with {local} ('{local_role}')",
            entry.role
        )));
    }
    stream.write_all(&hello_frame(local, local_role).encode())?;
    stream.set_read_timeout(None)?;
    Ok(Handshake::Inbound(claimed, stream))
}

/// Reads exactly one frame with the remaining deadline as read timeout.
fn read_frame_deadline(stream: &mut TcpStream, deadline: Instant) -> Result<Frame> {
    let remaining = deadline.saturating_duration_since(Instant::now());
    stream.set_read_timeout(Some(remaining.max(Duration::from_millis(1))))?;
    let hello_timeout =
        |e: std::io::Error| Error::Connection(format!("HELLO exchange failed: {e}"));
    let mut header = [0u8; HEADER_LEN];
    stream.read_exact(&mut header).map_err(hello_timeout)?;
    let (_, _, _, _, payload_len) = parse_header(&header)?;
    let mut buf = vec![0u8; HEADER_LEN + payload_len];
    buf[..HEADER_LEN].copy_from_slice(&header);
    stream.read_exact(&mut buf[HEADER_LEN..]).map_err(hello_timeout)?;
    Frame::decode(&buf)
}

/// Builds a live link: bounded queues on both sides, a writer thread that
/// batches outbound frames, and a reader thread that reassembles inbound
/// frames.
fn spawn_link(
    peer: EndpointId,
    peer_role: Role,
    write_sock: TcpStream,
    read_sock: TcpStream,
    depth: usize,
) -> Result<Link> {
    let (out_tx, out_rx) = bounded::<Vec<u8>>(depth);
    let (in_tx, in_rx) = bounded::<Vec<u8>>(depth);

    let reader_sock_handle = read_sock.try_clone()?;
    let writer = thread::spawn(move || writer_loop(write_sock, out_rx));
    let reader = thread::spawn(move || reader_loop(read_sock, in_tx));

    let mut link = Link::new(peer, peer_role, out_tx, in_rx);
    link.writer_handle = Some(writer);
    link.reader_handle = Some(reader);
    link.reader_sock = Some(reader_sock_handle);
    Ok(link)
}

fn writer_loop(stream: TcpStream, rx: Receiver<Vec<u8>>) {
    let mut w = BufWriter::with_capacity(IO_BUF, stream);
    loop {
        match rx.recv() {
            Ok(bytes) => {
                if w.write_all(&bytes).is_err() {
                    return; // dropping rx unblocks senders with LinkClosed
                }
                // Batch whatever else is already queued before flushing.
                loop {
                    match rx.try_recv() {
                        Ok(more) => {
                            if w.write_all(&more).is_err() {
                                return;
                            }
                        }
                        Err(TryRecvError::Empty) => break,
                        Err(TryRecvError::Disconnected) => break,
                    }
                }
                if w.flush().is_err() {
                    return;
                }
            }
            Err(_) => {
                // Sender closed after draining: flush and half-close so the
                // peer sees a clean end of stream after the last frame.
                let _ = w.flush();
                let _ = w.get_ref().shutdown(Shutdown::Write);
                return;
            }
        }
    }
}

fn reader_loop(stream: TcpStream, tx: Sender<Vec<u8>>) {
    let mut r = BufReader::with_capacity(IO_BUF, stream);
    loop {
        let mut header = [0u8; HEADER_LEN];
        match read_full(&mut r, &mut header) {
            ReadOutcome::Eof => return, // clean close
            ReadOutcome::Partial(n) => {
                // Forward the stub so the receiver surfaces a framing error.
                let _ = tx.send(header[..n].to_vec());
                return;
            }
            ReadOutcome::Full => {}
        }
        let payload_len = match parse_header(&header) {
            Ok((_, _, _, _, len)) => len,
            Err(_) => {
                let _ = tx.send(header.to_vec());
                return;
            }
        };
        let mut buf = vec![0u8; HEADER_LEN + payload_len];
        buf[..HEADER_LEN].copy_from_slice(&header);
        if payload_len > 0 {
            match read_full(&mut r, &mut buf[HEADER_LEN..]) {
                ReadOutcome::Full => {}
                ReadOutcome::Eof | ReadOutcome::Partial(_) => {
                    let _ = tx.send(buf[..HEADER_LEN].to_vec()); // truncated frame
                    return;
                }
            }
        }
        if tx.send(buf).is_err() {
            return; // local side dropped the link
        }
    }
}

enum ReadOutcome {
    Full,
    Eof,
    Partial(usize),
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> ReadOutcome {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => {
                return if n == 0 {
                    ReadOutcome::Eof
                } else {
                    ReadOutcome::Partial(n)
                }
            }
            Ok(k) => n += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(_) => {
                return if n == 0 {
                    ReadOutcome::Eof
                } else {
                    ReadOutcome::Partial(n)
                }
            }
        }
    }
    ReadOutcome::Full
}
