//! Frame delivery over persistent point-to-point links.
//!
//! A [`Fabric`] wires one endpoint to every complementary-role peer in a
//! roster (producers link to consumers, never producer to producer) and
//! returns an [`Endpoint`] holding the resulting [`Link`]s. Two fabrics
//! exist: [`loopback::LoopbackFabric`] moves encoded frame bytes through
//! in-process queues, [`tcp::TcpFabric`] moves the same bytes over TCP.
//! Both present identical link semantics: reliable, in-order delivery with
//! a bounded outbound queue that back-pressures senders.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Select, Sender, TryRecvError, TrySendError};

use crate::error::{Error, Result};
use crate::frame::Frame;

pub mod loopback;
pub mod tcp;

pub use loopback::LoopbackFabric;
pub use tcp::TcpFabric;

/// Identity of one process in a run. Global ranks are dense `0..N-1`
/// across the whole run; a channel roster may use any subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EndpointId(pub u32);

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rank {}", self.0)
    }
}

/// Role a process declares when a channel is created.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Role {
    pub is_producer: bool,
    pub is_consumer: bool,
}

impl Role {
    pub const PRODUCER: Role = Role {
        is_producer: true,
        is_consumer: false,
    };
    pub const CONSUMER: Role = Role {
        is_producer: false,
        is_consumer: true,
    };
    pub const BOTH: Role = Role {
        is_producer: true,
        is_consumer: true,
    };
    /// Participates in channel creation but receives no channel object.
    pub const BYSTANDER: Role = Role {
        is_producer: false,
        is_consumer: false,
    };

    pub fn is_bystander(self) -> bool {
        !self.is_producer && !self.is_consumer
    }

    /// Wire encoding: bit0 = producer, bit1 = consumer.
    pub fn flags(self) -> u8 {
        (self.is_producer as u8) | ((self.is_consumer as u8) << 1)
    }

    pub fn from_flags(flags: u8) -> Result<Role> {
        if flags > 0b11 {
            return Err(Error::Protocol(format!("invalid role flags {flags:#04x}")));
        }
        Ok(Role {
            is_producer: flags & 0b01 != 0,
            is_consumer: flags & 0b10 != 0,
        })
    }

    /// Two endpoints exchange stream traffic iff one produces and the
    /// other consumes. A both-role endpoint links to itself.
    pub fn links_with(self, other: Role) -> bool {
        (self.is_producer && other.is_consumer) || (self.is_consumer && other.is_producer)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match (self.is_producer, self.is_consumer) {
            (true, true) => "both",
            (true, false) => "producer",
            (false, true) => "consumer",
            (false, false) => "none",
        };
        f.write_str(s)
    }
}

/// One participant in a rendezvous: its rank, declared role, and (for the
/// socket fabric) the address it listens on.
#[derive(Debug, Clone)]
pub struct RosterEntry {
    pub rank: EndpointId,
    pub role: Role,
    pub addr: Option<std::net::SocketAddr>,
}

impl RosterEntry {
    pub fn new(rank: u32, role: Role) -> Self {
        RosterEntry {
            rank: EndpointId(rank),
            role,
            addr: None,
        }
    }

    pub fn with_addr(rank: u32, role: Role, addr: std::net::SocketAddr) -> Self {
        RosterEntry {
            rank: EndpointId(rank),
            role,
            addr: Some(addr),
        }
    }
}

/// Tunables shared by both fabrics.
#[derive(Debug, Clone)]
pub struct TransportOptions {
    /// Outbound (and inbound) queue capacity in frames. A full outbound
    /// queue blocks blocking sends and leaves non-blocking completions
    /// unresolved.
    pub queue_depth: usize,
    /// How long rendezvous waits for an absent peer before failing.
    pub rendezvous_timeout: Duration,
}

impl Default for TransportOptions {
    fn default() -> Self {
        TransportOptions {
            queue_depth: 1024,
            rendezvous_timeout: Duration::from_secs(10),
        }
    }
}

/// Everything a fabric needs to wire up one endpoint of one channel.
#[derive(Debug, Clone)]
pub struct RendezvousSpec {
    /// Distinguishes channels sharing the same run (port and queue
    /// namespaces are per tag).
    pub channel_tag: u32,
    pub local_rank: EndpointId,
    pub local_role: Role,
    pub roster: Vec<RosterEntry>,
    pub options: TransportOptions,
}

impl RendezvousSpec {
    /// Roster sanity shared by both fabrics: unique ranks, the local rank
    /// present, and its declared role matching what we are about to HELLO.
    pub fn validate(&self) -> Result<()> {
        if self.roster.is_empty() {
            return Err(Error::Protocol("empty roster".into()));
        }
        for (i, e) in self.roster.iter().enumerate() {
            if self.roster[..i].iter().any(|o| o.rank == e.rank) {
                return Err(Error::Protocol(format!("duplicate {} in roster", e.rank)));
            }
        }
        let local = self
            .roster
            .iter()
            .find(|e| e.rank == self.local_rank)
            .ok_or_else(|| {
                Error::Protocol(format!("local {} missing from roster", self.local_rank))
            })?;
        if local.role != self.local_role {
            return Err(Error::Protocol(format!(
                "declared role '{}' does not match roster role '{}' for {}",
                self.local_role, local.role, self.local_rank
            )));
        }
        Ok(())
    }

    /// Ranks this endpoint must hold links to, ascending.
    pub fn peer_ranks(&self) -> Vec<EndpointId> {
        self.roster
            .iter()
            .filter(|e| self.local_role.links_with(e.role))
            .map(|e| e.rank)
            .collect()
    }

    pub fn entry(&self, rank: EndpointId) -> Option<&RosterEntry> {
        self.roster.iter().find(|e| e.rank == rank)
    }
}

/// Transport implementations, interchangeable behind this trait.
pub trait Fabric: Send + Sync {
    /// Establishes links between `spec.local_rank` and every peer it will
    /// exchange stream traffic with, exchanging a HELLO on each.
    fn rendezvous(&self, spec: &RendezvousSpec) -> Result<Endpoint>;
}

// ---------------------------------------------------------------------------
// Link internals shared by both fabrics. Messages are encoded frame bytes in
// both cases, so serialization is exercised even without sockets.
// ---------------------------------------------------------------------------

struct SenderState {
    tx: Option<Sender<Vec<u8>>>,
    /// Frames a non-blocking send could not enqueue yet, oldest first.
    pending: VecDeque<Vec<u8>>,
    submitted: u64,
}

struct SenderCore {
    state: Mutex<SenderState>,
    accepted: AtomicU64,
}

impl SenderCore {
    fn new(tx: Sender<Vec<u8>>) -> Arc<Self> {
        Arc::new(SenderCore {
            state: Mutex::new(SenderState {
                tx: Some(tx),
                pending: VecDeque::new(),
                submitted: 0,
            }),
            accepted: AtomicU64::new(0),
        })
    }

    /// Blocking-enqueues everything pending. Holds the state lock.
    fn drain_pending(&self, state: &mut SenderState) -> Result<()> {
        while let Some(bytes) = state.pending.front() {
            let tx = state.tx.as_ref().ok_or(Error::LinkClosed)?;
            if tx.send(bytes.clone()).is_err() {
                state.tx = None;
                return Err(Error::LinkClosed);
            }
            state.pending.pop_front();
            self.accepted.fetch_add(1, Ordering::Release);
        }
        Ok(())
    }

    /// Non-blocking best effort; stops at the first full-queue refusal.
    fn try_drain_pending(&self, state: &mut SenderState) -> Result<()> {
        while let Some(bytes) = state.pending.front() {
            let tx = state.tx.as_ref().ok_or(Error::LinkClosed)?;
            match tx.try_send(bytes.clone()) {
                Ok(()) => {
                    state.pending.pop_front();
                    self.accepted.fetch_add(1, Ordering::Release);
                }
                Err(TrySendError::Full(_)) => break,
                Err(TrySendError::Disconnected(_)) => {
                    state.tx = None;
                    return Err(Error::LinkClosed);
                }
            }
        }
        Ok(())
    }
}

/// Outbound half of a link.
pub struct FrameSender {
    core: Arc<SenderCore>,
}

impl FrameSender {
    fn new(tx: Sender<Vec<u8>>) -> Self {
        FrameSender {
            core: SenderCore::new(tx),
        }
    }

    /// Blocks until the frame is accepted by the outbound queue.
    pub fn send_blocking(&self, frame: &Frame) -> Result<()> {
        let bytes = frame.encode();
        let mut state = self.core.state.lock().unwrap();
        self.core.drain_pending(&mut state)?;
        let tx = state.tx.as_ref().ok_or(Error::LinkClosed)?;
        if tx.send(bytes).is_err() {
            state.tx = None;
            return Err(Error::LinkClosed);
        }
        state.submitted += 1;
        self.core.accepted.fetch_add(1, Ordering::Release);
        Ok(())
    }

    /// Never blocks. The returned completion resolves once the frame has
    /// been accepted by the outbound queue; a full queue leaves it pending.
    pub fn send_nonblocking(&self, frame: &Frame) -> Result<SendCompletion> {
        let bytes = frame.encode();
        let mut state = self.core.state.lock().unwrap();
        state.submitted += 1;
        let ticket = state.submitted;
        self.core.try_drain_pending(&mut state)?;
        if state.pending.is_empty() {
            let tx = state.tx.as_ref().ok_or(Error::LinkClosed)?;
            match tx.try_send(bytes) {
                Ok(()) => {
                    self.core.accepted.fetch_add(1, Ordering::Release);
                }
                Err(TrySendError::Full(bytes)) => state.pending.push_back(bytes),
                Err(TrySendError::Disconnected(_)) => {
                    state.tx = None;
                    return Err(Error::LinkClosed);
                }
            }
        } else {
            state.pending.push_back(bytes);
        }
        Ok(SendCompletion {
            core: Arc::clone(&self.core),
            ticket,
        })
    }

    /// Flushes anything pending and closes the outbound side. Frames
    /// already accepted are still delivered.
    pub fn close(&self) -> Result<()> {
        let mut state = self.core.state.lock().unwrap();
        if state.tx.is_none() {
            return Ok(());
        }
        self.core.drain_pending(&mut state)?;
        state.tx = None;
        Ok(())
    }

    pub fn is_closed(&self) -> bool {
        self.core.state.lock().unwrap().tx.is_none()
    }
}

/// Handle returned by non-blocking sends; resolves when the payload buffer
/// may be reused (the frame reached the outbound queue).
pub struct SendCompletion {
    core: Arc<SenderCore>,
    ticket: u64,
}

impl SendCompletion {
    /// True once the frame has been accepted, without driving progress.
    pub fn is_complete(&self) -> bool {
        self.core.accepted.load(Ordering::Acquire) >= self.ticket
    }

    /// Attempts to make progress without blocking.
    pub fn try_complete(&self) -> Result<bool> {
        if self.is_complete() {
            return Ok(true);
        }
        let mut state = self.core.state.lock().unwrap();
        self.core.try_drain_pending(&mut state)?;
        Ok(self.is_complete())
    }

    /// Blocks until the frame is accepted.
    pub fn wait(&self) -> Result<()> {
        if self.is_complete() {
            return Ok(());
        }
        let mut state = self.core.state.lock().unwrap();
        self.core.drain_pending(&mut state)?;
        debug_assert!(self.is_complete());
        Ok(())
    }
}

/// Outcome of one receive attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecvPoll {
    Frame(Frame),
    /// Nothing buffered right now (poll mode only).
    Empty,
    /// Peer closed; everything it sent before closing was already
    /// delivered.
    Closed,
}

/// Receive mode for [`Link::recv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecvMode {
    Block,
    Poll,
}

/// Inbound half of a link.
pub struct FrameReceiver {
    rx: Receiver<Vec<u8>>,
    closed: bool,
}

impl FrameReceiver {
    fn new(rx: Receiver<Vec<u8>>) -> Self {
        FrameReceiver { rx, closed: false }
    }

    fn decode(&mut self, bytes: Vec<u8>) -> Result<RecvPoll> {
        match Frame::decode(&bytes) {
            Ok(frame) => Ok(RecvPoll::Frame(frame)),
            Err(e) => {
                // A framing error poisons the link.
                self.closed = true;
                Err(e)
            }
        }
    }

    pub fn recv(&mut self, mode: RecvMode) -> Result<RecvPoll> {
        if self.closed {
            return Ok(RecvPoll::Closed);
        }
        match mode {
            RecvMode::Poll => match self.rx.try_recv() {
                Ok(bytes) => self.decode(bytes),
                Err(TryRecvError::Empty) => Ok(RecvPoll::Empty),
                Err(TryRecvError::Disconnected) => {
                    self.closed = true;
                    Ok(RecvPoll::Closed)
                }
            },
            RecvMode::Block => match self.rx.recv() {
                Ok(bytes) => self.decode(bytes),
                Err(_) => {
                    self.closed = true;
                    Ok(RecvPoll::Closed)
                }
            },
        }
    }

    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<RecvPoll> {
        if self.closed {
            return Ok(RecvPoll::Closed);
        }
        match self.rx.recv_timeout(timeout) {
            Ok(bytes) => self.decode(bytes),
            Err(RecvTimeoutError::Timeout) => Ok(RecvPoll::Empty),
            Err(RecvTimeoutError::Disconnected) => {
                self.closed = true;
                Ok(RecvPoll::Closed)
            }
        }
    }
}

/// A persistent bidirectional link to one peer.
pub struct Link {
    peer: EndpointId,
    peer_role: Role,
    sender: FrameSender,
    receiver: FrameReceiver,
    /// Reported a `Closed` event to `recv_any` already.
    closed_seen: bool,
    writer_handle: Option<JoinHandle<()>>,
    reader_handle: Option<JoinHandle<()>>,
    reader_sock: Option<std::net::TcpStream>,
}

impl Link {
    fn new(peer: EndpointId, peer_role: Role, tx: Sender<Vec<u8>>, rx: Receiver<Vec<u8>>) -> Self {
        Link {
            peer,
            peer_role,
            sender: FrameSender::new(tx),
            receiver: FrameReceiver::new(rx),
            closed_seen: false,
            writer_handle: None,
            reader_handle: None,
            reader_sock: None,
        }
    }

    pub fn peer(&self) -> EndpointId {
        self.peer
    }

    pub fn peer_role(&self) -> Role {
        self.peer_role
    }

    pub fn send_blocking(&self, frame: &Frame) -> Result<()> {
        self.sender.send_blocking(frame)
    }

    pub fn send_nonblocking(&self, frame: &Frame) -> Result<SendCompletion> {
        self.sender.send_nonblocking(frame)
    }

    pub fn recv(&mut self, mode: RecvMode) -> Result<RecvPoll> {
        self.receiver.recv(mode)
    }

    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<RecvPoll> {
        self.receiver.recv_timeout(timeout)
    }

    /// Flushes and closes the outbound side, then tears down any worker
    /// threads. Frames accepted before the close are delivered first.
    pub fn close(&mut self) -> Result<()> {
        self.sender.close()?;
        if let Some(h) = self.writer_handle.take() {
            let _ = h.join();
        }
        if let Some(sock) = self.reader_sock.take() {
            let _ = sock.shutdown(std::net::Shutdown::Read);
        }
        if let Some(h) = self.reader_handle.take() {
            let _ = h.join();
        }
        Ok(())
    }
}

impl Drop for Link {
    fn drop(&mut self) {
        // Close the outbound side so workers unblock; detach them rather
        // than risk joining a thread stuck on a dead peer.
        let _ = self.sender.close();
        if let Some(sock) = self.reader_sock.take() {
            let _ = sock.shutdown(std::net::Shutdown::Read);
        }
    }
}

/// Event produced by [`Endpoint::recv_any`].
#[derive(Debug)]
pub enum AnyEvent {
    Frame { peer: EndpointId, frame: Frame },
    /// First observation of a peer's clean close.
    Closed { peer: EndpointId },
    /// Nothing arrived within the poll pass or timeout.
    Idle,
}

/// All links one endpoint holds for one channel.
pub struct Endpoint {
    local: EndpointId,
    links: BTreeMap<EndpointId, Link>,
    rotate: usize,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint")
            .field("local", &self.local)
            .field("peers", &self.links.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Endpoint {
    pub fn new(local: EndpointId, links: Vec<Link>) -> Self {
        Endpoint {
            local,
            links: links.into_iter().map(|l| (l.peer, l)).collect(),
            rotate: 0,
        }
    }

    pub fn local(&self) -> EndpointId {
        self.local
    }

    pub fn peers(&self) -> Vec<EndpointId> {
        self.links.keys().copied().collect()
    }

    pub fn link(&self, peer: EndpointId) -> Result<&Link> {
        self.links
            .get(&peer)
            .ok_or_else(|| Error::Protocol(format!("no link to {peer}")))
    }

    pub fn link_mut(&mut self, peer: EndpointId) -> Result<&mut Link> {
        self.links
            .get_mut(&peer)
            .ok_or_else(|| Error::Protocol(format!("no link to {peer}")))
    }

    /// Receives the next frame from any of `candidates`, rotating the scan
    /// start for fairness. `timeout: None` polls once and returns. Closed
    /// links are reported once, then skipped.
    pub fn recv_any(
        &mut self,
        candidates: &[EndpointId],
        timeout: Option<Duration>,
    ) -> Result<AnyEvent> {
        loop {
            let n = candidates.len();
            for i in 0..n {
                let peer = candidates[(self.rotate + i) % n];
                let link = match self.links.get_mut(&peer) {
                    Some(l) => l,
                    None => return Err(Error::Protocol(format!("no link to {peer}"))),
                };
                if link.closed_seen {
                    continue;
                }
                match link.recv(RecvMode::Poll)? {
                    RecvPoll::Frame(frame) => {
                        self.rotate = (self.rotate + i + 1) % n.max(1);
                        return Ok(AnyEvent::Frame { peer, frame });
                    }
                    RecvPoll::Closed => {
                        link.closed_seen = true;
                        return Ok(AnyEvent::Closed { peer });
                    }
                    RecvPoll::Empty => {}
                }
            }
            let timeout = match timeout {
                None => return Ok(AnyEvent::Idle),
                Some(d) => d,
            };
            let live: Vec<EndpointId> = candidates
                .iter()
                .copied()
                .filter(|p| self.links.get(p).is_some_and(|l| !l.closed_seen))
                .collect();
            if live.is_empty() {
                std::thread::sleep(timeout);
                return Ok(AnyEvent::Idle);
            }
            let mut sel = Select::new();
            for p in &live {
                sel.recv(&self.links[p].receiver.rx);
            }
            match sel.ready_timeout(timeout) {
                Ok(_) => continue, // something is ready; re-run the poll pass
                Err(_) => return Ok(AnyEvent::Idle),
            }
        }
    }

    /// Closes every link, flushing outbound frames first.
    pub fn close(&mut self) -> Result<()> {
        let mut first_err = None;
        for link in self.links.values_mut() {
            if let Err(e) = link.close() {
                first_err.get_or_insert(e);
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

pub(crate) fn hello_frame(local: EndpointId, role: Role) -> Frame {
    Frame::hello(
        0,
        local.0,
        crate::frame::HelloPayload {
            role_flags: role.flags(),
            declared_rank: local.0,
            schema_digest: 0,
        },
    )
}

/// Shared HELLO validation: the peer must identify as `expected_rank` with
/// the role the roster declared for it.
pub(crate) fn check_hello(
    frame: &Frame,
    expected_rank: EndpointId,
    expected_role: Role,
) -> Result<()> {
    if frame.kind != crate::frame::FrameKind::Hello {
        return Err(Error::Protocol(format!(
            "expected HELLO from {expected_rank}, got {:?}",
            frame.kind
        )));
    }
    let hello = crate::frame::HelloPayload::decode(&frame.payload)?;
    if EndpointId(hello.declared_rank) != expected_rank || frame.sender_rank != hello.declared_rank
    {
        return Err(Error::Protocol(format!(
            "HELLO declares rank {}, expected {expected_rank}",
            hello.declared_rank
        )));
    }
    let role = Role::from_flags(hello.role_flags)?;
    if role != expected_role {
        return Err(Error::Protocol(format!(
            "{expected_rank} declared role '{role}' in HELLO but the roster says '{expected_role}'"
        )));
    }
    Ok(())
}
