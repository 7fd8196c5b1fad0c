//! Channels between producer and consumer groups, and the operations on
//! the streams they carry.
//!
//! A [`Channel`] is created collectively: every roster member calls
//! [`Channel::create`] with its declared role. Producers and consumers
//! receive a channel holding links to every complementary member;
//! bystanders receive `None`. Streams are attached collectively too —
//! attach exchanges schema digests over every link and fails on both sides
//! when they disagree.
//!
//! Producers push elements with [`Channel::send`] and end their
//! contribution with [`Channel::terminate`]. A consumer drives
//! [`Channel::operate`], which dispatches its callbacks; a stream only
//! terminates for a consumer once every producer's TERM has arrived.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameKind, HelloPayload};
use crate::harness::Recorder;
use crate::schema::{
    decode_element, encode_element, schema_digest, StreamSchema, Values, MAX_ELEMENT_SIZE,
};
use crate::transport::{
    AnyEvent, Endpoint, EndpointId, Fabric, RecvPoll, RendezvousSpec, Role, RosterEntry,
    SendCompletion, TransportOptions,
};

/// How long the blocking operate loop parks between polls when nothing is
/// pending. Short when a background callback wants servicing.
const IDLE_WAIT: Duration = Duration::from_millis(25);
const IDLE_WAIT_WITH_BACKGROUND: Duration = Duration::from_millis(1);

/// Identifies a stream within its channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamHandle(pub u16);

/// Producer-side send flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendMode {
    /// Return once the outbound queue accepted the element.
    Block,
    /// Return immediately with a completion that resolves on buffer reuse.
    NonBlock,
}

/// Result of a send.
pub enum SendOutcome {
    /// The element is in the outbound queue.
    Accepted,
    /// Non-blocking send against a full queue; resolve via the completion.
    Pending(SendCompletion),
}

/// Consumer-side operate flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperateMode {
    /// Loop until the stream is globally terminated.
    Block,
    /// Process at most one pending element, then report.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperateStatus {
    Progressed,
    Idle,
    Terminated,
}

/// Where each element goes: the rule a producer applies per send.
#[derive(Clone)]
pub enum RoutingPolicy {
    /// Cycle consumers per producer, starting at consumer 0.
    RoundRobin,
    /// The extractor yields a routing key; destination is `key % consumers`.
    KeyHash(Arc<dyn Fn(&Values) -> u64 + Send + Sync>),
    /// Static partition map indexed by producer rank.
    Fixed(Vec<u32>),
}

impl RoutingPolicy {
    pub fn key_hash(f: impl Fn(&Values) -> u64 + Send + Sync + 'static) -> Self {
        RoutingPolicy::KeyHash(Arc::new(f))
    }
}

impl fmt::Debug for RoutingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingPolicy::RoundRobin => f.write_str("RoundRobin"),
            RoutingPolicy::KeyHash(_) => f.write_str("KeyHash(..)"),
            RoutingPolicy::Fixed(map) => write!(f, "Fixed({map:?})"),
        }
    }
}

/// Facts about the element handed to the process callback.
#[derive(Debug, Clone, Copy)]
pub struct ElementMeta {
    /// Global rank of the producer.
    pub producer: EndpointId,
    /// Dense rank of the producer within the channel's producer group.
    pub producer_index: u32,
    /// Per (stream, producer, this consumer) sequence number, from 0.
    pub seq: u64,
    pub stream: StreamHandle,
}

type Callback<C> = Box<dyn FnMut(&mut C) -> Result<()> + Send>;
type ProcessCallback<C> = Box<dyn FnMut(&mut C, &ElementMeta, &Values) -> Result<()> + Send>;

/// Consumer-side callbacks for one stream. `process` is mandatory; the
/// rest are optional. All receive the caller-owned context.
pub struct OperationSet<C> {
    pub(crate) init: Option<Callback<C>>,
    pub(crate) process: ProcessCallback<C>,
    pub(crate) term: Option<Callback<C>>,
    pub(crate) background: Option<Callback<C>>,
}

impl<C> OperationSet<C> {
    pub fn new(process: impl FnMut(&mut C, &ElementMeta, &Values) -> Result<()> + Send + 'static) -> Self {
        OperationSet {
            init: None,
            process: Box::new(process),
            term: None,
            background: None,
        }
    }

    pub fn on_init(mut self, f: impl FnMut(&mut C) -> Result<()> + Send + 'static) -> Self {
        self.init = Some(Box::new(f));
        self
    }

    pub fn on_term(mut self, f: impl FnMut(&mut C) -> Result<()> + Send + 'static) -> Self {
        self.term = Some(Box::new(f));
        self
    }

    /// Invoked whenever the operate loop finds no element pending.
    pub fn on_background(mut self, f: impl FnMut(&mut C) -> Result<()> + Send + 'static) -> Self {
        self.background = Some(Box::new(f));
        self
    }
}

/// Counts the producers that have signaled end-of-stream.
#[derive(Debug, Default)]
pub struct TerminationLedger {
    expected: usize,
    seen: HashSet<u32>,
}

impl TerminationLedger {
    fn new(expected: usize) -> Self {
        TerminationLedger {
            expected,
            seen: HashSet::new(),
        }
    }

    fn record(&mut self, producer: EndpointId) -> Result<()> {
        if !self.seen.insert(producer.0) {
            return Err(Error::Protocol(format!(
                "duplicate TERM from {producer}"
            )));
        }
        debug_assert!(self.seen.len() <= self.expected);
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.seen.len()
    }

    pub fn expected(&self) -> usize {
        self.expected
    }

    pub fn complete(&self) -> bool {
        self.seen.len() == self.expected
    }

    fn missing(&self, producer: EndpointId) -> bool {
        !self.seen.contains(&producer.0)
    }
}

struct StreamState<C> {
    schema: StreamSchema,
    routing: RoutingPolicy,
    ops: Option<OperationSet<C>>,
    // Producer side.
    terminated_local: bool,
    round_robin: u64,
    next_out_seq: HashMap<u32, u64>,
    // Consumer side.
    ledger: TerminationLedger,
    init_done: bool,
    term_done: bool,
    /// DATA frames that arrived while another stream was being serviced,
    /// in arrival order.
    stash: VecDeque<(EndpointId, Frame)>,
}

/// Options for channel creation beyond the roster itself.
#[derive(Clone, Default)]
pub struct ChannelOptions {
    /// Distinguishes channels within one run; must agree across members.
    pub channel_tag: u32,
    pub transport: TransportOptions,
    /// Counters to bump on send/process events.
    pub recorder: Option<Arc<Recorder>>,
}

/// Persistent link between a producer group and a consumer group.
pub struct Channel<C = ()> {
    local: EndpointId,
    role: Role,
    producer_group: Vec<EndpointId>,
    consumer_group: Vec<EndpointId>,
    producer_rank: Option<u32>,
    consumer_rank: Option<u32>,
    endpoint: Endpoint,
    streams: Vec<StreamState<C>>,
    /// Attach HELLOs that arrived ahead of the local attach call.
    pending_hellos: HashMap<(u32, u16), HelloPayload>,
    /// Next expected inbound seq per (stream, peer); DATA and TERM share it.
    expect_seq: HashMap<(u16, u32), u64>,
    /// Producer-role peers this endpoint receives stream traffic from.
    inbound_peers: Vec<EndpointId>,
    closed_peers: HashSet<u32>,
    recorder: Option<Arc<Recorder>>,
    attach_timeout: Duration,
    freed: bool,
}

impl<C> Channel<C> {
    /// Collective channel creation. Every roster member calls this exactly
    /// once with its own rank and declared role; producers and consumers
    /// get a channel, bystanders get `None`.
    pub fn create(
        local: EndpointId,
        role: Role,
        roster: &[RosterEntry],
        fabric: &dyn Fabric,
        options: ChannelOptions,
    ) -> Result<Option<Channel<C>>> {
        let mut producer_group: Vec<EndpointId> = roster
            .iter()
            .filter(|e| e.role.is_producer)
            .map(|e| e.rank)
            .collect();
        producer_group.sort();
        let mut consumer_group: Vec<EndpointId> = roster
            .iter()
            .filter(|e| e.role.is_consumer)
            .map(|e| e.rank)
            .collect();
        consumer_group.sort();
        if producer_group.is_empty() || consumer_group.is_empty() {
            return Err(Error::ChannelCreation(format!(
                "a channel needs at least one producer and one consumer \
                 (got {} producers, {} consumers)",
                producer_group.len(),
                consumer_group.len()
            )));
        }

        let attach_timeout = options.transport.rendezvous_timeout;
        let spec = RendezvousSpec {
            channel_tag: options.channel_tag,
            local_rank: local,
            local_role: role,
            roster: roster.to_vec(),
            options: options.transport,
        };
        spec.validate()?;
        if role.is_bystander() {
            return Ok(None);
        }
        let endpoint = fabric.rendezvous(&spec)?;

        let inbound_peers: Vec<EndpointId> = if role.is_consumer {
            endpoint
                .peers()
                .into_iter()
                .filter(|p| roster.iter().any(|e| e.rank == *p && e.role.is_producer))
                .collect()
        } else {
            Vec::new()
        };

        let dense = |group: &[EndpointId]| group.iter().position(|r| *r == local).map(|i| i as u32);
        Ok(Some(Channel {
            producer_rank: role.is_producer.then(|| dense(&producer_group)).flatten(),
            consumer_rank: role.is_consumer.then(|| dense(&consumer_group)).flatten(),
            local,
            role,
            producer_group,
            consumer_group,
            endpoint,
            streams: Vec::new(),
            pending_hellos: HashMap::new(),
            expect_seq: HashMap::new(),
            inbound_peers,
            closed_peers: HashSet::new(),
            recorder: options.recorder,
            attach_timeout,
            freed: false,
        }))
    }

    pub fn local(&self) -> EndpointId {
        self.local
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Dense rank within the producer group, if this member produces.
    pub fn producer_rank(&self) -> Option<u32> {
        self.producer_rank
    }

    pub fn consumer_rank(&self) -> Option<u32> {
        self.consumer_rank
    }

    pub fn producer_size(&self) -> usize {
        self.producer_group.len()
    }

    pub fn consumer_size(&self) -> usize {
        self.consumer_group.len()
    }

    /// Ordered member list of the producer group (usable for intra-group
    /// addressing; ordering is by global rank).
    pub fn producer_group(&self) -> &[EndpointId] {
        &self.producer_group
    }

    pub fn consumer_group(&self) -> &[EndpointId] {
        &self.consumer_group
    }

    fn check_open(&self) -> Result<()> {
        if self.freed {
            return Err(Error::InvalidChannel("channel was freed".into()));
        }
        Ok(())
    }

    fn stream(&self, handle: StreamHandle) -> Result<&StreamState<C>> {
        self.streams
            .get(handle.0 as usize)
            .ok_or_else(|| Error::Protocol(format!("unknown stream {}", handle.0)))
    }

    fn stream_mut(&mut self, handle: StreamHandle) -> Result<&mut StreamState<C>> {
        self.streams
            .get_mut(handle.0 as usize)
            .ok_or_else(|| Error::Protocol(format!("unknown stream {}", handle.0)))
    }

    /// Collective attach: binds a schema, consumer callbacks, and a routing
    /// policy to a new stream. Stream ids count up per channel, so every
    /// member that attaches in the same order gets the same id. Schema
    /// digests are exchanged pairwise and verified; a mismatch fails the
    /// attach on both sides of every producer/consumer pair.
    pub fn attach(
        &mut self,
        schema: StreamSchema,
        ops: Option<OperationSet<C>>,
        routing: RoutingPolicy,
    ) -> Result<StreamHandle> {
        self.check_open()?;
        if schema.element_size() > MAX_ELEMENT_SIZE {
            return Err(Error::Schema(format!(
                "element size {} exceeds the {MAX_ELEMENT_SIZE}-byte cap",
                schema.element_size()
            )));
        }
        if self.role.is_consumer && ops.is_none() {
            return Err(Error::Protocol(
                "consumers must attach an operation set".into(),
            ));
        }
        if !self.role.is_consumer && ops.is_some() {
            return Err(Error::Protocol(
                "pure producers must not attach an operation set".into(),
            ));
        }
        if self.streams.len() > u16::MAX as usize {
            return Err(Error::Protocol("stream id space exhausted".into()));
        }
        let stream_id = self.streams.len() as u16;
        let digest = schema_digest(&schema);

        let hello = Frame::hello(
            stream_id,
            self.local.0,
            HelloPayload {
                role_flags: self.role.flags(),
                declared_rank: self.local.0,
                schema_digest: digest,
            },
        );
        let peers = self.endpoint.peers();
        for peer in &peers {
            self.endpoint.link(*peer)?.send_blocking(&hello)?;
        }
        let deadline = Instant::now() + self.attach_timeout;
        for peer in peers {
            let payload = self.await_attach_hello(peer, stream_id, deadline)?;
            if payload.schema_digest != digest {
                return Err(Error::SchemaMismatch {
                    local: digest,
                    remote: payload.schema_digest,
                });
            }
        }

        self.streams.push(StreamState {
            schema,
            routing,
            ops,
            terminated_local: false,
            round_robin: 0,
            next_out_seq: HashMap::new(),
            ledger: TerminationLedger::new(self.producer_group.len()),
            init_done: false,
            term_done: false,
            stash: VecDeque::new(),
        });
        Ok(StreamHandle(stream_id))
    }

    fn await_attach_hello(
        &mut self,
        peer: EndpointId,
        stream_id: u16,
        deadline: Instant,
    ) -> Result<HelloPayload> {
        loop {
            if let Some(p) = self.pending_hellos.remove(&(peer.0, stream_id)) {
                return Ok(p);
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(Error::Connection(format!(
                    "timed out waiting for {peer} to attach stream {stream_id}"
                )));
            }
            let poll = self.endpoint.link_mut(peer)?.recv_timeout(remaining)?;
            match poll {
                RecvPoll::Frame(frame) => {
                    if let Some((sid, from, data)) = self.ingest(peer, frame)? {
                        self.streams[sid as usize].stash.push_back((from, data));
                    }
                }
                RecvPoll::Empty => continue,
                RecvPoll::Closed => {
                    return Err(Error::Connection(format!(
                        "{peer} closed its link during attach"
                    )))
                }
            }
        }
    }

    /// Single entry point for inbound frames: validates the sender, checks
    /// sequence continuity, books TERMs and attach HELLOs, and hands DATA
    /// frames back for dispatch.
    fn ingest(
        &mut self,
        peer: EndpointId,
        frame: Frame,
    ) -> Result<Option<(u16, EndpointId, Frame)>> {
        if frame.sender_rank != peer.0 {
            return Err(Error::Protocol(format!(
                "frame on link to {peer} claims sender rank {}",
                frame.sender_rank
            )));
        }
        match frame.kind {
            FrameKind::Hello => {
                let payload = HelloPayload::decode(&frame.payload)?;
                if payload.declared_rank != peer.0 {
                    return Err(Error::Protocol(format!(
                        "attach HELLO on link to {peer} declares rank {}",
                        payload.declared_rank
                    )));
                }
                if self
                    .pending_hellos
                    .insert((peer.0, frame.stream_id), payload)
                    .is_some()
                {
                    return Err(Error::Protocol(format!(
                        "duplicate attach HELLO from {peer} for stream {}",
                        frame.stream_id
                    )));
                }
                Ok(None)
            }
            FrameKind::Data | FrameKind::Term => {
                if !self.producer_group.contains(&peer) {
                    return Err(Error::Protocol(format!(
                        "stream frame from unknown producer {peer}"
                    )));
                }
                let sid = frame.stream_id;
                if sid as usize >= self.streams.len() {
                    return Err(Error::Protocol(format!(
                        "frame for unattached stream {sid} from {peer}"
                    )));
                }
                let expected = self.expect_seq.entry((sid, peer.0)).or_insert(0);
                if frame.seq != *expected {
                    return Err(Error::Protocol(format!(
                        "sequence gap from {peer} on stream {sid}: got {}, expected {expected}",
                        frame.seq
                    )));
                }
                *expected += 1;
                if frame.kind == FrameKind::Term {
                    self.streams[sid as usize].ledger.record(peer)?;
                    Ok(None)
                } else {
                    Ok(Some((sid, peer, frame)))
                }
            }
        }
    }

    /// Producer-side: encode one element, pick a consumer by the stream's
    /// routing policy, and dispatch it.
    pub fn send(
        &mut self,
        handle: StreamHandle,
        values: &Values,
        mode: SendMode,
    ) -> Result<SendOutcome> {
        self.check_open()?;
        let producer_rank = self
            .producer_rank
            .ok_or_else(|| Error::Protocol("send requires the producer role".into()))?;
        let state = self.stream(handle)?;
        if state.terminated_local {
            return Err(Error::StreamTerminated);
        }
        let payload = encode_element(&state.schema, values)?;
        let consumers = self.consumer_group.len();
        let dest_index = match &state.routing {
            RoutingPolicy::RoundRobin => (state.round_robin % consumers as u64) as usize,
            RoutingPolicy::KeyHash(extract) => (extract(values) % consumers as u64) as usize,
            RoutingPolicy::Fixed(map) => {
                let slot = map.get(producer_rank as usize).ok_or_else(|| {
                    Error::Routing(format!(
                        "FIXED map has no entry for producer rank {producer_rank}"
                    ))
                })?;
                let idx = *slot as usize;
                if idx >= consumers {
                    return Err(Error::Routing(format!(
                        "FIXED map sends producer rank {producer_rank} to consumer {idx}, \
                         but the group has {consumers}"
                    )));
                }
                idx
            }
        };
        let dest = self.consumer_group[dest_index];
        let local = self.local.0;

        let state = self.stream_mut(handle)?;
        if matches!(state.routing, RoutingPolicy::RoundRobin) {
            state.round_robin += 1;
        }
        let seq = state.next_out_seq.entry(dest.0).or_insert(0);
        let frame = Frame::data(handle.0, local, *seq, payload);
        *seq += 1;

        let link = self.endpoint.link(dest)?;
        let outcome = match mode {
            SendMode::Block => {
                link.send_blocking(&frame)?;
                SendOutcome::Accepted
            }
            SendMode::NonBlock => {
                let completion = link.send_nonblocking(&frame)?;
                if completion.is_complete() {
                    SendOutcome::Accepted
                } else {
                    SendOutcome::Pending(completion)
                }
            }
        };
        if let Some(r) = &self.recorder {
            r.record_sent();
        }
        Ok(outcome)
    }

    /// Producer-side: signal end of this producer's contribution. TERM goes
    /// to every consumer on the channel, once.
    pub fn terminate(&mut self, handle: StreamHandle) -> Result<()> {
        self.check_open()?;
        if self.producer_rank.is_none() {
            return Err(Error::Protocol("terminate requires the producer role".into()));
        }
        let local = self.local.0;
        let consumers = self.consumer_group.clone();
        let state = self.stream_mut(handle)?;
        if state.terminated_local {
            return Err(Error::AlreadyTerminated);
        }
        state.terminated_local = true;
        let mut frames = Vec::with_capacity(consumers.len());
        for dest in &consumers {
            let seq = state.next_out_seq.entry(dest.0).or_insert(0);
            frames.push((*dest, Frame::term(handle.0, local, *seq)));
            *seq += 1;
        }
        for (dest, frame) in frames {
            self.endpoint.link(dest)?.send_blocking(&frame)?;
        }
        Ok(())
    }

    /// Consumer-side processing loop. Block mode runs to global
    /// termination; step mode services at most one element.
    pub fn operate(
        &mut self,
        handle: StreamHandle,
        mode: OperateMode,
        ctx: &mut C,
    ) -> Result<OperateStatus> {
        self.check_open()?;
        if self.consumer_rank.is_none() {
            return Err(Error::Protocol("operate requires the consumer role".into()));
        }
        self.stream(handle)?;

        // init fires on the first operate call, before any element.
        {
            let state = self.stream_mut(handle)?;
            if !state.init_done {
                state.init_done = true;
                if let Some(ops) = state.ops.as_mut() {
                    if let Some(init) = ops.init.as_mut() {
                        init(ctx)?;
                    }
                }
            }
            if state.term_done {
                return Ok(OperateStatus::Terminated);
            }
        }

        loop {
            // Stashed frames first: they arrived earlier than anything
            // still sitting in the links.
            if let Some((peer, frame)) = self.stream_mut(handle)?.stash.pop_front() {
                self.dispatch_data(handle, peer, frame, ctx)?;
                match mode {
                    OperateMode::Step => return Ok(OperateStatus::Progressed),
                    OperateMode::Block => continue,
                }
            }

            if self.stream(handle)?.ledger.complete() {
                let state = self.stream_mut(handle)?;
                state.term_done = true;
                if let Some(ops) = state.ops.as_mut() {
                    if let Some(term) = ops.term.as_mut() {
                        term(ctx)?;
                    }
                }
                return Ok(OperateStatus::Terminated);
            }

            // Drain whatever the links already buffered.
            let mut progressed = false;
            loop {
                let peers = self.inbound_peers.clone();
                match self.endpoint.recv_any(&peers, None)? {
                    AnyEvent::Frame { peer, frame } => {
                        if let Some((sid, from, data)) = self.ingest(peer, frame)? {
                            if sid == handle.0 {
                                self.dispatch_data(handle, from, data, ctx)?;
                                progressed = true;
                                if mode == OperateMode::Step {
                                    return Ok(OperateStatus::Progressed);
                                }
                            } else {
                                self.streams[sid as usize].stash.push_back((from, data));
                            }
                        }
                        // TERMs and HELLOs were booked inside ingest; loop
                        // so the completion check above can observe them.
                        if self.stream(handle)?.ledger.complete() {
                            break;
                        }
                    }
                    AnyEvent::Closed { peer } => {
                        self.closed_peers.insert(peer.0);
                        if self.stream(handle)?.ledger.missing(peer) {
                            return Err(Error::Connection(format!(
                                "{peer} closed before terminating stream {}",
                                handle.0
                            )));
                        }
                    }
                    AnyEvent::Idle => break,
                }
            }
            if progressed || self.stream(handle)?.ledger.complete() {
                continue;
            }

            // A missing producer that already closed can never terminate us.
            for peer in &self.inbound_peers {
                if self.closed_peers.contains(&peer.0) && self.stream(handle)?.ledger.missing(*peer)
                {
                    return Err(Error::Connection(format!(
                        "{peer} closed before terminating stream {}",
                        handle.0
                    )));
                }
            }

            // Idle: give the background callback a turn.
            let state = self.stream_mut(handle)?;
            let has_background = state
                .ops
                .as_mut()
                .map(|o| o.background.is_some())
                .unwrap_or(false);
            if has_background {
                let ops = state.ops.as_mut().unwrap();
                (ops.background.as_mut().unwrap())(ctx)?;
            }
            match mode {
                OperateMode::Step => return Ok(OperateStatus::Idle),
                OperateMode::Block => {
                    let wait = if has_background {
                        IDLE_WAIT_WITH_BACKGROUND
                    } else {
                        IDLE_WAIT
                    };
                    let peers = self.inbound_peers.clone();
                    match self.endpoint.recv_any(&peers, Some(wait))? {
                        AnyEvent::Frame { peer, frame } => {
                            if let Some((sid, from, data)) = self.ingest(peer, frame)? {
                                self.streams[sid as usize].stash.push_back((from, data));
                            }
                        }
                        AnyEvent::Closed { peer } => {
                            self.closed_peers.insert(peer.0);
                        }
                        AnyEvent::Idle => {}
                    }
                }
            }
        }
    }

    fn dispatch_data(
        &mut self,
        handle: StreamHandle,
        peer: EndpointId,
        frame: Frame,
        ctx: &mut C,
    ) -> Result<()> {
        let producer_index = self
            .producer_group
            .iter()
            .position(|p| *p == peer)
            .ok_or_else(|| Error::Protocol(format!("stream frame from unknown producer {peer}")))?
            as u32;
        let meta = ElementMeta {
            producer: peer,
            producer_index,
            seq: frame.seq,
            stream: handle,
        };
        let state = self.stream_mut(handle)?;
        let values = decode_element(&state.schema, &frame.payload)?;
        let ops = state
            .ops
            .as_mut()
            .ok_or_else(|| Error::Protocol("no operation set on this consumer stream".into()))?;
        (ops.process)(ctx, &meta, &values)?;
        if let Some(r) = &self.recorder {
            r.record_processed();
        }
        Ok(())
    }

    /// Releases the channel. Every attached stream must be finished:
    /// terminated by this producer, and globally terminated for this
    /// consumer. Links are flushed and closed.
    pub fn free(&mut self) -> Result<()> {
        if self.freed {
            return Err(Error::AlreadyFreed);
        }
        for (i, s) in self.streams.iter().enumerate() {
            if self.role.is_producer && !s.terminated_local {
                return Err(Error::ChannelInUse(format!(
                    "stream {i} not terminated by this producer"
                )));
            }
            if self.role.is_consumer && !s.term_done {
                return Err(Error::ChannelInUse(format!(
                    "stream {i} not globally terminated for this consumer"
                )));
            }
        }
        self.freed = true;
        self.endpoint.close()
    }

    pub fn is_freed(&self) -> bool {
        self.freed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_counts_distinct_producers() {
        let mut ledger = TerminationLedger::new(2);
        assert!(!ledger.complete());
        ledger.record(EndpointId(0)).unwrap();
        assert_eq!(ledger.count(), 1);
        assert!(!ledger.complete());
        assert!(ledger.record(EndpointId(0)).is_err());
        ledger.record(EndpointId(1)).unwrap();
        assert!(ledger.complete());
    }

    #[test]
    fn routing_policy_debug_is_stable() {
        let rr = format!("{:?}", RoutingPolicy::RoundRobin);
        assert_eq!(rr, "RoundRobin");
        let fixed = format!("{:?}", RoutingPolicy::Fixed(vec![0, 1]));
        assert_eq!(fixed, "Fixed([0, 1])");
    }
}
