//! Link-level behavior, run against both fabrics: the in-process queues
//! and TCP must satisfy the same contract.

use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener};
use std::sync::atomic::{AtomicU16, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use streamkit::frame::{Frame, FrameKind, HelloPayload};
use streamkit::transport::{
    AnyEvent, Endpoint, EndpointId, Fabric, Link, LoopbackFabric, RecvMode, RecvPoll,
    RendezvousSpec, Role, RosterEntry, TcpFabric, TransportOptions,
};
use streamkit::Error;

/// Hands out non-overlapping port ranges across concurrently running tests.
static NEXT_PORT: AtomicU16 = AtomicU16::new(42_000);

fn port_base(span: u16) -> u16 {
    loop {
        let base = NEXT_PORT.fetch_add(span.max(1), Ordering::Relaxed);
        let all_free = (0..span).all(|i| {
            TcpListener::bind(SocketAddr::new(
                IpAddr::V4(Ipv4Addr::LOCALHOST),
                base + i,
            ))
            .is_ok()
        });
        if all_free {
            return base;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Kind {
    Loopback,
    Tcp,
}

const BOTH: [Kind; 2] = [Kind::Loopback, Kind::Tcp];

struct Topology {
    roster: Vec<RosterEntry>,
    fabric: Arc<dyn Fabric>,
}

impl Topology {
    /// Ranks 0..p are producers, the next c are consumers.
    fn new(kind: Kind, producers: u32, consumers: u32) -> Topology {
        let n = producers + consumers;
        let base = match kind {
            Kind::Loopback => 0,
            Kind::Tcp => port_base(n as u16),
        };
        let roster: Vec<RosterEntry> = (0..n)
            .map(|r| {
                let role = if r < producers { Role::PRODUCER } else { Role::CONSUMER };
                match kind {
                    Kind::Loopback => RosterEntry::new(r, role),
                    Kind::Tcp => RosterEntry::with_addr(
                        r,
                        role,
                        SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), base + r as u16),
                    ),
                }
            })
            .collect();
        let fabric: Arc<dyn Fabric> = match kind {
            Kind::Loopback => Arc::new(LoopbackFabric::new()),
            Kind::Tcp => Arc::new(TcpFabric::new()),
        };
        Topology { roster, fabric }
    }

    fn spec(&self, rank: u32) -> RendezvousSpec {
        self.spec_with(rank, TransportOptions::default())
    }

    fn spec_with(&self, rank: u32, options: TransportOptions) -> RendezvousSpec {
        let role = self
            .roster
            .iter()
            .find(|e| e.rank == EndpointId(rank))
            .unwrap()
            .role;
        RendezvousSpec {
            channel_tag: 0,
            local_rank: EndpointId(rank),
            local_role: role,
            roster: self.roster.clone(),
            options,
        }
    }

    /// Runs one closure per rank on its own thread and collects results.
    fn run<T: Send + 'static>(
        &self,
        body: impl Fn(u32, Arc<dyn Fabric>, RendezvousSpec) -> T + Send + Sync + 'static,
    ) -> Vec<T> {
        let body = Arc::new(body);
        let handles: Vec<_> = self
            .roster
            .iter()
            .map(|e| {
                let rank = e.rank.0;
                let fabric = Arc::clone(&self.fabric);
                let spec = self.spec(rank);
                let body = Arc::clone(&body);
                thread::spawn(move || body(rank, fabric, spec))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("rank thread")).collect()
    }
}

fn data(seq: u64, rank: u32, fill: u8) -> Frame {
    Frame::data(0, rank, seq, vec![fill; 16])
}

fn recv_next(endpoint: &mut Endpoint, peer: EndpointId) -> Frame {
    match endpoint
        .link_mut(peer)
        .unwrap()
        .recv_timeout(Duration::from_secs(10))
        .unwrap()
    {
        RecvPoll::Frame(f) => f,
        other => panic!("expected frame from {peer}, got {other:?}"),
    }
}

#[test]
fn minimal_topology_has_one_link_each() {
    for kind in BOTH {
        let topo = Topology::new(kind, 1, 1);
        let links = topo.run(|_, fabric, spec| fabric.rendezvous(&spec).unwrap().peers().len());
        assert_eq!(links, vec![1, 1], "{kind:?}");
    }
}

#[test]
fn two_producers_three_consumers_link_counts() {
    for kind in BOTH {
        let topo = Topology::new(kind, 2, 3);
        let links = topo.run(|rank, fabric, spec| (rank, fabric.rendezvous(&spec).unwrap().peers().len()));
        for (rank, count) in links {
            let expected = if rank < 2 { 3 } else { 2 };
            assert_eq!(count, expected, "{kind:?} rank {rank}");
        }
    }
}

#[test]
fn echo_roundtrip_delivers_identical_frame() {
    for kind in BOTH {
        let topo = Topology::new(kind, 1, 1);
        let mut results = topo.run(move |rank, fabric, spec| {
            let mut ep = fabric.rendezvous(&spec).unwrap();
            if rank == 0 {
                let f = Frame::data(3, 0, 9, (0..64).collect());
                ep.link(EndpointId(1)).unwrap().send_blocking(&f).unwrap();
                ep.close().unwrap();
                None
            } else {
                let got = recv_next(&mut ep, EndpointId(0));
                Some(got)
            }
        });
        let got = results.pop().unwrap().unwrap();
        assert_eq!(got, Frame::data(3, 0, 9, (0..64).collect()), "{kind:?}");
    }
}

#[test]
fn ten_thousand_frames_arrive_in_seq_order() {
    for kind in BOTH {
        let topo = Topology::new(kind, 1, 1);
        let counts = topo.run(move |rank, fabric, spec| {
            let mut ep = fabric.rendezvous(&spec).unwrap();
            if rank == 0 {
                let link = ep.link(EndpointId(1)).unwrap();
                for seq in 0..10_000u64 {
                    link.send_blocking(&data(seq, 0, (seq % 251) as u8)).unwrap();
                }
                ep.close().unwrap();
                0u64
            } else {
                let mut expected = 0u64;
                loop {
                    match ep
                        .link_mut(EndpointId(0))
                        .unwrap()
                        .recv_timeout(Duration::from_secs(10))
                        .unwrap()
                    {
                        RecvPoll::Frame(f) => {
                            assert_eq!(f.seq, expected, "{kind:?}");
                            expected += 1;
                        }
                        RecvPoll::Closed => break,
                        RecvPoll::Empty => panic!("timed out mid-stream"),
                    }
                }
                expected
            }
        });
        assert_eq!(counts[1], 10_000, "{kind:?}");
    }
}

#[test]
fn send_after_close_is_link_closed() {
    for kind in BOTH {
        let topo = Topology::new(kind, 1, 1);
        let errs = topo.run(move |rank, fabric, spec| {
            let mut ep = fabric.rendezvous(&spec).unwrap();
            if rank == 0 {
                let link_peer = EndpointId(1);
                ep.link(link_peer).unwrap().send_blocking(&data(0, 0, 1)).unwrap();
                ep.close().unwrap();
                let err = ep.link(link_peer).unwrap().send_blocking(&data(1, 0, 1));
                Some(matches!(err, Err(Error::LinkClosed)))
            } else {
                let _ = recv_next(&mut ep, EndpointId(0));
                // Drain to the clean close.
                loop {
                    match ep.link_mut(EndpointId(0)).unwrap().recv_timeout(Duration::from_secs(5)) {
                        Ok(RecvPoll::Closed) => break,
                        Ok(_) => continue,
                        Err(e) => panic!("{e}"),
                    }
                }
                None
            }
        });
        assert_eq!(errs[0], Some(true), "{kind:?}");
    }
}

#[test]
fn poll_on_idle_link_is_empty() {
    for kind in BOTH {
        let topo = Topology::new(kind, 1, 1);
        let results = topo.run(move |rank, fabric, spec| {
            let mut ep = fabric.rendezvous(&spec).unwrap();
            let peer = EndpointId(1 - rank);
            if rank == 0 {
                // The peer sends nothing until it hears from us, so this
                // link is provably idle.
                let poll = ep.link_mut(peer).unwrap().recv(RecvMode::Poll).unwrap();
                let idle = matches!(poll, RecvPoll::Empty);
                ep.link(peer).unwrap().send_blocking(&data(0, rank, 0)).unwrap();
                let _ = recv_next(&mut ep, peer);
                ep.close().unwrap();
                idle
            } else {
                let _ = recv_next(&mut ep, peer);
                ep.link(peer).unwrap().send_blocking(&data(0, rank, 0)).unwrap();
                ep.close().unwrap();
                true
            }
        });
        assert_eq!(results, vec![true, true], "{kind:?}");
    }
}

#[test]
fn block_after_peer_term_returns_the_term_frame() {
    for kind in BOTH {
        let topo = Topology::new(kind, 1, 1);
        let results = topo.run(move |rank, fabric, spec| {
            let mut ep = fabric.rendezvous(&spec).unwrap();
            if rank == 0 {
                ep.link(EndpointId(1)).unwrap().send_blocking(&Frame::term(0, 0, 0)).unwrap();
                ep.close().unwrap();
                true
            } else {
                let got = recv_next(&mut ep, EndpointId(0));
                got.kind == FrameKind::Term && got.payload.is_empty()
            }
        });
        assert!(results[1], "{kind:?}");
    }
}

#[test]
fn interleaved_producers_keep_per_peer_order() {
    for kind in BOTH {
        let topo = Topology::new(kind, 2, 1);
        let audits = topo.run(move |rank, fabric, spec| {
            let mut ep = fabric.rendezvous(&spec).unwrap();
            if rank < 2 {
                let link = ep.link(EndpointId(2)).unwrap();
                for seq in 0..2_000u64 {
                    link.send_blocking(&data(seq, rank, rank as u8)).unwrap();
                }
                ep.close().unwrap();
                None
            } else {
                let mut next = [0u64; 2];
                let mut open = 2;
                let peers = [EndpointId(0), EndpointId(1)];
                while open > 0 {
                    match ep.recv_any(&peers, Some(Duration::from_secs(10))).unwrap() {
                        AnyEvent::Frame { peer, frame } => {
                            let p = peer.0 as usize;
                            assert_eq!(frame.seq, next[p], "{kind:?} per-peer order");
                            next[p] += 1;
                        }
                        AnyEvent::Closed { .. } => open -= 1,
                        AnyEvent::Idle => panic!("starved"),
                    }
                }
                Some(next)
            }
        });
        assert_eq!(audits[2], Some([2_000, 2_000]), "{kind:?}");
    }
}

#[test]
fn unreachable_peer_times_out_with_connection_error() {
    // TCP: the roster names an address nobody binds.
    let base = port_base(2);
    let roster = vec![
        RosterEntry::with_addr(
            0,
            Role::PRODUCER,
            SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), base),
        ),
        RosterEntry::with_addr(
            1,
            Role::CONSUMER,
            SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), base + 1),
        ),
    ];
    let spec = RendezvousSpec {
        channel_tag: 0,
        local_rank: EndpointId(1),
        local_role: Role::CONSUMER,
        roster,
        options: TransportOptions {
            rendezvous_timeout: Duration::from_millis(300),
            ..Default::default()
        },
    };
    match TcpFabric::new().rendezvous(&spec) {
        Err(Error::Connection(msg)) => assert!(msg.contains("rank 0"), "{msg}"),
        other => panic!("expected connection error, got {other:?}"),
    }

    // Loopback: the peer thread never shows up.
    let fabric = LoopbackFabric::new();
    let spec = RendezvousSpec {
        channel_tag: 0,
        local_rank: EndpointId(0),
        local_role: Role::PRODUCER,
        roster: vec![
            RosterEntry::new(0, Role::PRODUCER),
            RosterEntry::new(1, Role::CONSUMER),
        ],
        options: TransportOptions {
            rendezvous_timeout: Duration::from_millis(200),
            ..Default::default()
        },
    };
    assert!(matches!(fabric.rendezvous(&spec), Err(Error::Connection(_))));
}

#[test]
fn duplicate_rank_in_hello_is_a_protocol_error() {
    // Two threads both claim rank 1; the consumer expects HELLOs from
    // ranks 1 and 2 and must reject the duplicate.
    let base = port_base(3);
    let addr = |r: u16| SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), base + r);
    let roster = vec![
        RosterEntry::with_addr(0, Role::CONSUMER, addr(0)),
        RosterEntry::with_addr(1, Role::PRODUCER, addr(1)),
        RosterEntry::with_addr(2, Role::PRODUCER, addr(2)),
    ];
    let opts = || TransportOptions {
        rendezvous_timeout: Duration::from_secs(5),
        ..Default::default()
    };
    let mut handles = Vec::new();
    for _ in 0..2 {
        let roster = roster.clone();
        let opts = opts();
        handles.push(thread::spawn(move || {
            let spec = RendezvousSpec {
                channel_tag: 0,
                local_rank: EndpointId(1), // the liar also claims rank 1
                local_role: Role::PRODUCER,
                roster,
                options: opts,
            };
            TcpFabric::new().rendezvous(&spec)
        }));
    }
    let spec = RendezvousSpec {
        channel_tag: 0,
        local_rank: EndpointId(0),
        local_role: Role::CONSUMER,
        roster,
        options: opts(),
    };
    let consumer = TcpFabric::new().rendezvous(&spec);
    match consumer {
        Err(Error::Protocol(msg)) => assert!(msg.contains("duplicate"), "{msg}"),
        other => panic!("expected duplicate-rank protocol error, got {other:?}"),
    }
    for h in handles {
        let _ = h.join().unwrap();
    }
}

#[test]
fn role_mismatch_between_hello_and_roster_is_a_protocol_error() {
    // Local self-check: the declared role must match the roster.
    let topo = Topology::new(Kind::Loopback, 1, 1);
    let mut spec = topo.spec(0);
    spec.local_role = Role::CONSUMER; // roster says producer
    match topo.fabric.rendezvous(&spec) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("role"), "{msg}"),
        other => panic!("expected protocol error, got {other:?}"),
    }

    // Peer-side check: the liar uses a roster that flips its own role, so
    // its HELLO disagrees with what the honest side expects.
    let base = port_base(2);
    let addr = |r: u16| SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), base + r);
    let honest_roster = vec![
        RosterEntry::with_addr(0, Role::CONSUMER, addr(0)),
        RosterEntry::with_addr(1, Role::PRODUCER, addr(1)),
    ];
    let mut liar_roster = honest_roster.clone();
    liar_roster[1].role = Role::BOTH;
    let liar = thread::spawn(move || {
        let spec = RendezvousSpec {
            channel_tag: 0,
            local_rank: EndpointId(1),
            local_role: Role::BOTH,
            roster: liar_roster,
            options: TransportOptions {
                rendezvous_timeout: Duration::from_secs(5),
                ..Default::default()
            },
        };
        TcpFabric::new().rendezvous(&spec)
    });
    let spec = RendezvousSpec {
        channel_tag: 0,
        local_rank: EndpointId(0),
        local_role: Role::CONSUMER,
        roster: honest_roster,
        options: TransportOptions {
            rendezvous_timeout: Duration::from_secs(5),
            ..Default::default()
        },
    };
    match TcpFabric::new().rendezvous(&spec) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("role"), "{msg}"),
        other => panic!("expected protocol error, got {other:?}"),
    }
    let _ = liar.join().unwrap();
}

#[test]
fn full_queue_backpressures_nonblocking_sends() {
    for kind in BOTH {
        let topo = Topology::new(kind, 1, 1);
        let depth = 8usize;
        let results = topo.run(move |rank, fabric, mut spec| {
            spec.options.queue_depth = depth;
            let mut ep = fabric.rendezvous(&spec).unwrap();
            if rank == 0 {
                let link = ep.link(EndpointId(1)).unwrap();
                let mut completions = Vec::new();
                for seq in 0..(depth as u64 + 4) {
                    completions.push(link.send_nonblocking(&data(seq, 0, 0)).unwrap());
                }
                let resolved = completions.iter().filter(|c| c.is_complete()).count();
                // Everything resolves once the consumer drains.
                for c in &completions {
                    c.wait().unwrap();
                }
                ep.close().unwrap();
                Some(resolved)
            } else {
                thread::sleep(Duration::from_millis(150)); // let the queue fill
                let mut seen = 0;
                loop {
                    match ep.link_mut(EndpointId(0)).unwrap().recv_timeout(Duration::from_secs(5)) {
                        Ok(RecvPoll::Frame(_)) => seen += 1,
                        Ok(RecvPoll::Closed) => break,
                        Ok(RecvPoll::Empty) => panic!("starved"),
                        Err(e) => panic!("{e}"),
                    }
                }
                assert_eq!(seen, depth + 4, "{kind:?} all frames delivered");
                None
            }
        });
        let resolved = results[0].unwrap();
        assert!(
            resolved <= depth + 1,
            "{kind:?}: a full queue must leave completions pending (resolved {resolved})"
        );
    }
}

#[test]
fn clean_shutdown_delivers_everything_before_closed() {
    for kind in BOTH {
        let topo = Topology::new(kind, 1, 1);
        let counts = topo.run(move |rank, fabric, spec| {
            let mut ep = fabric.rendezvous(&spec).unwrap();
            if rank == 0 {
                let link = ep.link(EndpointId(1)).unwrap();
                for seq in 0..500u64 {
                    link.send_blocking(&data(seq, 0, 7)).unwrap();
                }
                ep.close().unwrap();
                0usize
            } else {
                thread::sleep(Duration::from_millis(100)); // close happens first
                let mut seen = 0usize;
                loop {
                    match ep.link_mut(EndpointId(0)).unwrap().recv_timeout(Duration::from_secs(5)) {
                        Ok(RecvPoll::Frame(_)) => seen += 1,
                        Ok(RecvPoll::Closed) => break,
                        Ok(RecvPoll::Empty) => panic!("starved"),
                        Err(e) => panic!("{e}"),
                    }
                }
                seen
            }
        });
        assert_eq!(counts[1], 500, "{kind:?}: loss-free under clean shutdown");
    }
}

/// Drives the TCP reader against raw garbage: a framing error surfaces and
/// the link closes.
#[test]
fn corrupt_bytes_surface_a_framing_error_and_close_the_link() {
    use std::io::{Read, Write};

    let base = port_base(2);
    let addr0 = SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), base);
    let listener = TcpListener::bind(addr0).unwrap();

    // Rank 1 connects to "rank 0" (this test), which answers the HELLO by
    // hand and then writes garbage.
    let roster = vec![
        RosterEntry::with_addr(0, Role::CONSUMER, addr0),
        RosterEntry::with_addr(
            1,
            Role::PRODUCER,
            SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), base + 1),
        ),
    ];
    let spec = RendezvousSpec {
        channel_tag: 0,
        local_rank: EndpointId(1),
        local_role: Role::PRODUCER,
        roster,
        options: TransportOptions::default(),
    };
    let joiner = thread::spawn(move || {
        let mut ep = TcpFabric::new().rendezvous(&spec).unwrap();
        let link: &mut Link = ep.link_mut(EndpointId(0)).unwrap();
        let first = link.recv_timeout(Duration::from_secs(5));
        let second = link.recv_timeout(Duration::from_secs(5));
        (
            matches!(first, Err(Error::Framing(_))),
            matches!(second, Ok(RecvPoll::Closed)),
        )
    });

    let (mut sock, _) = listener.accept().unwrap();
    let mut hello = vec![0u8; 23 + 13];
    sock.read_exact(&mut hello).unwrap();
    let reply = Frame::hello(
        0,
        0,
        HelloPayload {
            role_flags: Role::CONSUMER.flags(),
            declared_rank: 0,
            schema_digest: 0,
        },
    );
    sock.write_all(&reply.encode()).unwrap();
    sock.write_all(&[0xDE, 0xAD, 0xBE, 0xEF, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19])
        .unwrap();
    sock.flush().unwrap();
    drop(sock);

    let (framing, closed) = joiner.join().unwrap();
    assert!(framing, "corrupt magic must surface as a framing error");
    assert!(closed, "after a framing error the link reads as closed");
}
