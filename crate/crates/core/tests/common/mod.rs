//! Shared multi-rank test driver: one thread per roster member, over
//! either fabric, with non-overlapping TCP port ranges across tests.

use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener};
use std::sync::atomic::{AtomicU16, Ordering};
use std::sync::Arc;
use std::thread;

use streamkit::transport::{Fabric, LoopbackFabric, Role, RosterEntry, TcpFabric};

static NEXT_PORT: AtomicU16 = AtomicU16::new(45_000);

pub fn port_base(span: u16) -> u16 {
    loop {
        let base = NEXT_PORT.fetch_add(span.max(1), Ordering::Relaxed);
        let all_free = (0..span).all(|i| {
            TcpListener::bind(SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), base + i)).is_ok()
        });
        if all_free {
            return base;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Kind {
    Loopback,
    Tcp,
}

pub const BOTH_KINDS: [Kind; 2] = [Kind::Loopback, Kind::Tcp];

/// Addressing plan for one multi-channel topology.
pub struct GroupNet {
    pub kind: Kind,
    pub members: Vec<(u32, Role)>,
    base: u16,
}

impl GroupNet {
    pub fn new(kind: Kind, members: &[(u32, Role)], channels: u32) -> GroupNet {
        let base = match kind {
            Kind::Loopback => 0,
            Kind::Tcp => port_base((channels as u16) * members.len() as u16),
        };
        GroupNet {
            kind,
            members: members.to_vec(),
            base,
        }
    }

    pub fn addr(&self, channel: u32, rank: u32) -> SocketAddr {
        let slot = self
            .members
            .iter()
            .position(|(r, _)| *r == rank)
            .expect("rank in members") as u16;
        let port = self.base + (channel as u16) * self.members.len() as u16 + slot;
        SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), port)
    }

    pub fn roster(&self, channel: u32) -> Vec<RosterEntry> {
        self.members
            .iter()
            .map(|(rank, role)| match self.kind {
                Kind::Loopback => RosterEntry::new(*rank, *role),
                Kind::Tcp => RosterEntry::with_addr(*rank, *role, self.addr(channel, *rank)),
            })
            .collect()
    }

    pub fn fabric(&self) -> Arc<dyn Fabric> {
        match self.kind {
            Kind::Loopback => Arc::new(LoopbackFabric::new()),
            Kind::Tcp => Arc::new(TcpFabric::new()),
        }
    }
}

/// Runs `body` once per member on its own thread; panics propagate.
pub fn run_topology<T: Send + 'static>(
    kind: Kind,
    members: &[(u32, Role)],
    channels: u32,
    body: impl Fn(u32, Role, Arc<GroupNet>, Arc<dyn Fabric>) -> T + Send + Sync + 'static,
) -> Vec<T> {
    let net = Arc::new(GroupNet::new(kind, members, channels));
    let fabric = net.fabric();
    let body = Arc::new(body);
    let handles: Vec<_> = net
        .members
        .iter()
        .map(|(rank, role)| {
            let (rank, role) = (*rank, *role);
            let net = Arc::clone(&net);
            let fabric = Arc::clone(&fabric);
            let body = Arc::clone(&body);
            thread::Builder::new()
                .name(format!("member-{rank}"))
                .spawn(move || body(rank, role, net, fabric))
                .expect("spawn member thread")
        })
        .collect();
    handles
        .into_iter()
        .map(|h| h.join().expect("member thread panicked"))
        .collect()
}

/// Producers 0..p, consumers p..p+c.
pub fn bipartite(p: u32, c: u32) -> Vec<(u32, Role)> {
    (0..p)
        .map(|r| (r, Role::PRODUCER))
        .chain((p..p + c).map(|r| (r, Role::CONSUMER)))
        .collect()
}
