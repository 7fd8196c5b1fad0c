//! In-process fabric: links are pairs of bounded queues shared between
//! rank threads. Messages are the same encoded frame bytes the socket
//! fabric writes, so framing is exercised without a network.

use std::collections::HashMap;
use std::sync::Mutex;

use crossbeam_channel::{bounded, Receiver, Sender};

use crate::error::{Error, Result};
use crate::transport::{
    check_hello, hello_frame, Endpoint, EndpointId, Fabric, Link, RecvPoll, RendezvousSpec,
};

type Bytes = Vec<u8>;

/// Both directions of one link, waiting for their owners to claim them.
struct PairSlot {
    lo_end: Option<(Sender<Bytes>, Receiver<Bytes>)>,
    hi_end: Option<(Sender<Bytes>, Receiver<Bytes>)>,
}

/// Shared wiring hub for one in-process run. Every rank thread holds a
/// clone of the same `Arc<LoopbackFabric>`.
#[derive(Default)]
pub struct LoopbackFabric {
    registry: Mutex<HashMap<(u32, u32, u32), PairSlot>>,
}

impl LoopbackFabric {
    pub fn new() -> Self {
        Self::default()
    }

    /// Claims this endpoint's end of the (tag, lo, hi) queue pair,
    /// creating the pair on first claim.
    fn claim(
        &self,
        tag: u32,
        local: EndpointId,
        peer: EndpointId,
        depth: usize,
    ) -> Result<(Sender<Bytes>, Receiver<Bytes>)> {
        let (lo, hi) = (local.min(peer), local.max(peer));
        let mut reg = self.registry.lock().unwrap();
        let slot = reg.entry((tag, lo.0, hi.0)).or_insert_with(|| {
            if lo == hi {
                // Self-link: one queue, both ends owned by the same rank.
                let (tx, rx) = bounded(depth);
                PairSlot {
                    lo_end: Some((tx, rx)),
                    hi_end: None,
                }
            } else {
                let (lo_tx, hi_rx) = bounded(depth);
                let (hi_tx, lo_rx) = bounded(depth);
                PairSlot {
                    lo_end: Some((lo_tx, lo_rx)),
                    hi_end: Some((hi_tx, hi_rx)),
                }
            }
        });
        let end = if local == lo { &mut slot.lo_end } else { &mut slot.hi_end };
        end.take().ok_or_else(|| {
            Error::Protocol(format!(
                "duplicate rank: {local} claimed its link to {peer} twice"
            ))
        })
    }
}

impl Fabric for LoopbackFabric {
    fn rendezvous(&self, spec: &RendezvousSpec) -> Result<Endpoint> {
        spec.validate()?;
        let local = spec.local_rank;
        let mut links = Vec::new();
        for peer in spec.peer_ranks() {
            let (tx, rx) = self.claim(spec.channel_tag, local, peer, spec.options.queue_depth)?;
            let peer_role = spec.entry(peer).unwrap().role;
            let link = Link::new(peer, peer_role, tx, rx);
            link.send_blocking(&hello_frame(local, spec.local_role))?;
            links.push(link);
        }
        // Await HELLOs after sending ours on every link, so two-sided
        // exchanges cannot deadlock regardless of thread start order.
        for link in &mut links {
            let peer = link.peer();
            match link.recv_timeout(spec.options.rendezvous_timeout)? {
                RecvPoll::Frame(frame) => check_hello(&frame, peer, link.peer_role())?,
                RecvPoll::Empty => {
                    return Err(Error::Connection(format!(
                        "timed out after {:?} waiting for {peer} to join the channel",
                        spec.options.rendezvous_timeout
                    )))
                }
                RecvPoll::Closed => {
                    return Err(Error::Connection(format!("{peer} closed during rendezvous")))
                }
            }
        }
        Ok(Endpoint::new(local, links))
    }
}
