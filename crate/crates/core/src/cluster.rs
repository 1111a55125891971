//! Drivers that run a set of endpoints over a channel.
//!
//! Node `i` of a cluster is `endpoints[i]` and has address `NodeId(i)`.

use std::fmt;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::channel::{ChannelConfig, ChannelError, NodeId, SimChannel, UdpChannel};
use crate::endpoint::Endpoint;
use crate::time::Timestamp;
use crate::wire::{Packet, MAX_DATAGRAM};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("packet addressed to unknown node {0:?}")]
    UnknownNode(NodeId),
}

pub trait Cluster {
    fn now(&self) -> Timestamp;

    fn endpoints(&self) -> &[Endpoint];

    fn endpoints_mut(&mut self) -> &mut [Endpoint];

    /// Runs until `done` holds or the clock reaches `horizon`.
    /// Returns whether `done` was reached.
    fn run_until(
        &mut self,
        horizon: Timestamp,
        done: &mut dyn FnMut(&[Endpoint]) -> bool,
    ) -> Result<bool, ClusterError>;
}

/// Decides whether a packet from the first node to the second may enter the
/// channel. Used to inject targeted loss on top of the channel's random loss.
pub type PacketFilter = Box<dyn FnMut(NodeId, NodeId, &Packet) -> bool>;

/// Endpoints on a [`SimChannel`] with a virtual clock.
pub struct SimCluster {
    channel: SimChannel,
    endpoints: Vec<Endpoint>,
    wakeups: Vec<Option<Timestamp>>,
    dirty: Vec<bool>,
    now: Timestamp,
    filter: Option<PacketFilter>,
}

impl fmt::Debug for SimCluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimCluster")
            .field("channel", &self.channel)
            .field("endpoints", &self.endpoints)
            .field("now", &self.now)
            .field("filtered", &self.filter.is_some())
            .finish()
    }
}

impl SimCluster {
    pub fn new(nodes: usize, config: ChannelConfig) -> Result<Self, ClusterError> {
        let endpoints = (0..nodes).map(|i| Endpoint::new(NodeId(i as u16))).collect();
        Ok(SimCluster {
            channel: SimChannel::new(config)?,
            endpoints,
            wakeups: vec![None; nodes],
            dirty: vec![true; nodes],
            now: Timestamp::ZERO,
            filter: None,
        })
    }

    pub fn channel(&self) -> &SimChannel {
        &self.channel
    }

    /// Packets for which `filter` returns false are silently discarded.
    pub fn set_filter(&mut self, filter: impl FnMut(NodeId, NodeId, &Packet) -> bool + 'static) {
        self.filter = Some(Box::new(filter));
    }

    fn flush(&mut self, i: usize) -> Result<(), ClusterError> {
        let now = self.now;
        while let Some((to, packet)) = self.endpoints[i].poll_transmit(now) {
            if to.0 as usize >= self.endpoints.len() {
                return Err(ClusterError::UnknownNode(to));
            }
            let from = NodeId(i as u16);
            if self.filter.as_mut().is_some_and(|f| !f(from, to, &packet)) {
                continue;
            }
            self.channel.send(from, to, packet.encode())?;
        }
        self.wakeups[i] = self.endpoints[i].next_wakeup();
        self.dirty[i] = false;
        Ok(())
    }
}

impl Cluster for SimCluster {
    fn now(&self) -> Timestamp {
        self.now
    }

    fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }

    fn endpoints_mut(&mut self) -> &mut [Endpoint] {
        // The caller may start flows or change policies.
        self.dirty.iter_mut().for_each(|d| *d = true);
        &mut self.endpoints
    }

    fn run_until(
        &mut self,
        horizon: Timestamp,
        done: &mut dyn FnMut(&[Endpoint]) -> bool,
    ) -> Result<bool, ClusterError> {
        loop {
            for i in 0..self.endpoints.len() {
                if self.dirty[i] || self.wakeups[i].is_some_and(|t| t <= self.now) {
                    self.flush(i)?;
                }
            }
            if done(&self.endpoints) {
                return Ok(true);
            }
            let next = self
                .wakeups
                .iter()
                .flatten()
                .copied()
                .chain(self.channel.next_event_time())
                .min();
            let Some(next) = next.filter(|&t| t <= horizon) else {
                if horizon != Timestamp::MAX {
                    self.channel.advance_clock(horizon)?;
                    self.now = horizon;
                }
                return Ok(done(&self.endpoints));
            };
            let next = next.max(self.now);
            for d in self.channel.advance_clock(next)? {
                let to = d.to.0 as usize;
                self.endpoints[to].handle_datagram(d.at, d.from, &d.datagram);
                self.dirty[to] = true;
            }
            self.now = next;
        }
    }
}

/// Endpoints on loopback UDP sockets, driven from one thread on the wall clock.
#[derive(Debug)]
pub struct UdpCluster {
    endpoints: Vec<Endpoint>,
    sockets: Vec<UdpChannel>,
    addrs: Vec<SocketAddr>,
    start: Instant,
}

impl UdpCluster {
    /// Binds one socket per node at `bind` (port 0 picks a free port).
    pub fn bind(nodes: usize, bind: SocketAddr, loss_rate: f64, seed: u64) -> Result<Self, ClusterError> {
        let mut sockets = Vec::with_capacity(nodes);
        let mut addrs = Vec::with_capacity(nodes);
        for i in 0..nodes {
            let s = UdpChannel::bind(bind, loss_rate, seed.wrapping_add(i as u64))?;
            addrs.push(s.local_addr()?);
            sockets.push(s);
        }
        let endpoints = (0..nodes).map(|i| Endpoint::new(NodeId(i as u16))).collect();
        Ok(UdpCluster { endpoints, sockets, addrs, start: Instant::now() })
    }

    pub fn addrs(&self) -> &[SocketAddr] {
        &self.addrs
    }
}

impl Cluster for UdpCluster {
    fn now(&self) -> Timestamp {
        Timestamp::from_duration(self.start.elapsed())
    }

    fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }

    fn endpoints_mut(&mut self) -> &mut [Endpoint] {
        &mut self.endpoints
    }

    fn run_until(
        &mut self,
        horizon: Timestamp,
        done: &mut dyn FnMut(&[Endpoint]) -> bool,
    ) -> Result<bool, ClusterError> {
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        loop {
            let mut busy = false;
            let now = self.now();
            for i in 0..self.endpoints.len() {
                while let Some((to, packet)) = self.endpoints[i].poll_transmit(now) {
                    let dest = *self.addrs.get(to.0 as usize).ok_or(ClusterError::UnknownNode(to))?;
                    self.sockets[i].send(&packet.encode(), dest)?;
                    busy = true;
                }
            }
            for i in 0..self.endpoints.len() {
                while let Some((n, from)) = self.sockets[i].try_recv(&mut buf)? {
                    busy = true;
                    let Some(src) = self.addrs.iter().position(|a| *a == from) else {
                        continue;
                    };
                    let now = self.now();
                    self.endpoints[i].handle_datagram(now, NodeId(src as u16), &buf[..n]);
                }
            }
            if done(&self.endpoints) {
                return Ok(true);
            }
            let now = self.now();
            if now >= horizon {
                return Ok(false);
            }
            if !busy {
                let wake = self.endpoints.iter().filter_map(Endpoint::next_wakeup).min();
                let nap = wake.map_or(Duration::from_micros(200), |w| w.saturating_since(now));
                std::thread::sleep(nap.min(Duration::from_micros(200)));
            }
        }
    }
}
