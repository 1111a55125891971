//! Datagram transport substrate.
//!
//! [`SimChannel`] is a deterministic star network on a virtual clock: each
//! node has an uplink into a switch and a drop-tail switch port towards it.
//! Many-to-one traffic meets at the receiver's port, which is where incast
//! queueing and drops come from. [`UdpChannel`] sends real datagrams.

mod sim;
mod udp;

use std::net::SocketAddr;
use std::time::Duration;

use thiserror::Error;

pub use sim::{ChannelStats, Delivery, SimChannel};
pub use udp::UdpChannel;

use crate::wire::MAX_DATAGRAM;

/// Address of a node in the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u16);

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("datagram of {0} bytes exceeds the {MAX_DATAGRAM}-byte limit")]
    OversizedDatagram(usize),
    #[error("invalid channel configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot advance clock backwards from {from} to {to}")]
    ClockBackwards { from: crate::time::Timestamp, to: crate::time::Timestamp },
    #[error("socket error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    RandomLoss,
    QueueFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Accepted,
    Dropped(DropReason),
}

/// One-way propagation delay: `base` plus a uniform draw from `[0, jitter]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayModel {
    pub base: Duration,
    pub jitter: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelMode {
    Simulated,
    RealUdp { bind: Vec<SocketAddr> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub mode: ChannelMode,
    pub loss_rate: f64,
    pub one_way_delay: DelayModel,
    pub bandwidth_bps: f64,
    pub queue_capacity: usize,
    /// Probability that a datagram is held back by an extra `one_way_delay.base`.
    pub reorder_rate: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            mode: ChannelMode::Simulated,
            loss_rate: 0.0,
            one_way_delay: DelayModel { base: Duration::from_micros(50), jitter: Duration::ZERO },
            bandwidth_bps: 10e9,
            queue_capacity: 128,
            reorder_rate: 0.0,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(ChannelError::InvalidConfig(format!("loss_rate {} outside [0, 1]", self.loss_rate)));
        }
        if !(0.0..=1.0).contains(&self.reorder_rate) {
            return Err(ChannelError::InvalidConfig(format!("reorder_rate {} outside [0, 1]", self.reorder_rate)));
        }
        if self.mode == ChannelMode::Simulated && !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(ChannelError::InvalidConfig(format!("bandwidth {} must be positive", self.bandwidth_bps)));
        }
        if self.queue_capacity == 0 {
            return Err(ChannelError::InvalidConfig("queue_capacity must be at least 1".into()));
        }
        Ok(())
    }
}
