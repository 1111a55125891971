use std::io::ErrorKind;
use std::net::{SocketAddr, UdpSocket};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ChannelError, DropReason, SendOutcome};
use crate::wire::MAX_DATAGRAM;

/// A non-blocking UDP socket with optional seeded loss injection on send.
#[derive(Debug)]
pub struct UdpChannel {
    socket: UdpSocket,
    loss_rate: f64,
    rng: ChaCha8Rng,
}

impl UdpChannel {
    pub fn bind(addr: SocketAddr, loss_rate: f64, seed: u64) -> Result<Self, ChannelError> {
        if !(0.0..=1.0).contains(&loss_rate) {
            return Err(ChannelError::InvalidConfig(format!("loss_rate {loss_rate} outside [0, 1]")));
        }
        let socket = UdpSocket::bind(addr)?;
        socket.set_nonblocking(true)?;
        Ok(UdpChannel { socket, loss_rate, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ChannelError> {
        Ok(self.socket.local_addr()?)
    }

    pub fn send(&mut self, datagram: &[u8], dest: SocketAddr) -> Result<SendOutcome, ChannelError> {
        if datagram.len() > MAX_DATAGRAM {
            return Err(ChannelError::OversizedDatagram(datagram.len()));
        }
        if self.loss_rate > 0.0 && self.rng.random_bool(self.loss_rate) {
            return Ok(SendOutcome::Dropped(DropReason::RandomLoss));
        }
        match self.socket.send_to(datagram, dest) {
            Ok(_) => Ok(SendOutcome::Accepted),
            // A full socket buffer behaves like a full drop-tail queue.
            Err(e) if e.kind() == ErrorKind::WouldBlock => Ok(SendOutcome::Dropped(DropReason::QueueFull)),
            Err(e) => Err(e.into()),
        }
    }

    /// Returns one pending datagram without blocking.
    pub fn try_recv(&self, buf: &mut [u8]) -> Result<Option<(usize, SocketAddr)>, ChannelError> {
        match self.socket.recv_from(buf) {
            Ok(r) => Ok(Some(r)),
            Err(e) if e.kind() == ErrorKind::WouldBlock => Ok(None),
            // Linux reports ICMP port-unreachable from an earlier send here.
            Err(e) if e.kind() == ErrorKind::ConnectionRefused => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}
