use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ChannelConfig, ChannelError, DropReason, NodeId, SendOutcome};
use crate::time::Timestamp;
use crate::wire::{IP_UDP_OVERHEAD, MAX_DATAGRAM};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub datagram: Vec<u8>,
    pub from: NodeId,
    pub to: NodeId,
    pub at: Timestamp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped_loss: u64,
    pub dropped_queue: u64,
    pub delivered_bytes: u64,
}

impl ChannelStats {
    pub fn in_transit(&self) -> u64 {
        self.sent - self.delivered - self.dropped_loss - self.dropped_queue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stage {
    /// Reached the switch port of the destination.
    Port,
    /// Reached the destination node.
    Deliver,
}

/// Events are ordered by time, then stage, then sender, then send order.
type EventKey = (Timestamp, Stage, NodeId, u64);

#[derive(Debug)]
struct InTransit {
    datagram: Vec<u8>,
    from: NodeId,
    to: NodeId,
    extra_delay: Duration,
}

#[derive(Debug, Default)]
struct Port {
    busy_until: Timestamp,
    /// Departure times of packets queued or in service.
    departures: VecDeque<Timestamp>,
}

/// Deterministic discrete-event network.
#[derive(Debug)]
pub struct SimChannel {
    config: ChannelConfig,
    rng: ChaCha8Rng,
    now: Timestamp,
    uplink_busy: BTreeMap<NodeId, Timestamp>,
    ports: BTreeMap<NodeId, Port>,
    events: BinaryHeap<Reverse<EventKey>>,
    packets: BTreeMap<u64, InTransit>,
    send_seq: u64,
    stats: ChannelStats,
}

impl SimChannel {
    pub fn new(config: ChannelConfig) -> Result<Self, ChannelError> {
        config.validate()?;
        Ok(SimChannel {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            now: Timestamp::ZERO,
            uplink_busy: BTreeMap::new(),
            ports: BTreeMap::new(),
            events: BinaryHeap::new(),
            packets: BTreeMap::new(),
            send_seq: 0,
            stats: ChannelStats::default(),
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    fn serialization(&self, len: usize) -> Duration {
        let bits = ((len + IP_UDP_OVERHEAD) * 8) as f64;
        Duration::from_nanos((bits / self.config.bandwidth_bps * 1e9).round() as u64)
    }

    /// Offers a datagram at the current simulated time.
    pub fn send(&mut self, from: NodeId, to: NodeId, datagram: Vec<u8>) -> Result<SendOutcome, ChannelError> {
        if datagram.len() > MAX_DATAGRAM {
            return Err(ChannelError::OversizedDatagram(datagram.len()));
        }
        self.stats.sent += 1;
        if self.rng.random_bool(self.config.loss_rate) {
            self.stats.dropped_loss += 1;
            return Ok(SendOutcome::Dropped(DropReason::RandomLoss));
        }
        let mut extra_delay = self.config.one_way_delay.base;
        let jitter = self.config.one_way_delay.jitter;
        if !jitter.is_zero() {
            extra_delay += Duration::from_nanos(self.rng.random_range(0..=jitter.as_nanos() as u64));
        }
        if self.config.reorder_rate > 0.0 && self.rng.random_bool(self.config.reorder_rate) {
            extra_delay += self.config.one_way_delay.base;
        }

        let ser = self.serialization(datagram.len());
        let busy = self.uplink_busy.entry(from).or_insert(Timestamp::ZERO);
        let at_port = (*busy).max(self.now) + ser;
        *busy = at_port;

        let id = self.send_seq;
        self.send_seq += 1;
        self.packets.insert(id, InTransit { datagram, from, to, extra_delay });
        self.events.push(Reverse((at_port, Stage::Port, from, id)));
        Ok(SendOutcome::Accepted)
    }

    /// Time of the next internal event, if any.
    pub fn next_event_time(&self) -> Option<Timestamp> {
        self.events.peek().map(|Reverse((t, ..))| *t)
    }

    /// Moves the clock to `to` and returns every datagram delivered by then.
    pub fn advance_clock(&mut self, to: Timestamp) -> Result<Vec<Delivery>, ChannelError> {
        if to < self.now {
            return Err(ChannelError::ClockBackwards { from: self.now, to });
        }
        let mut out = Vec::new();
        while let Some(&Reverse((at, stage, from, id))) = self.events.peek() {
            if at > to {
                break;
            }
            self.events.pop();
            match stage {
                Stage::Port => self.enter_port(at, from, id),
                Stage::Deliver => {
                    let p = self.packets.remove(&id).expect("scheduled packet exists");
                    self.stats.delivered += 1;
                    self.stats.delivered_bytes += p.datagram.len() as u64;
                    out.push(Delivery { datagram: p.datagram, from: p.from, to: p.to, at });
                }
            }
        }
        self.now = to;
        Ok(out)
    }

    fn enter_port(&mut self, at: Timestamp, from: NodeId, id: u64) {
        let (to, len, extra) = {
            let p = &self.packets[&id];
            (p.to, p.datagram.len(), p.extra_delay)
        };
        let ser = self.serialization(len);
        let capacity = self.config.queue_capacity;
        let port = self.ports.entry(to).or_default();
        while port.departures.front().is_some_and(|&d| d <= at) {
            port.departures.pop_front();
        }
        if port.departures.len() >= capacity {
            self.packets.remove(&id);
            self.stats.dropped_queue += 1;
            return;
        }
        let departure = port.busy_until.max(at) + ser;
        port.busy_until = departure;
        port.departures.push_back(departure);
        self.events.push(Reverse((departure + extra, Stage::Deliver, from, id)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::DelayModel;

    fn cfg(loss: f64) -> ChannelConfig {
        ChannelConfig { loss_rate: loss, seed: 42, ..ChannelConfig::default() }
    }

    fn drain(ch: &mut SimChannel) -> Vec<Delivery> {
        let mut out = Vec::new();
        while let Some(t) = ch.next_event_time() {
            out.extend(ch.advance_clock(t).unwrap());
        }
        out
    }

    #[test]
    fn empty_schedule_delivers_nothing() {
        let mut ch = SimChannel::new(cfg(0.0)).unwrap();
        assert!(ch.advance_clock(Timestamp::from_nanos(1_000_000)).unwrap().is_empty());
    }

    #[test]
    fn lossless_delivers_everything_once() {
        let mut ch = SimChannel::new(cfg(0.0)).unwrap();
        for i in 0..100u8 {
            ch.send(NodeId(1), NodeId(0), vec![i; 10]).unwrap();
        }
        let got = drain(&mut ch);
        assert_eq!(got.len(), 100);
        let payloads: Vec<u8> = got.iter().map(|d| d.datagram[0]).collect();
        assert_eq!(payloads, (0..100).collect::<Vec<_>>());
        assert_eq!(ch.stats().in_transit(), 0);
    }

    #[test]
    fn total_loss_delivers_nothing() {
        let mut ch = SimChannel::new(cfg(1.0)).unwrap();
        for _ in 0..50 {
            assert_eq!(ch.send(NodeId(1), NodeId(0), vec![0; 10]).unwrap(), SendOutcome::Dropped(DropReason::RandomLoss));
        }
        assert!(drain(&mut ch).is_empty());
    }

    #[test]
    fn delivers_in_time_order() {
        let mut ch = SimChannel::new(ChannelConfig {
            one_way_delay: DelayModel { base: Duration::from_millis(3), jitter: Duration::ZERO },
            reorder_rate: 0.5,
            ..cfg(0.0)
        })
        .unwrap();
        for i in 0..64u8 {
            ch.send(NodeId(1), NodeId(0), vec![i]).unwrap();
        }
        let got = ch.advance_clock(Timestamp::from_nanos(10_000_000)).unwrap();
        assert_eq!(got.len(), 64);
        assert!(got.windows(2).all(|w| w[0].at <= w[1].at));
        let order: Vec<u8> = got.iter().map(|d| d.datagram[0]).collect();
        assert!(order.windows(2).any(|w| w[0] > w[1]), "reordering expected");
    }

    #[test]
    fn drop_tail_when_port_full() {
        let mut ch = SimChannel::new(ChannelConfig { queue_capacity: 4, ..cfg(0.0) }).unwrap();
        // Eight senders burst into one port at the same instant.
        for s in 1..=8 {
            for _ in 0..4 {
                ch.send(NodeId(s), NodeId(0), vec![0; 1400]).unwrap();
            }
        }
        let got = drain(&mut ch);
        let st = ch.stats();
        assert!(st.dropped_queue > 0);
        assert_eq!(st.sent, got.len() as u64 + st.dropped_queue);
    }

    #[test]
    fn oversized_is_rejected() {
        let mut ch = SimChannel::new(cfg(0.0)).unwrap();
        assert!(matches!(ch.send(NodeId(0), NodeId(1), vec![0; 1473]), Err(ChannelError::OversizedDatagram(1473))));
    }

    #[test]
    fn clock_cannot_go_backwards() {
        let mut ch = SimChannel::new(cfg(0.0)).unwrap();
        ch.advance_clock(Timestamp::from_nanos(10)).unwrap();
        assert!(ch.advance_clock(Timestamp::from_nanos(5)).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(SimChannel::new(ChannelConfig { loss_rate: 1.5, ..cfg(0.0) }).is_err());
        assert!(SimChannel::new(ChannelConfig { bandwidth_bps: 0.0, ..cfg(0.0) }).is_err());
    }
}
