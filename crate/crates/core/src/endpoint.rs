//! A network node running any number of LTP flows in both directions.
//!
//! The endpoint does no I/O. A driver feeds it datagrams with
//! [`Endpoint::handle_datagram`], pulls packets to send with
//! [`Endpoint::poll_transmit`], and sleeps until [`Endpoint::next_wakeup`].
//! Flows are keyed by `(peer, flow_id)`; an End from a peer is a stop signal
//! when we hold the sending side of that flow.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::{Bound, Range};
use std::time::Duration;

use crate::channel::NodeId;
use crate::receiver::{CloseRecord, EarlyDataBuffer, PeerEstimates, ReassemblyState, ReceiverConfig};
use crate::sender::{Emission, FlowSendState, PacketKey, SenderConfig, SenderError, SenderEvent, SenderStats};
use crate::time::Timestamp;
use crate::wire::{dequantize_cc, Packet, PacketType};

pub type FlowKey = (NodeId, u16);

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Sent { key: PacketKey, retransmission: bool, inflight_before: u64, bdp_packets: u64 },
    LossDeclared { key: PacketKey, bdp_before: u64, bdp_after: u64, by_timer: bool },
    StopReceived,
    SenderCompleted { stats: SenderStats },
    Closed(CloseRecord),
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub at: Timestamp,
    pub node: NodeId,
    pub peer: NodeId,
    pub flow_id: u16,
    pub kind: EventKind,
}

/// How much the endpoint records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogLevel {
    /// Closes, stops, completions and rejected packets.
    #[default]
    Flows,
    /// Additionally every send admission and loss declaration.
    Packets,
}

#[derive(Debug)]
pub struct Endpoint {
    id: NodeId,
    senders: BTreeMap<FlowKey, FlowSendState>,
    finished: BTreeMap<FlowKey, SenderStats>,
    paced_until: BTreeMap<FlowKey, Timestamp>,
    receivers: BTreeMap<FlowKey, ReassemblyState>,
    /// Receivers that are open or still repeating their stop message.
    active_receivers: BTreeSet<FlowKey>,
    policies: BTreeMap<NodeId, ReceiverConfig>,
    default_policy: ReceiverConfig,
    early: EarlyDataBuffer<FlowKey>,
    outbox: VecDeque<(NodeId, Packet)>,
    peer_estimates: PeerEstimates<NodeId>,
    path_cache: BTreeMap<NodeId, (Duration, f64)>,
    reuse_path_estimates: bool,
    log_level: LogLevel,
    events: Vec<Event>,
    closed: Vec<(FlowKey, CloseRecord)>,
    reported_closed: BTreeSet<FlowKey>,
    /// Closed receivers whose state was dropped; late data is still acknowledged.
    retired: BTreeSet<FlowKey>,
    rr_cursor: Option<FlowKey>,
    scratch_keys: Vec<FlowKey>,
    scratch_events: Vec<SenderEvent>,
}

impl Endpoint {
    pub fn new(id: NodeId) -> Self {
        Endpoint {
            id,
            senders: BTreeMap::new(),
            finished: BTreeMap::new(),
            paced_until: BTreeMap::new(),
            receivers: BTreeMap::new(),
            active_receivers: BTreeSet::new(),
            policies: BTreeMap::new(),
            default_policy: ReceiverConfig::reliable(4),
            early: EarlyDataBuffer::new(),
            outbox: VecDeque::new(),
            peer_estimates: PeerEstimates::new(),
            path_cache: BTreeMap::new(),
            reuse_path_estimates: true,
            log_level: LogLevel::Flows,
            events: Vec::new(),
            closed: Vec::new(),
            reported_closed: BTreeSet::new(),
            retired: BTreeSet::new(),
            rr_cursor: None,
            scratch_keys: Vec::new(),
            scratch_events: Vec::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn set_log_level(&mut self, level: LogLevel) {
        self.log_level = level;
    }

    /// When set, new flows start from the estimates of the last completed flow
    /// to the same peer.
    pub fn set_reuse_path_estimates(&mut self, reuse: bool) {
        self.reuse_path_estimates = reuse;
    }

    pub fn set_receive_policy(&mut self, peer: NodeId, config: ReceiverConfig) {
        self.policies.insert(peer, config);
    }

    pub fn set_default_policy(&mut self, config: ReceiverConfig) {
        self.default_policy = config;
    }

    /// Latest RTprop/BtlBw echo received from `peer`.
    pub fn peer_estimates(&self, peer: NodeId) -> (Option<Duration>, Option<f64>) {
        self.peer_estimates.get(&peer)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn start_flow(
        &mut self,
        now: Timestamp,
        dest: NodeId,
        flow_id: u16,
        data: Vec<u8>,
        element_size: usize,
        critical: &[Range<usize>],
        config: &SenderConfig,
    ) -> Result<(), SenderError> {
        let mut config = config.clone();
        if config.seed_estimates.is_none() && self.reuse_path_estimates {
            config.seed_estimates = self.path_cache.get(&dest).copied();
        }
        let flow = FlowSendState::segment_buffer(flow_id, data, element_size, critical, &config, now)?;
        self.finished.remove(&(dest, flow_id));
        self.senders.insert((dest, flow_id), flow);
        Ok(())
    }

    pub fn sender(&self, key: FlowKey) -> Option<&FlowSendState> {
        self.senders.get(&key)
    }

    /// Stats of a sending flow, live or finished.
    pub fn sender_stats(&self, key: FlowKey) -> Option<SenderStats> {
        self.senders.get(&key).map(FlowSendState::stats).or_else(|| self.finished.get(&key).copied())
    }

    pub fn sender_finished(&self, key: FlowKey) -> bool {
        self.finished.contains_key(&key)
    }

    pub fn active_senders(&self) -> usize {
        self.senders.len()
    }

    pub fn receiver(&self, key: FlowKey) -> Option<&ReassemblyState> {
        self.receivers.get(&key)
    }

    pub fn receiver_mut(&mut self, key: FlowKey) -> Option<&mut ReassemblyState> {
        self.receivers.get_mut(&key)
    }

    /// Drops receivers that have closed and finished their stop messages, and
    /// the stats of finished senders. Their flow ids may then be reused.
    pub fn retire_closed(&mut self) {
        let done: Vec<FlowKey> = self
            .receivers
            .iter()
            .filter(|(k, s)| s.is_closed() && !self.active_receivers.contains(k))
            .map(|(k, _)| *k)
            .collect();
        for key in done {
            self.receivers.remove(&key);
            self.reported_closed.remove(&key);
            self.early.take(&key);
            self.retired.insert(key);
        }
        self.finished.clear();
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn take_closed(&mut self) -> Vec<(FlowKey, CloseRecord)> {
        std::mem::take(&mut self.closed)
    }

    fn log(&mut self, at: Timestamp, key: FlowKey, kind: EventKind) {
        self.events.push(Event { at, node: self.id, peer: key.0, flow_id: key.1, kind });
    }

    fn reject(&mut self, at: Timestamp, key: FlowKey, reason: String) {
        self.log(at, key, EventKind::Rejected { reason });
    }

    pub fn handle_datagram(&mut self, now: Timestamp, from: NodeId, bytes: &[u8]) {
        let packet = match Packet::decode(bytes) {
            Ok(p) => p,
            Err(e) => {
                self.reject(now, (from, 0), e.to_string());
                return;
            }
        };
        let key = (from, packet.header.flow_id);
        if packet.header.ptype != PacketType::Ack {
            let (rt, bw) = dequantize_cc(packet.header.rtprop_q, packet.header.btlbw_q);
            self.peer_estimates.record(from, rt, bw);
        }
        match packet.header.ptype {
            PacketType::Ack => self.on_ack(now, key, &packet),
            PacketType::End if self.senders.contains_key(&key) => {
                let flow = self.senders.get_mut(&key).expect("checked");
                if !flow.is_stopped() {
                    flow.on_stop();
                    self.log(now, key, EventKind::StopReceived);
                }
                self.after_sender_change(now, key);
            }
            PacketType::Registration if !self.receivers.contains_key(&key) => self.register(now, key, &packet),
            PacketType::Data if self.retired.contains(&key) => {
                self.outbox.push_back((from, Packet::ack(key.1, packet.header.seq_id)));
            }
            _ if self.receivers.contains_key(&key) => self.deliver(now, key, &packet),
            PacketType::Data => {
                if self.early.push(key, packet.clone()) {
                    self.outbox.push_back((from, Packet::ack(key.1, packet.header.seq_id)));
                } else {
                    self.reject(now, key, "data before registration; buffer full".into());
                }
            }
            // An End for a flow we never saw; the sender repeats it.
            _ => {}
        }
    }

    fn on_ack(&mut self, now: Timestamp, key: FlowKey, packet: &Packet) {
        let Some(flow) = self.senders.get_mut(&key) else {
            return;
        };
        if let Err(e) = flow.on_ack(now, packet.header.seq_id) {
            self.reject(now, key, e.to_string());
        }
        self.after_sender_change(now, key);
    }

    fn register(&mut self, now: Timestamp, key: FlowKey, packet: &Packet) {
        let Some(reg) = packet.registration_payload() else {
            return;
        };
        let config = self.policies.get(&key.0).cloned().unwrap_or_else(|| self.default_policy.clone());
        match ReassemblyState::register(key.1, reg, config, now) {
            Ok(state) => {
                self.retired.remove(&key);
                self.receivers.insert(key, state);
                self.active_receivers.insert(key);
                self.deliver(now, key, packet);
                for early in self.early.take(&key) {
                    // Already acknowledged when buffered.
                    self.apply(now, key, &early);
                }
                self.after_receiver_change(now, key);
            }
            Err(e) => self.reject(now, key, e.to_string()),
        }
    }

    fn apply(&mut self, now: Timestamp, key: FlowKey, packet: &Packet) -> Option<Packet> {
        let state = self.receivers.get_mut(&key)?;
        match state.on_packet(packet, now) {
            Ok(ack) => ack,
            Err(e) => {
                self.reject(now, key, e.to_string());
                None
            }
        }
    }

    fn deliver(&mut self, now: Timestamp, key: FlowKey, packet: &Packet) {
        if let Some(ack) = self.apply(now, key, packet) {
            self.outbox.push_back((key.0, ack));
        }
        self.after_receiver_change(now, key);
    }

    fn after_receiver_change(&mut self, now: Timestamp, key: FlowKey) {
        let Some(state) = self.receivers.get(&key) else {
            return;
        };
        if let Some(rec) = state.close_record() {
            if self.reported_closed.insert(key) {
                let rec = rec.clone();
                self.closed.push((key, rec.clone()));
                self.log(now, key, EventKind::Closed(rec));
            }
        }
    }

    fn after_sender_change(&mut self, now: Timestamp, key: FlowKey) {
        let Some(flow) = self.senders.get_mut(&key) else {
            return;
        };
        let mut evs = std::mem::take(&mut self.scratch_events);
        evs.extend(flow.drain_events());
        let complete = flow.is_complete();
        let estimates = (flow.congestion().rtprop(), flow.congestion().btlbw());
        for ev in evs.drain(..) {
            match ev {
                SenderEvent::Sent { key: k, retransmission, inflight_before, bdp_packets } => {
                    if self.log_level == LogLevel::Packets {
                        self.log(now, key, EventKind::Sent { key: k, retransmission, inflight_before, bdp_packets });
                    }
                }
                SenderEvent::LossDeclared { key: k, bdp_before, bdp_after, by_timer } => {
                    if self.log_level == LogLevel::Packets {
                        self.log(now, key, EventKind::LossDeclared { key: k, bdp_before, bdp_after, by_timer });
                    }
                }
                SenderEvent::Stopped | SenderEvent::Completed => {}
            }
        }
        self.scratch_events = evs;
        if complete {
            let flow = self.senders.remove(&key).expect("present");
            let stats = flow.stats();
            self.finished.insert(key, stats);
            self.paced_until.remove(&key);
            self.path_cache.insert(key.0, estimates);
            self.log(now, key, EventKind::SenderCompleted { stats });
        }
    }

    fn service_receivers(&mut self, now: Timestamp) {
        let due: Vec<FlowKey> = self
            .active_receivers
            .iter()
            .filter(|k| self.receivers[k].next_timeout().is_some_and(|t| t <= now))
            .copied()
            .collect();
        for key in due {
            let state = self.receivers.get_mut(&key).expect("active receiver exists");
            let was_open = !state.is_closed();
            state.poll_close(now);
            if let Some(stop) = state.poll_transmit(now) {
                self.outbox.push_back((key.0, stop));
            }
            if was_open {
                self.after_receiver_change(now, key);
            }
        }
        // Flows closed by a packet send their first stop right away.
        let closed_now: Vec<FlowKey> = self
            .active_receivers
            .iter()
            .filter(|k| {
                let s = &self.receivers[k];
                s.is_closed() && s.next_timeout().is_some_and(|t| t <= now)
            })
            .copied()
            .collect();
        for key in closed_now {
            if let Some(stop) = self.receivers.get_mut(&key).and_then(|s| s.poll_transmit(now)) {
                self.outbox.push_back((key.0, stop));
            }
        }
        self.active_receivers.retain(|k| {
            let s = &self.receivers[k];
            !s.is_closed() || s.next_timeout().is_some()
        });
    }

    /// Returns the next packet this node wants to send, if any.
    pub fn poll_transmit(&mut self, now: Timestamp) -> Option<(NodeId, Packet)> {
        if let Some(out) = self.outbox.pop_front() {
            return Some(out);
        }
        self.service_receivers(now);
        if let Some(out) = self.outbox.pop_front() {
            return Some(out);
        }
        let mut keys = std::mem::take(&mut self.scratch_keys);
        keys.clear();
        match self.rr_cursor {
            Some(c) => {
                let after = self.senders.range((Bound::Excluded(c), Bound::Unbounded));
                keys.extend(after.chain(self.senders.range(..=c)).map(|(k, _)| *k));
            }
            None => keys.extend(self.senders.keys().copied()),
        }
        let mut out = None;
        for &key in &keys {
            if self.paced_until.get(&key).is_some_and(|&t| t > now) {
                continue;
            }
            let flow = self.senders.get_mut(&key).expect("listed");
            let result = flow.next_packet(now);
            match result {
                Ok(p) => {
                    self.paced_until.remove(&key);
                    self.rr_cursor = Some(key);
                    self.after_sender_change(now, key);
                    out = Some((key.0, p));
                    break;
                }
                Err(Emission::Paced(d)) => {
                    self.paced_until.insert(key, now + d);
                }
                Err(Emission::CapReached(_)) | Err(Emission::NothingToSend) => {
                    self.paced_until.remove(&key);
                }
            }
            // Timers inside next_packet may have declared losses.
            self.after_sender_change(now, key);
        }
        self.scratch_keys = keys;
        out
    }

    /// Earliest instant at which this node has timer work to do.
    pub fn next_wakeup(&self) -> Option<Timestamp> {
        let senders = self.senders.values().filter_map(FlowSendState::next_timeout);
        let paced = self.paced_until.values().copied();
        let receivers = self.active_receivers.iter().filter_map(|k| self.receivers[k].next_timeout());
        senders.chain(paced).chain(receivers).min()
    }

    /// True when no flow in either direction has work left.
    pub fn is_idle(&self) -> bool {
        self.senders.is_empty() && self.outbox.is_empty() && self.active_receivers.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t_us(us: u64) -> Timestamp {
        Timestamp::from_nanos(us * 1000)
    }

    /// Moves every packet between two endpoints with a fixed delay and no loss.
    fn shuttle(a: &mut Endpoint, b: &mut Endpoint, until: Timestamp) -> Timestamp {
        let mut now = Timestamp::ZERO;
        let step = Duration::from_micros(10);
        while now < until {
            let mut moved = false;
            while let Some((to, p)) = a.poll_transmit(now) {
                assert_eq!(to, b.id());
                b.handle_datagram(now + step, a.id(), &p.encode());
                moved = true;
            }
            while let Some((to, p)) = b.poll_transmit(now) {
                assert_eq!(to, a.id());
                a.handle_datagram(now + step, b.id(), &p.encode());
                moved = true;
            }
            if !moved && a.is_idle() && b.is_idle() {
                break;
            }
            now += step;
        }
        now
    }

    #[test]
    fn lossless_transfer_between_endpoints() {
        let mut w = Endpoint::new(NodeId(1));
        let mut ps = Endpoint::new(NodeId(0));
        let data: Vec<u8> = (0..40_000u32).map(|i| (i % 251) as u8).collect();
        w.start_flow(Timestamp::ZERO, NodeId(0), 5, data.clone(), 4, &[], &SenderConfig::default()).unwrap();
        shuttle(&mut w, &mut ps, t_us(1_000_000));
        let r = ps.receiver((NodeId(1), 5)).unwrap();
        assert!(r.is_closed());
        assert_eq!(r.reassemble().unwrap(), data);
        assert!(w.sender_finished((NodeId(0), 5)));
        assert_eq!(ps.take_closed().len(), 1);
    }

    #[test]
    fn data_before_registration_is_buffered() {
        let mut ps = Endpoint::new(NodeId(0));
        let mut flow =
            FlowSendState::segment_buffer(9, vec![1u8; 3000], 4, &[], &SenderConfig::default(), Timestamp::ZERO)
                .unwrap();
        let reg = flow.next_packet(Timestamp::ZERO).unwrap();
        let d0 = flow.next_packet(Timestamp::ZERO).unwrap();
        ps.handle_datagram(t_us(1), NodeId(3), &d0.encode());
        let (_, ack) = ps.poll_transmit(t_us(1)).unwrap();
        assert_eq!(ack.header.seq_id.get(), 0);
        ps.handle_datagram(t_us(2), NodeId(3), &reg.encode());
        let r = ps.receiver((NodeId(3), 9)).unwrap();
        assert_eq!(r.received_bytes(), 1460);
        // Only the registration is acknowledged now.
        let (_, ack) = ps.poll_transmit(t_us(2)).unwrap();
        assert_eq!(ack.header.ptype, PacketType::Ack);
        assert!(ps.poll_transmit(t_us(2)).is_none());
    }

    #[test]
    fn garbage_is_rejected_and_logged() {
        let mut ps = Endpoint::new(NodeId(0));
        ps.handle_datagram(t_us(1), NodeId(1), &[0xFF; 4]);
        let ev = ps.take_events();
        assert!(matches!(ev[0].kind, EventKind::Rejected { .. }));
        assert!(ps.poll_transmit(t_us(1)).is_none());
    }
}
