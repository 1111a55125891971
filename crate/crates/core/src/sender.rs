//! Send side of one LTP flow.
//!
//! A buffer is cut into segments whose boundaries fall on element boundaries
//! (the padding bubble), so a missing segment never leaves half an element
//! behind. Segments go out through three queues with strict priority:
//!
//! - CQ: critical packets, FIFO, retransmitted until acknowledged.
//! - NQ: normal packets, FIFO, each sent once from here.
//! - RQ: normal packets declared lost. Inserted at a random position, served
//!   from the front, and only after CQ and NQ are empty.
//!
//! Loss is detected from ACK ordering: a packet is lost once three packets
//! sent after it have been acknowledged.

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::congestion::{CongestionConfig, CongestionState, SendDecision, SendStamp};
use crate::time::Timestamp;
use crate::wire::{
    quantize_cc, Importance, Packet, Registration, SeqId, END_SEQ, MAX_DATA_SEQ, MAX_SEGMENT_BYTES,
    REGISTRATION_SEQ,
};

pub const LOSS_THRESHOLD: u32 = 3;
/// The silence probe timeout doubles per unanswered probe, up to 2^6 times.
const MAX_PROBE_BACKOFF: u32 = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SenderError {
    #[error("cannot send an empty buffer")]
    EmptyBuffer,
    #[error("element size {0} is not one of 1, 2, 4, 8")]
    InvalidElementSize(usize),
    #[error("buffer length {len} is not a multiple of element size {element_size}")]
    RaggedBuffer { len: usize, element_size: usize },
    #[error("critical range {start}..{end} outside buffer of {len} bytes")]
    CriticalRangeOutOfBounds { start: usize, end: usize, len: usize },
    #[error("buffer of {0} bytes does not fit in one flow")]
    TooLarge(usize),
    #[error("ACK for sequence id {0} that was never sent")]
    UnknownSeq(u32),
}

/// Identifies a packet of a flow independently of how often it was sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PacketKey {
    Registration,
    Data(u32),
    End,
}

impl PacketKey {
    pub fn seq_id(self) -> SeqId {
        match self {
            PacketKey::Registration => REGISTRATION_SEQ,
            PacketKey::End => END_SEQ,
            PacketKey::Data(i) => SeqId::new(i).expect("data seq within 24 bits"),
        }
    }

    pub fn from_seq(seq: SeqId) -> PacketKey {
        if seq == REGISTRATION_SEQ {
            PacketKey::Registration
        } else if seq == END_SEQ {
            PacketKey::End
        } else {
            PacketKey::Data(seq.get())
        }
    }
}

/// Dense per-key storage: the key space of one flow is small and contiguous.
#[derive(Debug, Clone)]
struct KeyTable<T> {
    slots: Vec<Option<T>>,
}

impl<T> Default for KeyTable<T> {
    fn default() -> Self {
        KeyTable { slots: Vec::new() }
    }
}

impl<T> KeyTable<T> {
    fn slot(key: PacketKey) -> usize {
        match key {
            PacketKey::Registration => 0,
            PacketKey::End => 1,
            PacketKey::Data(i) => i as usize + 2,
        }
    }

    fn get(&self, key: PacketKey) -> Option<&T> {
        self.slots.get(Self::slot(key)).and_then(Option::as_ref)
    }

    fn contains(&self, key: PacketKey) -> bool {
        self.get(key).is_some()
    }

    fn insert(&mut self, key: PacketKey, value: T) -> Option<T> {
        let i = Self::slot(key);
        if i >= self.slots.len() {
            self.slots.resize_with(i + 1, || None);
        }
        self.slots[i].replace(value)
    }

    fn remove(&mut self, key: PacketKey) -> Option<T> {
        self.slots.get_mut(Self::slot(key)).and_then(Option::take)
    }
}

/// Result of feeding one ACK to a [`LossDetector`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AckOutcome {
    /// False for repeated ACKs of an already acknowledged key.
    pub first_ack: bool,
    /// Whether the acknowledged transmission was still counted in flight.
    pub was_outstanding: bool,
    pub newly_lost: Vec<PacketKey>,
}

/// Three-out-of-order-ACK loss detection over the actual send order.
#[derive(Debug, Clone, Default)]
pub struct LossDetector {
    sent_log: Vec<PacketKey>,
    latest_pos: KeyTable<usize>,
    /// In-flight transmissions by send position, with their later-ACK count.
    outstanding: BTreeMap<usize, (PacketKey, u32)>,
    acked: KeyTable<()>,
}

impl LossDetector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a transmission of `key` to the send log.
    pub fn on_send(&mut self, key: PacketKey) -> usize {
        let pos = self.sent_log.len();
        self.sent_log.push(key);
        if let Some(old) = self.latest_pos.insert(key, pos) {
            self.outstanding.remove(&old);
        }
        self.outstanding.insert(pos, (key, 0));
        pos
    }

    pub fn on_ack(&mut self, key: PacketKey) -> Result<AckOutcome, SenderError> {
        let Some(&pos) = self.latest_pos.get(key) else {
            return Err(SenderError::UnknownSeq(key.seq_id().get()));
        };
        if self.acked.insert(key, ()).is_some() {
            return Ok(AckOutcome::default());
        }
        let was_outstanding = self.outstanding.remove(&pos).is_some();
        let mut newly_lost = Vec::new();
        for (_, (earlier, count)) in self.outstanding.range_mut(..pos) {
            *count += 1;
            if *count == LOSS_THRESHOLD {
                newly_lost.push(*earlier);
            }
        }
        if !newly_lost.is_empty() {
            self.outstanding.retain(|_, (_, count)| *count < LOSS_THRESHOLD);
        }
        Ok(AckOutcome { first_ack: true, was_outstanding, newly_lost })
    }

    /// Removes `key`'s current transmission from flight without an ACK.
    /// Returns false if it was not in flight.
    pub fn declare_lost(&mut self, key: PacketKey) -> bool {
        match self.latest_pos.get(key) {
            Some(pos) => self.outstanding.remove(pos).is_some(),
            None => false,
        }
    }

    pub fn sent_log(&self) -> &[PacketKey] {
        &self.sent_log
    }

    pub fn is_acked(&self, key: PacketKey) -> bool {
        self.acked.contains(key)
    }

    pub fn was_sent(&self, key: PacketKey) -> bool {
        self.latest_pos.contains(key)
    }

    pub fn is_outstanding(&self, key: PacketKey) -> bool {
        self.latest_pos.get(key).is_some_and(|pos| self.outstanding.contains_key(pos))
    }

    pub fn outstanding(&self) -> impl Iterator<Item = PacketKey> + '_ {
        self.outstanding.values().map(|(k, _)| *k)
    }

    pub fn later_acked_count(&self, key: PacketKey) -> Option<u32> {
        let pos = self.latest_pos.get(key)?;
        self.outstanding.get(pos).map(|(_, c)| *c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenderConfig {
    pub cc: CongestionConfig,
    /// Seeds the RQ insertion positions.
    pub seed: u64,
    pub max_segment_bytes: usize,
    /// Congestion estimates carried over from an earlier flow on this path.
    pub seed_estimates: Option<(Duration, f64)>,
    /// Lower bound on the silence probe timeout.
    pub min_probe_timeout: Duration,
}

impl Default for SenderConfig {
    fn default() -> Self {
        SenderConfig {
            cc: CongestionConfig::default(),
            seed: 0,
            max_segment_bytes: MAX_SEGMENT_BYTES,
            seed_estimates: None,
            min_probe_timeout: Duration::from_millis(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub range: Range<usize>,
    pub importance: Importance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emission {
    Paced(Duration),
    /// In-flight cap reached; waiting for ACKs. Carries an advisory hint.
    CapReached(Duration),
    NothingToSend,
}

/// Observable sender transitions, drained by the owning endpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum SenderEvent {
    Sent { key: PacketKey, retransmission: bool, inflight_before: u64, bdp_packets: u64 },
    LossDeclared { key: PacketKey, bdp_before: u64, bdp_after: u64, by_timer: bool },
    Stopped,
    Completed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SenderStats {
    pub transmissions: u64,
    pub retransmissions: u64,
    pub losses_declared: u64,
    pub cancelled_retransmissions: u64,
    pub discarded_on_stop: u64,
}

#[derive(Debug)]
pub struct FlowSendState {
    flow_id: u16,
    data: Vec<u8>,
    segments: Vec<Segment>,
    cq: VecDeque<PacketKey>,
    nq: VecDeque<u32>,
    rq: VecDeque<u32>,
    detector: LossDetector,
    stamps: KeyTable<SendStamp>,
    transmitted: KeyTable<()>,
    /// Sent more than once; their ACKs are ambiguous and give no RTT sample.
    retransmitted: KeyTable<()>,
    min_probe_timeout: Duration,
    critical_unacked: usize,
    unacked_data: usize,
    stopped: bool,
    complete: bool,
    cc: CongestionState,
    rng: ChaCha8Rng,
    next_send_at: Timestamp,
    registration_sent_at: Option<Timestamp>,
    end_sent_at: Option<Timestamp>,
    /// Last ACK, or the send that started an idle flow; anchors the probe.
    last_activity: Timestamp,
    /// Consecutive probes without an ACK in between.
    probe_backoff: u32,
    events: Vec<SenderEvent>,
    stats: SenderStats,
}

/// Splits `len` bytes into element-aligned segments of at most `max_segment_bytes`.
pub fn segment_ranges(len: usize, element_size: usize, max_segment_bytes: usize) -> Vec<Range<usize>> {
    let seg_len = segment_len(element_size, max_segment_bytes);
    (0..len).step_by(seg_len).map(|start| start..(start + seg_len).min(len)).collect()
}

/// Segment length: the largest multiple of `element_size` within `max_segment_bytes`.
pub fn segment_len(element_size: usize, max_segment_bytes: usize) -> usize {
    max_segment_bytes / element_size * element_size
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

impl FlowSendState {
    pub fn segment_buffer(
        flow_id: u16,
        data: Vec<u8>,
        element_size: usize,
        critical_ranges: &[Range<usize>],
        config: &SenderConfig,
        now: Timestamp,
    ) -> Result<Self, SenderError> {
        if !matches!(element_size, 1 | 2 | 4 | 8) {
            return Err(SenderError::InvalidElementSize(element_size));
        }
        if data.is_empty() {
            return Err(SenderError::EmptyBuffer);
        }
        if !data.len().is_multiple_of(element_size) {
            return Err(SenderError::RaggedBuffer { len: data.len(), element_size });
        }
        if u32::try_from(data.len()).is_err() {
            return Err(SenderError::TooLarge(data.len()));
        }
        for r in critical_ranges {
            if r.start > r.end || r.end > data.len() {
                return Err(SenderError::CriticalRangeOutOfBounds { start: r.start, end: r.end, len: data.len() });
            }
        }
        let ranges = segment_ranges(data.len(), element_size, config.max_segment_bytes);
        if ranges.len() > MAX_DATA_SEQ as usize + 1 {
            return Err(SenderError::TooLarge(data.len()));
        }

        let segments: Vec<Segment> = ranges
            .into_iter()
            .map(|range| {
                let critical = critical_ranges.iter().any(|c| overlaps(c, &range));
                let importance = if critical { Importance::Critical } else { Importance::NotCritical };
                Segment { range, importance }
            })
            .collect();

        let mut cq = VecDeque::from([PacketKey::Registration]);
        let mut nq = VecDeque::new();
        for (i, seg) in segments.iter().enumerate() {
            if seg.importance.is_critical() {
                cq.push_back(PacketKey::Data(i as u32));
            } else {
                nq.push_back(i as u32);
            }
        }

        let mut cc = CongestionState::new(config.cc.clone(), now);
        if let Some((rt, bw)) = config.seed_estimates {
            cc = cc.with_seed(rt, bw);
        }
        let critical_unacked = cq.len();
        let unacked_data = segments.len();
        Ok(FlowSendState {
            flow_id,
            data,
            segments,
            cq,
            nq,
            rq: VecDeque::new(),
            detector: LossDetector::new(),
            stamps: KeyTable::default(),
            transmitted: KeyTable::default(),
            retransmitted: KeyTable::default(),
            min_probe_timeout: config.min_probe_timeout,
            critical_unacked,
            unacked_data,
            stopped: false,
            complete: false,
            cc,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ (u64::from(flow_id) << 32)),
            next_send_at: now,
            registration_sent_at: None,
            end_sent_at: None,
            last_activity: now,
            probe_backoff: 0,
            events: Vec::new(),
            stats: SenderStats::default(),
        })
    }

    pub fn flow_id(&self) -> u16 {
        self.flow_id
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn registration(&self) -> Registration {
        Registration { segments: self.segments.len() as u32, total_bytes: self.data.len() as u32 }
    }

    pub fn cq(&self) -> &VecDeque<PacketKey> {
        &self.cq
    }

    pub fn nq(&self) -> &VecDeque<u32> {
        &self.nq
    }

    pub fn rq(&self) -> &VecDeque<u32> {
        &self.rq
    }

    pub fn sent_log(&self) -> &[PacketKey] {
        self.detector.sent_log()
    }

    pub fn detector(&self) -> &LossDetector {
        &self.detector
    }

    pub fn congestion(&self) -> &CongestionState {
        &self.cc
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn is_acked(&self, key: PacketKey) -> bool {
        self.detector.is_acked(key)
    }

    pub fn stats(&self) -> SenderStats {
        self.stats
    }

    pub fn importance(&self, key: PacketKey) -> Importance {
        match key {
            PacketKey::Data(i) => self.segments[i as usize].importance,
            _ => Importance::Critical,
        }
    }

    pub fn drain_events(&mut self) -> std::vec::Drain<'_, SenderEvent> {
        self.events.drain(..)
    }

    fn probe_timeout(&self) -> Duration {
        let base = (self.cc.smoothed_rtt() + 4 * self.cc.rtt_var())
            .max(2 * self.cc.rtprop())
            .max(self.min_probe_timeout);
        base * (1 << self.probe_backoff.min(MAX_PROBE_BACKOFF))
    }

    fn queues_empty(&self) -> bool {
        self.cq.is_empty() && self.nq.is_empty() && self.rq.is_empty()
    }

    fn end_due(&self) -> bool {
        !self.stopped
            && self.queues_empty()
            && self.critical_unacked == 0
            && self.end_sent_at.is_none()
            && !self.detector.is_acked(PacketKey::End)
    }

    /// Earliest instant at which a timer inside this flow fires.
    pub fn next_timeout(&self) -> Option<Timestamp> {
        if self.complete {
            return None;
        }
        let mut next: Option<Timestamp> = None;
        let mut consider = |t: Timestamp| next = Some(next.map_or(t, |n| n.min(t)));
        if let Some(at) = self.registration_sent_at {
            if self.detector.is_outstanding(PacketKey::Registration) {
                consider(at + 2 * self.cc.rtprop());
            }
        }
        if let Some(at) = self.end_sent_at {
            if self.detector.is_outstanding(PacketKey::End) {
                consider(at + self.cc.rtprop());
            }
        }
        if self.detector.outstanding().any(|k| matches!(k, PacketKey::Data(_))) {
            consider(self.last_activity + self.probe_timeout());
        }
        next
    }

    fn declare_lost(&mut self, key: PacketKey, by_timer: bool) {
        let bdp_before = self.cc.bdp_packets();
        self.stamps.remove(key);
        self.cc.on_loss_declared();
        self.stats.losses_declared += 1;
        self.events.push(SenderEvent::LossDeclared {
            key,
            bdp_before,
            bdp_after: self.cc.bdp_packets(),
            by_timer,
        });
        match key {
            PacketKey::Registration => self.cq.push_front(key),
            PacketKey::End => {
                if !self.stopped {
                    self.cq.push_back(key);
                }
            }
            PacketKey::Data(i) => {
                if self.segments[i as usize].importance.is_critical() {
                    self.cq.push_back(key);
                } else if !self.stopped {
                    let at = self.rng.random_range(0..=self.rq.len());
                    self.rq.insert(at, i);
                }
            }
        }
    }

    fn fire_timers(&mut self, now: Timestamp) {
        if let Some(at) = self.registration_sent_at {
            if self.detector.is_outstanding(PacketKey::Registration) && now >= at + 2 * self.cc.rtprop() {
                self.detector.declare_lost(PacketKey::Registration);
                self.declare_lost(PacketKey::Registration, true);
            }
        }
        if let Some(at) = self.end_sent_at {
            if self.detector.is_outstanding(PacketKey::End) && now >= at + self.cc.rtprop() {
                self.detector.declare_lost(PacketKey::End);
                self.declare_lost(PacketKey::End, true);
            }
        }
        // No ACK for a whole probe timeout: everything in flight is gone.
        if now >= self.last_activity + self.probe_timeout() {
            let stale: Vec<PacketKey> =
                self.detector.outstanding().filter(|k| matches!(k, PacketKey::Data(_))).collect();
            if !stale.is_empty() {
                for key in stale {
                    self.detector.declare_lost(key);
                    self.declare_lost(key, true);
                }
                self.last_activity = now;
                self.probe_backoff += 1;
            }
        }
    }

    fn peek_next(&self) -> Option<PacketKey> {
        if let Some(&k) = self.cq.front() {
            return Some(k);
        }
        if self.stopped {
            return None;
        }
        if let Some(&i) = self.nq.front() {
            return Some(PacketKey::Data(i));
        }
        if let Some(&i) = self.rq.front() {
            return Some(PacketKey::Data(i));
        }
        if self.end_due() {
            return Some(PacketKey::End);
        }
        None
    }

    fn pop(&mut self, key: PacketKey) {
        if self.cq.front() == Some(&key) {
            self.cq.pop_front();
        } else if let PacketKey::Data(i) = key {
            if self.nq.front() == Some(&i) {
                self.nq.pop_front();
            } else if self.rq.front() == Some(&i) {
                self.rq.pop_front();
            }
        }
    }

    fn backlog(&self) -> usize {
        self.cq.len() + if self.stopped { 0 } else { self.nq.len() + self.rq.len() }
    }

    fn build(&self, key: PacketKey) -> Packet {
        let cc = quantize_cc(self.cc.rtprop(), self.cc.btlbw());
        match key {
            PacketKey::Registration => Packet::registration(self.flow_id, self.registration(), cc),
            PacketKey::End => Packet::end(self.flow_id, cc),
            PacketKey::Data(i) => {
                let seg = &self.segments[i as usize];
                Packet::data(self.flow_id, key.seq_id(), seg.importance, self.data[seg.range.clone()].to_vec(), cc)
            }
        }
    }

    /// Returns the next packet to put on the wire, or why there is none.
    pub fn next_packet(&mut self, now: Timestamp) -> Result<Packet, Emission> {
        if self.complete {
            return Err(Emission::NothingToSend);
        }
        self.fire_timers(now);
        let Some(key) = self.peek_next() else {
            return Err(Emission::NothingToSend);
        };
        if now < self.next_send_at {
            return Err(Emission::Paced(self.next_send_at - now));
        }
        let inflight_before = self.cc.inflight();
        let bdp_packets = self.cc.bdp_packets();
        if let SendDecision::WaitFor(hint) = self.cc.may_send(now) {
            return Err(Emission::CapReached(hint));
        }

        let burst = (bdp_packets - inflight_before).min(self.backlog() as u64) as usize;
        let gap = if burst > self.cc.config().burst_threshold {
            self.cc.pacing_delay(burst) / burst as u32
        } else {
            Duration::ZERO
        };
        self.next_send_at = now + gap;

        self.pop(key);
        let retransmission = self.transmitted.insert(key, ()).is_some();
        if retransmission {
            self.retransmitted.insert(key, ());
        }
        let stamp = self.cc.on_send(now);
        self.stamps.insert(key, stamp);
        self.detector.on_send(key);
        match key {
            PacketKey::Registration => self.registration_sent_at = Some(now),
            PacketKey::End => self.end_sent_at = Some(now),
            PacketKey::Data(_) => {}
        }
        if inflight_before == 0 {
            self.last_activity = now;
        }
        self.stats.transmissions += 1;
        if retransmission {
            self.stats.retransmissions += 1;
        }
        self.events.push(SenderEvent::Sent { key, retransmission, inflight_before, bdp_packets });
        Ok(self.build(key))
    }

    fn payload_len(&self, key: PacketKey) -> usize {
        match key {
            PacketKey::Data(i) => self.segments[i as usize].range.len(),
            _ => 0,
        }
    }

    /// Handles an ACK and returns the packets it caused to be declared lost.
    pub fn on_ack(&mut self, now: Timestamp, seq: SeqId) -> Result<Vec<PacketKey>, SenderError> {
        let key = PacketKey::from_seq(seq);
        if let PacketKey::Data(i) = key {
            if i as usize >= self.segments.len() {
                return Err(SenderError::UnknownSeq(i));
            }
        }
        let outcome = self.detector.on_ack(key)?;
        if !outcome.first_ack {
            return Ok(Vec::new());
        }
        if outcome.was_outstanding {
            if let Some(stamp) = self.stamps.remove(key) {
                let bytes = self.payload_len(key);
                if self.retransmitted.contains(key) {
                    self.cc.on_ack_unsampled(now, bytes);
                } else {
                    self.cc.on_ack_sample(now, &stamp, bytes);
                }
            }
        } else {
            self.cancel_retransmission(key);
        }
        if self.importance(key).is_critical() && key != PacketKey::End {
            self.critical_unacked -= 1;
        }
        if matches!(key, PacketKey::Data(_)) {
            self.unacked_data -= 1;
        }
        for &lost in &outcome.newly_lost {
            self.declare_lost(lost, false);
        }
        self.last_activity = now;
        self.probe_backoff = 0;
        self.check_complete();
        Ok(outcome.newly_lost)
    }

    fn cancel_retransmission(&mut self, key: PacketKey) {
        let before = self.cq.len() + self.rq.len();
        match key {
            PacketKey::Data(i) => {
                self.cq.retain(|&k| k != key);
                self.rq.retain(|&j| j != i);
            }
            _ => self.cq.retain(|&k| k != key),
        }
        if self.cq.len() + self.rq.len() < before {
            self.stats.cancelled_retransmissions += 1;
        }
    }

    /// Early Close notification from the receiver.
    pub fn on_stop(&mut self) {
        if self.complete || self.stopped {
            return;
        }
        self.stopped = true;
        self.stats.discarded_on_stop += (self.nq.len() + self.rq.len()) as u64;
        self.nq.clear();
        self.rq.clear();
        self.cq.retain(|&k| k != PacketKey::End);
        self.events.push(SenderEvent::Stopped);
        self.check_complete();
    }

    fn check_complete(&mut self) {
        if self.complete {
            return;
        }
        let done = if self.stopped {
            self.critical_unacked == 0
        } else {
            self.critical_unacked == 0 && self.unacked_data == 0 && self.detector.is_acked(PacketKey::End)
        };
        if done {
            self.complete = true;
            self.cq.clear();
            self.events.push(SenderEvent::Completed);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::PacketType;

    fn t(us: u64) -> Timestamp {
        Timestamp::from_nanos(us * 1_000)
    }

    fn seq(i: u32) -> SeqId {
        SeqId::new(i).unwrap()
    }

    fn flow(len: usize, element_size: usize, critical: &[Range<usize>]) -> FlowSendState {
        FlowSendState::segment_buffer(1, vec![7u8; len], element_size, critical, &SenderConfig::default(), t(0))
            .unwrap()
    }

    /// Drains every packet the flow is willing to send right now.
    fn send_all(f: &mut FlowSendState, now: Timestamp) -> Vec<Packet> {
        let mut out = Vec::new();
        while let Ok(p) = f.next_packet(now) {
            out.push(p);
        }
        out
    }

    fn key_of(p: &Packet) -> PacketKey {
        PacketKey::from_seq(p.header.seq_id)
    }

    #[test]
    fn segments_12000_bytes_of_f32() {
        let f = flow(12_000, 4, &[]);
        let lens: Vec<usize> = f.segments().iter().map(|s| s.range.len()).collect();
        assert_eq!(lens, [vec![1460; 8], vec![320]].concat());
        assert_eq!(f.registration(), Registration { segments: 9, total_bytes: 12_000 });
    }

    #[test]
    fn f64_segments_floor_to_multiple() {
        let f = flow(8 * 1000, 8, &[]);
        assert_eq!(f.segments()[0].range, 0..1456);
        assert!(f.segments().iter().all(|s| s.range.start % 8 == 0 && s.range.end % 8 == 0));
    }

    #[test]
    fn critical_ranges_mark_first_and_last() {
        let f = flow(12_000, 4, &[0..64, 11_936..12_000]);
        let crit: Vec<bool> = f.segments().iter().map(|s| s.importance.is_critical()).collect();
        assert_eq!(crit, [true, false, false, false, false, false, false, false, true]);
        assert_eq!(
            f.cq().iter().copied().collect::<Vec<_>>(),
            [PacketKey::Registration, PacketKey::Data(0), PacketKey::Data(8)]
        );
        assert_eq!(f.nq().len(), 7);
    }

    #[test]
    fn segmentation_errors() {
        let cfg = SenderConfig::default();
        let err = |data: Vec<u8>, es: usize, crit: &[Range<usize>]| {
            FlowSendState::segment_buffer(0, data, es, crit, &cfg, t(0)).unwrap_err()
        };
        assert_eq!(err(vec![], 4, &[]), SenderError::EmptyBuffer);
        assert_eq!(err(vec![0; 8], 3, &[]), SenderError::InvalidElementSize(3));
        assert!(matches!(err(vec![0; 8], 4, &[4..12]), SenderError::CriticalRangeOutOfBounds { .. }));
    }

    #[test]
    fn queue_priority_reg_then_nq() {
        let mut f = flow(12_000, 4, &[]);
        let keys: Vec<PacketKey> = send_all(&mut f, t(0)).iter().map(key_of).collect();
        let mut expect = vec![PacketKey::Registration];
        expect.extend((0..9).map(PacketKey::Data));
        assert_eq!(keys, expect);
    }

    #[test]
    fn out_of_order_acks_declare_loss_at_three() {
        let mut f = flow(12_000, 4, &[]);
        send_all(&mut f, t(0));
        // sent_log: Reg, D0..D8. Ack Reg, D0, D1, then D3, D4.
        for k in [REGISTRATION_SEQ, seq(0), seq(1), seq(3), seq(4)] {
            assert!(f.on_ack(t(100), k).unwrap().is_empty());
        }
        assert_eq!(f.detector().later_acked_count(PacketKey::Data(2)), Some(2));
        assert_eq!(f.on_ack(t(100), seq(5)).unwrap(), vec![PacketKey::Data(2)]);
        assert_eq!(f.rq().iter().copied().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn duplicate_acks_do_not_count() {
        let mut f = flow(12_000, 4, &[]);
        send_all(&mut f, t(0));
        for _ in 0..5 {
            f.on_ack(t(100), seq(6)).unwrap();
        }
        assert_eq!(f.detector().later_acked_count(PacketKey::Data(2)), Some(1));
    }

    #[test]
    fn rq_waits_for_nq() {
        // Small cap: nothing is in flight beyond what we send by hand.
        let mut f = flow(12_000, 4, &[]);
        let mut sent = Vec::new();
        for _ in 0..7 {
            sent.push(key_of(&f.next_packet(t(0)).unwrap()));
        }
        // Reg, D0..D5 sent. D3 lost: ack D4, D5 and the registration, D0.
        for k in [REGISTRATION_SEQ, seq(0), seq(1), seq(2), seq(4), seq(5)] {
            f.on_ack(t(50), k).unwrap();
        }
        assert!(f.rq().is_empty());
        // need a third later ack; send D6 and ack it.
        sent.push(key_of(&f.next_packet(t(50)).unwrap()));
        assert_eq!(f.on_ack(t(60), seq(6)).unwrap(), vec![PacketKey::Data(3)]);
        let rest: Vec<PacketKey> = send_all(&mut f, t(60)).iter().map(key_of).collect();
        assert_eq!(rest, vec![PacketKey::Data(7), PacketKey::Data(8), PacketKey::Data(3)]);
    }

    #[test]
    fn late_ack_cancels_retransmission() {
        let mut f = flow(12_000, 4, &[]);
        send_all(&mut f, t(0));
        for k in [seq(4), seq(5), seq(6)] {
            f.on_ack(t(10), k).unwrap();
        }
        assert!(f.rq().contains(&3));
        f.on_ack(t(20), seq(3)).unwrap();
        assert!(!f.rq().contains(&3));
        assert_eq!(f.stats().cancelled_retransmissions, 1);
    }

    #[test]
    fn unknown_seq_is_rejected() {
        let mut f = flow(12_000, 4, &[]);
        assert_eq!(f.on_ack(t(0), seq(0)), Err(SenderError::UnknownSeq(0)));
        send_all(&mut f, t(0));
        assert_eq!(f.on_ack(t(0), seq(50)), Err(SenderError::UnknownSeq(50)));
    }

    #[test]
    fn stop_discards_rq_and_completes() {
        let mut f = flow(12_000, 4, &[]);
        send_all(&mut f, t(0));
        f.on_ack(t(10), REGISTRATION_SEQ).unwrap();
        for k in [seq(4), seq(5), seq(6)] {
            f.on_ack(t(10), k).unwrap();
        }
        assert!(f.rq().contains(&3));
        f.on_stop();
        assert!(f.rq().is_empty());
        assert!(f.is_complete());
        assert!(f.next_packet(t(20)).is_err());
    }

    #[test]
    fn stop_before_normal_data_is_sent() {
        let mut f = flow(12_000, 4, &[]);
        f.next_packet(t(0)).unwrap();
        f.on_ack(t(5), REGISTRATION_SEQ).unwrap();
        f.on_stop();
        assert!(f.is_complete());
        assert_eq!(f.stats().discarded_on_stop, 9);
        assert_eq!(f.sent_log(), &[PacketKey::Registration]);
        f.on_stop();
        assert!(f.is_complete());
    }

    #[test]
    fn stop_keeps_critical_until_acked() {
        let mut f = flow(12_000, 4, &[0..64]);
        assert_eq!(key_of(&f.next_packet(t(0)).unwrap()), PacketKey::Registration);
        f.on_ack(t(5), REGISTRATION_SEQ).unwrap();
        f.on_stop();
        assert!(!f.is_complete());
        let p = f.next_packet(t(5)).unwrap();
        assert_eq!(key_of(&p), PacketKey::Data(0));
        assert!(p.header.importance.is_critical());
        // Lost: the silence probe re-sends it.
        let wake = f.next_timeout().unwrap();
        let again = f.next_packet(wake).unwrap();
        assert_eq!(key_of(&again), PacketKey::Data(0));
        f.on_ack(wake + Duration::from_micros(10), seq(0)).unwrap();
        assert!(f.is_complete());
    }

    #[test]
    fn registration_retransmits_on_timer() {
        let mut f = flow(12_000, 4, &[]);
        f.next_packet(t(0)).unwrap();
        let rtprop = f.congestion().rtprop();
        assert_eq!(f.next_timeout(), Some(t(0) + 2 * rtprop));
        // Registration has priority over the NQ backlog.
        let p = f.next_packet(t(0) + 2 * rtprop).unwrap();
        assert_eq!(p.header.ptype, PacketType::Registration);
        assert_eq!(f.stats().retransmissions, 1);
    }

    #[test]
    fn end_is_sent_after_everything_is_acked() {
        let mut f = flow(3000, 4, &[]);
        let sent = send_all(&mut f, t(0));
        assert_eq!(sent.len(), 4);
        for p in &sent {
            f.on_ack(t(10), p.header.seq_id).unwrap();
        }
        let end = f.next_packet(t(10)).unwrap();
        assert_eq!(end.header.ptype, PacketType::End);
        assert!(end.header.importance.is_critical());
        assert!(!f.is_complete());
        f.on_ack(t(20), END_SEQ).unwrap();
        assert!(f.is_complete());
    }

    #[test]
    fn loss_keeps_bdp() {
        let mut f = flow(12_000, 4, &[]);
        send_all(&mut f, t(0));
        for k in [seq(4), seq(5), seq(6)] {
            f.on_ack(t(100), k).unwrap();
        }
        let losses = f
            .drain_events()
            .filter(|ev| match ev {
                SenderEvent::LossDeclared { bdp_before, bdp_after, .. } => {
                    assert_eq!(bdp_before, bdp_after);
                    true
                }
                _ => false,
            })
            .count();
        assert_eq!(losses, 5);
    }
}
