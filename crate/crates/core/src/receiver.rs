//! Receive side of one LTP flow.
//!
//! Every Registration, Data and End packet is acknowledged on arrival, in
//! whatever order it arrives. Whether the flow waits for the remaining
//! segments is decided by two time bounds measured from registration:
//!
//! - before the LT threshold the receiver waits for everything;
//! - between the LT threshold and the deadline it closes as soon as the
//!   received fraction reaches `pct_threshold`;
//! - at the deadline it closes regardless of the fraction.
//!
//! Critical segments are never waived: a flow stays open while any of them is
//! missing. Missing segments are replaced by zeros on reassembly.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::ops::Range;
use std::time::Duration;

use thiserror::Error;

use crate::sender::segment_len;
use crate::time::Timestamp;
use crate::wire::{Packet, PacketType, Registration, MAX_SEGMENT_BYTES};

pub const DEFAULT_PCT_THRESHOLD: f64 = 0.8;
pub const STOP_REPEATS: u32 = 3;
/// Data packets held per flow while its registration is still missing.
pub const EARLY_DATA_CAP: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReceiverError {
    #[error("data for flow {0} before its registration")]
    UnknownFlow(u16),
    #[error("registration for {segments} segments does not match {total_bytes} bytes at {seg_len}-byte segments")]
    InconsistentRegistration { segments: u32, total_bytes: u32, seg_len: usize },
    #[error("segment {seq} with {len} bytes does not fit the flow layout")]
    BadSegment { seq: u32, len: usize },
    #[error("flow {0} is still open")]
    NotClosed(u16),
    #[error("bottleneck bandwidth estimate is zero")]
    DegenerateBandwidth,
    #[error("unexpected {0:?} packet")]
    UnexpectedPacket(PacketType),
}

/// Which segments the receiver must hold before it may close a flow.
///
/// The sender marks critical segments in the header, but the receiver needs to
/// know about them before they arrive. Both ends derive the set from the same
/// byte layout.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum CriticalLayout {
    #[default]
    None,
    /// The first `head` and last `tail` bytes of the buffer.
    HeadTail { head: usize, tail: usize },
    All,
    Ranges(Vec<Range<usize>>),
}

impl CriticalLayout {
    /// Byte ranges for a buffer of `total_bytes`.
    pub fn byte_ranges(&self, total_bytes: usize) -> Vec<Range<usize>> {
        match self {
            CriticalLayout::None => Vec::new(),
            CriticalLayout::All => vec![0..total_bytes],
            CriticalLayout::HeadTail { head, tail } => {
                let mut v = Vec::new();
                if *head > 0 {
                    v.push(0..(*head).min(total_bytes));
                }
                if *tail > 0 {
                    v.push(total_bytes.saturating_sub(*tail)..total_bytes);
                }
                v
            }
            CriticalLayout::Ranges(r) => r.iter().map(|r| r.start.min(total_bytes)..r.end.min(total_bytes)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverConfig {
    pub element_size: usize,
    pub max_segment_bytes: usize,
    pub pct_threshold: f64,
    pub lt_threshold: Duration,
    /// `None` disables the deadline (fully reliable flow).
    pub deadline: Option<Duration>,
    pub critical: CriticalLayout,
    /// Spacing of the repeated stop message.
    pub stop_spacing: Duration,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            element_size: 4,
            max_segment_bytes: MAX_SEGMENT_BYTES,
            pct_threshold: DEFAULT_PCT_THRESHOLD,
            lt_threshold: Duration::ZERO,
            deadline: None,
            critical: CriticalLayout::None,
            stop_spacing: Duration::from_millis(1),
        }
    }
}

impl ReceiverConfig {
    /// Broadcast direction: every byte is critical and nothing closes early.
    pub fn reliable(element_size: usize) -> Self {
        ReceiverConfig {
            element_size,
            pct_threshold: 1.0,
            lt_threshold: Duration::MAX,
            deadline: None,
            critical: CriticalLayout::All,
            ..ReceiverConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CloseReason {
    AllReceived,
    EarlyClosed,
    DeadlineForced,
}

impl CloseReason {
    pub fn as_str(self) -> &'static str {
        match self {
            CloseReason::AllReceived => "all_received",
            CloseReason::EarlyClosed => "early_closed",
            CloseReason::DeadlineForced => "deadline_forced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseState {
    Open,
    Close(CloseReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloseRecord {
    pub flow_id: u16,
    pub reason: CloseReason,
    pub closed_at: Timestamp,
    /// Measured from registration arrival.
    pub elapsed: Duration,
    pub received_fraction: f64,
    pub lt_threshold: Duration,
    pub deadline: Option<Duration>,
    pub pct_threshold: f64,
    pub critical_pending: usize,
}

#[derive(Debug)]
pub struct ReassemblyState {
    flow_id: u16,
    total_segments: u32,
    total_bytes: u32,
    seg_len: usize,
    slots: Vec<Option<Vec<u8>>>,
    critical_pending: BTreeSet<u32>,
    received_segments: u32,
    received_bytes: u64,
    start_time: Timestamp,
    config: ReceiverConfig,
    close: Option<CloseRecord>,
    stops_sent: u32,
    next_stop_at: Timestamp,
    acks_sent: u64,
    duplicates: u64,
    /// The LT threshold has passed; only the deadline or a packet can close the flow now.
    lt_passed: bool,
}

impl ReassemblyState {
    /// Creates the flow from its registration; the Early Close clock starts now.
    pub fn register(
        flow_id: u16,
        reg: Registration,
        config: ReceiverConfig,
        now: Timestamp,
    ) -> Result<Self, ReceiverError> {
        let seg_len = segment_len(config.element_size, config.max_segment_bytes);
        let expected = (reg.total_bytes as usize).div_ceil(seg_len.max(1));
        if seg_len == 0 || reg.total_bytes == 0 || expected != reg.segments as usize {
            return Err(ReceiverError::InconsistentRegistration {
                segments: reg.segments,
                total_bytes: reg.total_bytes,
                seg_len,
            });
        }
        let mut critical_pending = BTreeSet::new();
        for r in config.critical.byte_ranges(reg.total_bytes as usize) {
            if r.is_empty() {
                continue;
            }
            let first = r.start / seg_len;
            let last = (r.end - 1) / seg_len;
            critical_pending.extend(first as u32..=last as u32);
        }
        Ok(ReassemblyState {
            flow_id,
            total_segments: reg.segments,
            total_bytes: reg.total_bytes,
            seg_len,
            slots: vec![None; reg.segments as usize],
            critical_pending,
            received_segments: 0,
            received_bytes: 0,
            start_time: now,
            config,
            close: None,
            stops_sent: 0,
            next_stop_at: now,
            acks_sent: 0,
            duplicates: 0,
            lt_passed: false,
        })
    }

    pub fn flow_id(&self) -> u16 {
        self.flow_id
    }

    pub fn total_segments(&self) -> u32 {
        self.total_segments
    }

    pub fn total_bytes(&self) -> u32 {
        self.total_bytes
    }

    pub fn seg_len(&self) -> usize {
        self.seg_len
    }

    pub fn start_time(&self) -> Timestamp {
        self.start_time
    }

    pub fn config(&self) -> &ReceiverConfig {
        &self.config
    }

    pub fn received_bytes(&self) -> u64 {
        self.received_bytes
    }

    pub fn received_fraction(&self) -> f64 {
        self.received_bytes as f64 / f64::from(self.total_bytes)
    }

    pub fn critical_pending(&self) -> &BTreeSet<u32> {
        &self.critical_pending
    }

    pub fn is_closed(&self) -> bool {
        self.close.is_some()
    }

    pub fn close_record(&self) -> Option<&CloseRecord> {
        self.close.as_ref()
    }

    pub fn acks_sent(&self) -> u64 {
        self.acks_sent
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    /// Sequence ids of segments that never arrived.
    pub fn missing_segments(&self) -> Vec<u32> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_none())
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Byte range covered by segment `seq`.
    pub fn segment_range(&self, seq: u32) -> Range<usize> {
        let start = seq as usize * self.seg_len;
        start..(start + self.seg_len).min(self.total_bytes as usize)
    }

    /// Adjusts the time bounds of a flow that has not closed yet.
    pub fn set_thresholds(&mut self, lt_threshold: Duration, deadline: Option<Duration>) {
        if self.close.is_none() {
            self.config.lt_threshold = lt_threshold;
            self.lt_passed = false;
            self.config.deadline = deadline;
        }
    }

    /// Processes one packet and returns the Ack to send back, if any.
    pub fn on_packet(&mut self, p: &Packet, now: Timestamp) -> Result<Option<Packet>, ReceiverError> {
        let h = &p.header;
        match h.ptype {
            PacketType::Ack => return Err(ReceiverError::UnexpectedPacket(PacketType::Ack)),
            PacketType::Registration | PacketType::End => {}
            PacketType::Data => {
                let seq = h.seq_id.get();
                let expected = if seq < self.total_segments { self.segment_range(seq).len() } else { 0 };
                if !h.seq_id.is_data() || expected != p.payload.len() {
                    return Err(ReceiverError::BadSegment { seq, len: p.payload.len() });
                }
                if self.close.is_none() {
                    let slot = &mut self.slots[seq as usize];
                    if slot.is_none() {
                        *slot = Some(p.payload.clone());
                        self.received_segments += 1;
                        self.received_bytes += p.payload.len() as u64;
                        self.critical_pending.remove(&seq);
                    } else {
                        self.duplicates += 1;
                    }
                }
            }
        }
        self.acks_sent += 1;
        let ack = Packet::ack(self.flow_id, h.seq_id);
        self.poll_close(now);
        Ok(Some(ack))
    }

    fn record_close(&mut self, reason: CloseReason, now: Timestamp) -> CloseState {
        self.close = Some(CloseRecord {
            flow_id: self.flow_id,
            reason,
            closed_at: now,
            elapsed: now.saturating_since(self.start_time),
            received_fraction: self.received_fraction(),
            lt_threshold: self.config.lt_threshold,
            deadline: self.config.deadline,
            pct_threshold: self.config.pct_threshold,
            critical_pending: self.critical_pending.len(),
        });
        self.next_stop_at = now;
        CloseState::Close(reason)
    }

    pub fn poll_close(&mut self, now: Timestamp) -> CloseState {
        if let Some(rec) = &self.close {
            return CloseState::Close(rec.reason);
        }
        if self.received_segments == self.total_segments {
            return self.record_close(CloseReason::AllReceived, now);
        }
        let elapsed = now.saturating_since(self.start_time);
        if elapsed < self.config.lt_threshold {
            return CloseState::Open;
        }
        self.lt_passed = true;
        if !self.critical_pending.is_empty() {
            return CloseState::Open;
        }
        match self.config.deadline {
            Some(deadline) if elapsed >= deadline => self.record_close(CloseReason::DeadlineForced, now),
            _ if self.received_fraction() >= self.config.pct_threshold => {
                self.record_close(CloseReason::EarlyClosed, now)
            }
            _ => CloseState::Open,
        }
    }

    /// Next instant at which `poll_close` or `poll_transmit` may change outcome.
    pub fn next_timeout(&self) -> Option<Timestamp> {
        if self.close.is_some() {
            return (self.stops_sent < STOP_REPEATS).then_some(self.next_stop_at);
        }
        if !self.critical_pending.is_empty() {
            return None;
        }
        let lt = (!self.lt_passed).then(|| self.start_time.saturating_add(self.config.lt_threshold));
        let dl = self.config.deadline.map(|d| self.start_time.saturating_add(d));
        [lt, dl].into_iter().flatten().filter(|&t| t != Timestamp::MAX).min()
    }

    /// Emits the repeated stop message after a close.
    pub fn poll_transmit(&mut self, now: Timestamp) -> Option<Packet> {
        if self.close.is_none() || self.stops_sent >= STOP_REPEATS || now < self.next_stop_at {
            return None;
        }
        self.stops_sent += 1;
        self.next_stop_at = now + self.config.stop_spacing;
        Some(Packet::end(self.flow_id, Default::default()))
    }

    /// Rebuilds the buffer, filling missing segments with zeros.
    pub fn reassemble(&self) -> Result<Vec<u8>, ReceiverError> {
        if self.close.is_none() {
            return Err(ReceiverError::NotClosed(self.flow_id));
        }
        let mut out = vec![0u8; self.total_bytes as usize];
        for (i, slot) in self.slots.iter().enumerate() {
            if let Some(bytes) = slot {
                let r = self.segment_range(i as u32);
                out[r].copy_from_slice(bytes);
            }
        }
        Ok(out)
    }

    /// Frees segment storage after the caller has taken the output.
    pub fn release_storage(&mut self) {
        for v in self.slots.iter_mut().flatten() {
            *v = Vec::new();
        }
    }
}

/// Holds Data packets that arrive before their flow's registration.
#[derive(Debug, Default)]
pub struct EarlyDataBuffer<K: Ord> {
    pending: BTreeMap<K, VecDeque<Packet>>,
}

impl<K: Ord + Clone> EarlyDataBuffer<K> {
    pub fn new() -> Self {
        EarlyDataBuffer { pending: BTreeMap::new() }
    }

    /// Stores `p`; returns false (dropped) when the flow already holds the cap.
    pub fn push(&mut self, key: K, p: Packet) -> bool {
        let q = self.pending.entry(key).or_default();
        if q.len() >= EARLY_DATA_CAP {
            return false;
        }
        q.push_back(p);
        true
    }

    pub fn take(&mut self, key: &K) -> Vec<Packet> {
        self.pending.remove(key).map(Vec::from).unwrap_or_default()
    }

    pub fn len(&self, key: &K) -> usize {
        self.pending.get(key).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// `1.5 * rtprop + model_bytes / btlbw`.
pub fn init_lt_threshold(rtprop: Duration, model_bytes: u64, btlbw_bps: f64) -> Result<Duration, ReceiverError> {
    if btlbw_bps.is_nan() || btlbw_bps <= 0.0 {
        return Err(ReceiverError::DegenerateBandwidth);
    }
    let transfer = model_bytes as f64 * 8.0 / btlbw_bps;
    Ok(rtprop.mul_f64(1.5) + Duration::from_secs_f64(transfer))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetworkProfile {
    Dcn,
    Wan,
}

impl NetworkProfile {
    /// Slack added to the largest LT threshold to form the deadline.
    pub fn deadline_slack(self) -> Duration {
        match self {
            NetworkProfile::Dcn => Duration::from_millis(30),
            NetworkProfile::Wan => Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LinkThreshold {
    lt: Duration,
    best_full_time: Option<Duration>,
}

/// Per-link LT thresholds of one receiver and the shared deadline.
#[derive(Debug, Clone)]
pub struct LtThresholdState {
    slack: Duration,
    model_bytes: u64,
    epoch: u64,
    links: BTreeMap<usize, LinkThreshold>,
    fallback: (Duration, f64),
}

impl LtThresholdState {
    /// `fallback` replaces unknown RTprop/BtlBw estimates in the init formula.
    pub fn new(slack: Duration, model_bytes: u64, fallback: (Duration, f64)) -> Self {
        LtThresholdState { slack, model_bytes, epoch: 0, links: BTreeMap::new(), fallback }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Starts a new epoch: learned minima are forgotten.
    pub fn begin_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
        self.links.clear();
    }

    /// Sets a link's threshold from the init formula.
    pub fn init_link(&mut self, link: usize, rtprop: Option<Duration>, btlbw_bps: Option<f64>) -> Duration {
        let rt = rtprop.unwrap_or(self.fallback.0);
        let bw = btlbw_bps.filter(|b| *b > 0.0).unwrap_or(self.fallback.1);
        let lt = init_lt_threshold(rt, self.model_bytes, bw)
            .or_else(|_| init_lt_threshold(rt, self.model_bytes, self.fallback.1))
            .unwrap_or(rt.mul_f64(1.5));
        self.links.insert(link, LinkThreshold { lt, best_full_time: None });
        lt
    }

    /// Feeds the time of a flow that delivered 100% of its data.
    pub fn update(&mut self, link: usize, observed_full_time: Duration) {
        let entry = self.links.entry(link).or_insert(LinkThreshold { lt: observed_full_time, best_full_time: None });
        let best = entry.best_full_time.map_or(observed_full_time, |b| b.min(observed_full_time));
        entry.best_full_time = Some(best);
        entry.lt = best;
    }

    pub fn lt_threshold(&self, link: usize) -> Option<Duration> {
        self.links.get(&link).map(|l| l.lt)
    }

    pub fn best_full_time(&self, link: usize) -> Option<Duration> {
        self.links.get(&link).and_then(|l| l.best_full_time)
    }

    /// `max(LT threshold over links) + C`.
    pub fn deadline(&self) -> Duration {
        self.links.values().map(|l| l.lt).max().unwrap_or_default() + self.slack
    }
}

/// Tracks the most recent congestion echo seen from each peer.
#[derive(Debug, Clone, Default)]
pub struct PeerEstimates<K: Ord> {
    latest: HashMap<K, (Option<Duration>, Option<f64>)>,
}

impl<K: std::hash::Hash + Eq + Ord> PeerEstimates<K> {
    pub fn new() -> Self {
        PeerEstimates { latest: HashMap::new() }
    }

    pub fn record(&mut self, peer: K, rtprop: Option<Duration>, btlbw: Option<f64>) {
        let e = self.latest.entry(peer).or_insert((None, None));
        if rtprop.is_some() {
            e.0 = rtprop;
        }
        if btlbw.is_some() {
            e.1 = btlbw;
        }
    }

    pub fn get(&self, peer: &K) -> (Option<Duration>, Option<f64>) {
        self.latest.get(peer).copied().unwrap_or((None, None))
    }
}
