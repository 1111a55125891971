//! BDP-based congestion control.
//!
//! Estimates RTprop (windowed minimum RTT) and BtlBw (windowed maximum
//! delivery rate) and caps the packets in flight at their product. Loss is not
//! a congestion signal: a declared loss only releases its in-flight slot.
//!
//! Delivery-rate samples follow the usual BBR construction: every send is
//! stamped with the delivered-bytes counter, and the ACK for it yields the
//! bytes delivered since then over the longer of the send and ACK intervals,
//! so compressed ACKs cannot overstate the rate.
//! The BtlBw window is counted in packet-timed round trips.

use std::collections::VecDeque;
use std::time::Duration;

use crate::time::Timestamp;
use crate::wire::MAX_SEGMENT_BYTES;

#[derive(Debug, Clone, PartialEq)]
pub struct CongestionConfig {
    pub max_segment_bytes: usize,
    pub rtprop_window: Duration,
    pub btlbw_window_rounds: u64,
    /// Round trips spent at `startup_gain` before settling at `pacing_gain`.
    pub startup_rounds: u64,
    pub startup_gain: f64,
    pub pacing_gain: f64,
    /// Gain of the bandwidth-probing round that ends every `probe_cycle_rounds`
    /// rounds after startup. Without it a flow held at its own cap can never
    /// measure more than its current estimate and never takes up freed capacity.
    pub probe_gain: f64,
    pub probe_cycle_rounds: u64,
    /// Bursts larger than this are paced.
    pub burst_threshold: usize,
    pub initial_rtprop: Duration,
    pub initial_btlbw_bps: f64,
}

impl Default for CongestionConfig {
    fn default() -> Self {
        CongestionConfig {
            max_segment_bytes: MAX_SEGMENT_BYTES,
            rtprop_window: Duration::from_secs(10),
            btlbw_window_rounds: 10,
            startup_rounds: 10,
            startup_gain: 2.0,
            pacing_gain: 1.0,
            probe_gain: 1.25,
            probe_cycle_rounds: 8,
            burst_threshold: 20,
            initial_rtprop: Duration::from_millis(1),
            initial_btlbw_bps: 100e6,
        }
    }
}

/// Delivery bookkeeping captured when a packet is sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendStamp {
    pub sent_at: Timestamp,
    pub delivered: u64,
    pub delivered_at: Timestamp,
    /// Send time of the most recently acknowledged packet when this one left.
    pub first_sent_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendDecision {
    Send,
    /// Cap reached; the duration is an advisory hint for the next ACK.
    WaitFor(Duration),
}

/// Sliding-window extremum over `(key, value)` samples with monotone keys.
#[derive(Debug, Clone)]
struct WindowedExtremum {
    keep_min: bool,
    samples: VecDeque<(u128, f64)>,
}

impl WindowedExtremum {
    fn new(keep_min: bool) -> Self {
        WindowedExtremum { keep_min, samples: VecDeque::new() }
    }

    fn dominated(&self, old: f64, new: f64) -> bool {
        if self.keep_min {
            new <= old
        } else {
            new >= old
        }
    }

    /// Inserts a sample and drops samples with key < `key - window`.
    fn update(&mut self, key: u128, value: f64, window: u128) {
        while let Some(&(_, back)) = self.samples.back() {
            if self.dominated(back, value) {
                self.samples.pop_back();
            } else {
                break;
            }
        }
        self.samples.push_back((key, value));
        let horizon = key.saturating_sub(window);
        while let Some(&(k, _)) = self.samples.front() {
            if k < horizon {
                self.samples.pop_front();
            } else {
                break;
            }
        }
    }

    fn best(&self) -> Option<f64> {
        self.samples.front().map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone)]
pub struct CongestionState {
    config: CongestionConfig,
    rtprop_filter: WindowedExtremum,
    btlbw_filter: WindowedExtremum,
    inflight: u64,
    delivered: u64,
    delivered_at: Timestamp,
    round_count: u64,
    next_round_delivered: u64,
    srtt: Option<Duration>,
    rttvar: Duration,
    first_sent_at: Timestamp,
    seed_rtprop: Duration,
    seed_btlbw: f64,
}

impl CongestionState {
    pub fn new(config: CongestionConfig, now: Timestamp) -> Self {
        let seed_rtprop = config.initial_rtprop;
        let seed_btlbw = config.initial_btlbw_bps;
        CongestionState {
            config,
            rtprop_filter: WindowedExtremum::new(true),
            btlbw_filter: WindowedExtremum::new(false),
            inflight: 0,
            delivered: 0,
            delivered_at: now,
            round_count: 0,
            next_round_delivered: 0,
            srtt: None,
            rttvar: Duration::ZERO,
            first_sent_at: now,
            seed_rtprop,
            seed_btlbw,
        }
    }

    /// Starts from estimates learned by an earlier flow on the same path
    /// instead of the configured defaults. Real samples still replace them.
    pub fn with_seed(mut self, rtprop: Duration, btlbw_bps: f64) -> Self {
        if !rtprop.is_zero() {
            self.seed_rtprop = rtprop;
        }
        if btlbw_bps > 0.0 {
            self.seed_btlbw = btlbw_bps;
        }
        self
    }

    pub fn config(&self) -> &CongestionConfig {
        &self.config
    }

    pub fn rtprop(&self) -> Duration {
        self.rtprop_filter
            .best()
            .map(|ns| Duration::from_nanos(ns as u64))
            .unwrap_or(self.seed_rtprop)
    }

    pub fn btlbw(&self) -> f64 {
        self.btlbw_filter.best().unwrap_or(self.seed_btlbw)
    }

    pub fn smoothed_rtt(&self) -> Duration {
        self.srtt.unwrap_or_else(|| self.rtprop())
    }

    /// Mean deviation of RTT samples.
    pub fn rtt_var(&self) -> Duration {
        self.rttvar
    }

    pub fn inflight(&self) -> u64 {
        self.inflight
    }

    pub fn round_count(&self) -> u64 {
        self.round_count
    }

    pub fn in_startup(&self) -> bool {
        self.round_count < self.config.startup_rounds
    }

    pub fn gain(&self) -> f64 {
        if self.in_startup() {
            return self.config.startup_gain;
        }
        let cycle = self.config.probe_cycle_rounds.max(1);
        if (self.round_count - self.config.startup_rounds) % cycle == cycle - 1 {
            self.config.probe_gain
        } else {
            self.config.pacing_gain
        }
    }

    /// In-flight cap in packets of `max_segment_bytes`, never below 1.
    pub fn bdp_packets(&self) -> u64 {
        let bits = self.gain() * self.rtprop().as_secs_f64() * self.btlbw();
        let pkts = (bits / (8.0 * self.config.max_segment_bytes as f64)).ceil();
        if pkts.is_finite() && pkts >= 1.0 {
            pkts as u64
        } else {
            1
        }
    }

    pub fn pacing_rate(&self) -> f64 {
        self.gain() * self.btlbw()
    }

    /// Records a transmission and returns the stamp to hand back on its ACK.
    pub fn on_send(&mut self, now: Timestamp) -> SendStamp {
        self.inflight += 1;
        SendStamp {
            sent_at: now,
            delivered: self.delivered,
            delivered_at: self.delivered_at,
            first_sent_at: self.first_sent_at,
        }
    }

    pub fn on_ack_sample(&mut self, now: Timestamp, stamp: &SendStamp, acked_bytes: usize) {
        self.inflight = self.inflight.saturating_sub(1);
        self.delivered += acked_bytes as u64;
        self.delivered_at = now;

        let rtt = now.saturating_since(stamp.sent_at);
        self.rtprop_filter.update(
            now.as_nanos(),
            rtt.as_nanos() as f64,
            self.config.rtprop_window.as_nanos(),
        );
        match self.srtt {
            None => {
                self.srtt = Some(rtt);
                self.rttvar = rtt / 2;
            }
            Some(s) => {
                let dev = rtt.abs_diff(s);
                self.rttvar = (self.rttvar * 3 + dev) / 4;
                self.srtt = Some((s * 7 + rtt) / 8);
            }
        }

        if stamp.delivered >= self.next_round_delivered {
            self.next_round_delivered = self.delivered;
            self.round_count += 1;
        }

        let ack_interval = now.saturating_since(stamp.delivered_at);
        let send_interval = stamp.sent_at.saturating_since(stamp.first_sent_at);
        self.first_sent_at = stamp.sent_at;
        let interval = ack_interval.max(send_interval);
        if !interval.is_zero() {
            let rate = (self.delivered - stamp.delivered) as f64 * 8.0 / interval.as_secs_f64();
            self.btlbw_filter.update(
                u128::from(self.round_count),
                rate,
                u128::from(self.config.btlbw_window_rounds.saturating_sub(1)),
            );
        }
    }

    /// ACK for a packet sent more than once: which copy arrived is unknown,
    /// so it updates delivery accounting but yields no RTT or rate sample.
    pub fn on_ack_unsampled(&mut self, now: Timestamp, acked_bytes: usize) {
        self.inflight = self.inflight.saturating_sub(1);
        self.delivered += acked_bytes as u64;
        self.delivered_at = now;
    }

    /// A packet left the network without an ACK. Estimates are untouched.
    pub fn on_loss_declared(&mut self) {
        self.inflight = self.inflight.saturating_sub(1);
    }

    pub fn may_send(&self, _now: Timestamp) -> SendDecision {
        if self.inflight < self.bdp_packets() {
            SendDecision::Send
        } else {
            SendDecision::WaitFor(self.rtprop())
        }
    }

    pub fn pacing_delay(&self, burst_size: usize) -> Duration {
        if burst_size <= self.config.burst_threshold {
            return Duration::ZERO;
        }
        let rate = self.pacing_rate();
        if rate <= 0.0 {
            return Duration::ZERO;
        }
        let secs = (burst_size * self.config.max_segment_bytes * 8) as f64 / rate;
        Duration::from_secs_f64(secs)
    }
}
