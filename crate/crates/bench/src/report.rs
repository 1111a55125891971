use std::time::Duration;

use ltp::receiver::CloseReason;
use ltp::sync::Direction;
use serde::Serialize;

use crate::{MetricsReport, ModeRun};

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// One flow of one batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowRow {
    pub loss_rate: f64,
    pub mode: &'static str,
    pub epoch: usize,
    pub batch: usize,
    pub direction: &'static str,
    pub worker: usize,
    pub flow_id: u16,
    pub fct_ms: f64,
    pub close_reason: &'static str,
    pub received_fraction: f64,
    pub missing_segments: usize,
    pub transmissions: u64,
    pub retransmissions: u64,
    pub losses_declared: u64,
    pub lt_ms: f64,
    /// Empty for flows without a deadline.
    pub deadline_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRow {
    pub loss_rate: f64,
    pub mode: &'static str,
    pub epoch: usize,
    pub batch: usize,
    pub gather_ms: f64,
    pub broadcast_ms: f64,
    pub bst_ms: f64,
    pub max_lt_ms: f64,
    pub deadline_ms: Option<f64>,
}

/// Aggregates over one (loss rate, mode) grid point. Fraction, FCT and
/// close-reason columns cover gather flows only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub loss_rate: f64,
    pub mode: &'static str,
    pub batches: usize,
    pub mean_bst_ms: f64,
    pub p50_bst_ms: f64,
    pub p99_bst_ms: f64,
    pub max_bst_ms: f64,
    pub mean_gather_ms: f64,
    pub mean_broadcast_ms: f64,
    pub p50_gather_fct_ms: f64,
    pub p99_gather_fct_ms: f64,
    pub mean_received_fraction: f64,
    pub min_received_fraction: f64,
    pub all_received: usize,
    pub early_closed: usize,
    pub deadline_forced: usize,
    pub retransmissions: u64,
    /// model_bytes × n_workers over mean BST.
    pub throughput_gbps: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub(crate) fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs
}

impl ModeRun {
    pub fn flow_rows(&self) -> impl Iterator<Item = FlowRow> + '_ {
        self.report.flows.iter().map(|f| FlowRow {
            loss_rate: self.loss_rate,
            mode: self.mode.as_str(),
            epoch: f.epoch,
            batch: f.batch,
            direction: f.direction.as_str(),
            worker: f.flow.worker,
            flow_id: f.flow.flow_id,
            fct_ms: ms(f.flow.fct),
            close_reason: f.flow.close.reason.as_str(),
            received_fraction: f.flow.close.received_fraction,
            missing_segments: f.flow.missing_segments.len(),
            transmissions: f.flow.stats.transmissions,
            retransmissions: f.flow.stats.retransmissions,
            losses_declared: f.flow.stats.losses_declared,
            lt_ms: ms(f.flow.close.lt_threshold),
            deadline_ms: f.flow.close.deadline.map(ms),
        })
    }

    pub fn batch_rows(&self) -> impl Iterator<Item = BatchRow> + '_ {
        self.report.batches.iter().map(|b| BatchRow {
            loss_rate: self.loss_rate,
            mode: self.mode.as_str(),
            epoch: b.epoch,
            batch: b.batch,
            gather_ms: ms(b.gather_time),
            broadcast_ms: ms(b.broadcast_time),
            bst_ms: ms(b.bst),
            max_lt_ms: b.lt_thresholds.iter().copied().max().map(ms).unwrap_or(0.0),
            deadline_ms: b.deadline.map(ms),
        })
    }

    pub fn summary(&self) -> SummaryRow {
        let batches = &self.report.batches;
        let bst = sorted(batches.iter().map(|b| ms(b.bst)).collect());
        let gather: Vec<_> = self.report.flows.iter().filter(|f| f.direction == Direction::Gather).collect();
        let fct = sorted(gather.iter().map(|f| ms(f.flow.fct)).collect());
        let fractions: Vec<f64> = gather.iter().map(|f| f.flow.close.received_fraction).collect();
        let count = |r| gather.iter().filter(|f| f.flow.close.reason == r).count();
        let mean_bst = mean(&bst);
        let bits = (self.model_bytes * self.n_workers) as f64 * 8.0;
        SummaryRow {
            loss_rate: self.loss_rate,
            mode: self.mode.as_str(),
            batches: batches.len(),
            mean_bst_ms: mean_bst,
            p50_bst_ms: percentile(&bst, 50.0),
            p99_bst_ms: percentile(&bst, 99.0),
            max_bst_ms: bst.last().copied().unwrap_or(0.0),
            mean_gather_ms: mean(&batches.iter().map(|b| ms(b.gather_time)).collect::<Vec<_>>()),
            mean_broadcast_ms: mean(&batches.iter().map(|b| ms(b.broadcast_time)).collect::<Vec<_>>()),
            p50_gather_fct_ms: percentile(&fct, 50.0),
            p99_gather_fct_ms: percentile(&fct, 99.0),
            mean_received_fraction: mean(&fractions),
            min_received_fraction: fractions.iter().copied().reduce(f64::min).unwrap_or(0.0),
            all_received: count(CloseReason::AllReceived),
            early_closed: count(CloseReason::EarlyClosed),
            deadline_forced: count(CloseReason::DeadlineForced),
            retransmissions: self.report.flows.iter().map(|f| f.flow.stats.retransmissions).sum(),
            throughput_gbps: if mean_bst > 0.0 { bits / (mean_bst * 1e-3) / 1e9 } else { 0.0 },
        }
    }
}

impl MetricsReport {
    pub fn flow_rows(&self) -> Vec<FlowRow> {
        self.runs.iter().flat_map(ModeRun::flow_rows).collect()
    }

    pub fn batch_rows(&self) -> Vec<BatchRow> {
        self.runs.iter().flat_map(ModeRun::batch_rows).collect()
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.runs.iter().map(ModeRun::summary).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&xs, 50.0), 5.0);
        assert_eq!(percentile(&xs, 99.0), 10.0);
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }
}
