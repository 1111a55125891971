use std::collections::BTreeMap;
use std::time::Duration;

use ltp::channel::ChannelConfig;
use ltp::cluster::{Cluster, SimCluster};
use ltp::receiver::CloseReason;
use ltp::sync::{
    run_training_sim, worker_node, Direction, GradientBuffer, NormalWorkload, RunReport, SyncMode, SyncPlan,
    SyncSession, Workload, PS,
};
use ltp::wire::{PacketType, SeqId};

/// Element-wise mean with the dropped elements of each worker taken as zero,
/// summed in worker order.
fn oracle_mean(workers: &[Vec<f32>], dropped: &[Vec<usize>]) -> Vec<f32> {
    let n = workers[0].len();
    (0..n)
        .map(|i| {
            let mut s = 0.0f32;
            for (w, vals) in workers.iter().enumerate() {
                s += if dropped[w].contains(&i) { 0.0 } else { vals[i] };
            }
            s / workers.len() as f32
        })
        .collect()
}

#[test]
fn dropped_segment_counts_as_zero() {
    let workers = vec![vec![1.0, 2.0, 3.0, 4.0], vec![3.0, 2.0, 1.0, 0.0]];
    let mut plan = SyncPlan {
        n_workers: 2,
        model_bytes: 16,
        batches_per_epoch: 1,
        critical_bytes: 0,
        pct_threshold: 0.5,
        ..SyncPlan::default()
    };
    // Two elements per segment, so segment 1 of the second worker holds elements 2 and 3.
    plan.sender.max_segment_bytes = 8;
    let mut c = SimCluster::new(3, ChannelConfig::default()).unwrap();
    let victim = worker_node(1);
    c.set_filter(move |from, to, p| {
        !(from == victim && to == PS && p.header.ptype == PacketType::Data && p.header.seq_id == SeqId::new(1).unwrap())
    });
    let mut s = SyncSession::new(&mut c, plan).unwrap();
    let bufs: Vec<GradientBuffer> = workers.iter().cloned().map(GradientBuffer::new).collect();
    let g = s.gather_round(&bufs).unwrap();

    let expect = oracle_mean(&workers, &[vec![], vec![2, 3]]);
    assert_eq!(expect, vec![2.0, 2.0, 1.5, 2.0]);
    assert_eq!(g.aggregate.values, expect);
    assert_eq!(g.flows[0].close.reason, CloseReason::AllReceived);
    assert_eq!(g.flows[1].close.reason, CloseReason::EarlyClosed);
    assert_eq!(g.flows[1].missing_segments, vec![1]);

    let b = s.broadcast_round(&g.aggregate).unwrap();
    assert!(b.delivered.iter().all(|d| d == &g.aggregate));
}

#[test]
fn lossless_gather_is_the_mean() {
    let workers = [vec![1.0, 2.0, 3.0, 4.0], vec![3.0, 2.0, 1.0, 0.0]];
    let plan = SyncPlan { n_workers: 2, model_bytes: 16, batches_per_epoch: 1, ..SyncPlan::default() };
    let mut c = SimCluster::new(3, ChannelConfig::default()).unwrap();
    let mut s = SyncSession::new(&mut c, plan).unwrap();
    let bufs: Vec<GradientBuffer> = workers.iter().cloned().map(GradientBuffer::new).collect();
    let g = s.gather_round(&bufs).unwrap();
    assert_eq!(g.aggregate.values, vec![2.0, 2.0, 2.0, 2.0]);
}

fn lossy_run(mode: SyncMode, loss: f64, seed: u64, workload: &mut dyn Workload) -> RunReport {
    let plan = SyncPlan { n_workers: 4, model_bytes: 256 << 10, batches_per_epoch: 4, mode, ..SyncPlan::default() };
    let mut c = SimCluster::new(5, ChannelConfig { loss_rate: loss, seed, ..Default::default() }).unwrap();
    run_training_sim(&mut c, &plan, workload).unwrap()
}

#[test]
fn every_close_honours_the_contract() {
    let report = lossy_run(SyncMode::LossTolerant, 0.01, 3, &mut NormalWorkload::new(1));
    assert_eq!(report.flows.len(), 4 * 4 * 2);
    for f in &report.flows {
        let c = &f.flow.close;
        assert_eq!(c.critical_pending, 0);
        if f.direction == Direction::Broadcast {
            assert_eq!(c.reason, CloseReason::AllReceived);
            continue;
        }
        let deadline = c.deadline.expect("gather flows have a deadline");
        let all = c.reason == CloseReason::AllReceived && c.received_fraction == 1.0;
        let early = c.reason == CloseReason::EarlyClosed
            && c.lt_threshold <= c.elapsed
            && c.elapsed < deadline
            && c.received_fraction >= c.pct_threshold;
        let forced = c.reason == CloseReason::DeadlineForced && c.elapsed >= deadline;
        assert_eq!([all, early, forced].iter().filter(|b| **b).count(), 1, "{c:?}");
    }
}

#[test]
fn reliable_baseline_delivers_everything() {
    let report = lossy_run(SyncMode::ReliableBaseline, 0.05, 4, &mut NormalWorkload::new(2));
    assert!(report.flows.iter().all(|f| f.flow.close.reason == CloseReason::AllReceived));
    assert!(report.flows.iter().any(|f| f.flow.stats.retransmissions > 0));
    let mut wl = NormalWorkload::new(2);
    let last: Vec<GradientBuffer> = (0..4).map(|w| wl.gradients(0, 3, w, (256 << 10) / 4)).collect();
    assert_eq!(report.final_aggregate, ltp::sync::aggregate(&last));
}

/// Same values as the wrapped workload, in reverse element order.
struct Reversed(NormalWorkload);

impl Workload for Reversed {
    fn gradients(&mut self, epoch: usize, batch: usize, worker: usize, elements: usize) -> GradientBuffer {
        let mut g = self.0.gradients(epoch, batch, worker, elements);
        g.values.reverse();
        g
    }
}

fn dropped_segments(report: &RunReport) -> BTreeMap<(usize, usize), Vec<u32>> {
    report
        .flows
        .iter()
        .filter(|f| f.direction == Direction::Gather)
        .map(|f| ((f.batch, f.flow.worker), f.flow.missing_segments.clone()))
        .collect()
}

#[test]
fn drops_do_not_depend_on_values() {
    let a = lossy_run(SyncMode::LossTolerant, 0.02, 11, &mut NormalWorkload::new(5));
    let b = lossy_run(SyncMode::LossTolerant, 0.02, 11, &mut Reversed(NormalWorkload::new(5)));
    let (da, db) = (dropped_segments(&a), dropped_segments(&b));
    assert_eq!(da, db);
    assert!(da.values().any(|m| !m.is_empty()), "the run should drop something");
}

#[test]
fn each_epoch_restarts_from_the_init_formula() {
    let plan = SyncPlan { n_workers: 2, model_bytes: 64 << 10, batches_per_epoch: 3, ..SyncPlan::default() };
    let bytes = plan.model_bytes as f64;
    let mut c = SimCluster::new(3, ChannelConfig::default()).unwrap();
    let mut wl = NormalWorkload::new(0);
    let mut s = SyncSession::new(&mut c, plan.clone()).unwrap();
    let elements = plan.elements();

    s.begin_epoch(0);
    let mut learned = Vec::new();
    for batch in 0..3 {
        let g: Vec<_> = (0..2).map(|w| wl.gradients(0, batch, w, elements)).collect();
        let out = s.gather_round(&g).unwrap();
        s.broadcast_round(&out.aggregate).unwrap();
        learned = (0..2).map(|w| s.lt_state().lt_threshold(w).unwrap()).collect();
    }

    let estimates: Vec<_> = (0..2).map(|w| s.cluster().endpoints()[0].peer_estimates(worker_node(w))).collect();
    s.begin_epoch(1);
    let g: Vec<_> = (0..2).map(|w| wl.gradients(1, 0, w, elements)).collect();
    let out = s.gather_round(&g).unwrap();
    for w in 0..2 {
        let (rt, bw) = estimates[w];
        let (rt, bw) = (rt.expect("echoed rtprop"), bw.expect("echoed btlbw"));
        let init = Duration::from_secs_f64(1.5 * rt.as_secs_f64() + bytes * 8.0 / bw);
        let got = out.lt_thresholds[w];
        assert!(got.abs_diff(init) < Duration::from_micros(1), "worker {w}: {got:?} vs {init:?}");
        assert_ne!(got, learned[w]);
    }
}
