//! Parameter-server synchronization over LTP.
//!
//! Node 0 of a cluster is the parameter server and node `w + 1` is worker `w`.
//! A gather round sends every worker's gradients to the server as loss-tolerant
//! flows and averages whatever arrived; missing segments count as zeros. A
//! broadcast round sends the aggregate back on fully reliable flows.

use std::ops::Range;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::channel::NodeId;
use crate::cluster::{Cluster, ClusterError};
use crate::endpoint::{Endpoint, Event, FlowKey, LogLevel};
use crate::receiver::{
    CloseReason, CloseRecord, CriticalLayout, LtThresholdState, NetworkProfile, ReceiverConfig, ReceiverError,
    DEFAULT_PCT_THRESHOLD,
};
use crate::sender::{PacketKey, SenderConfig, SenderError, SenderStats};
use crate::time::Timestamp;

/// Gradients are float32.
pub const ELEMENT_SIZE: usize = 4;
pub const DEFAULT_CRITICAL_BYTES: usize = 64;
pub const PS: NodeId = NodeId(0);

pub fn worker_node(w: usize) -> NodeId {
    NodeId(w as u16 + 1)
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("worker {worker} registration not acknowledged after {waited:?}")]
    WorkerUnreachable { worker: usize, waited: Duration },
    #[error("{direction:?} round did not finish within {timeout:?}; open links: {open:?}")]
    RoundTimeout { direction: Direction, timeout: Duration, open: Vec<usize> },
    #[error("expected {expected} gradient buffers of {elements} elements")]
    ShapeMismatch { expected: usize, elements: usize },
    #[error("gradient byte length {0} is not a multiple of 4")]
    RaggedBytes(usize),
    #[error("worker {0} received a broadcast that differs from the aggregate")]
    BroadcastMismatch(usize),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Sender(#[from] SenderError),
    #[error(transparent)]
    Receiver(#[from] ReceiverError),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientBuffer {
    pub values: Vec<f32>,
}

impl GradientBuffer {
    pub fn new(values: Vec<f32>) -> Self {
        GradientBuffer { values }
    }

    pub fn zeros(elements: usize) -> Self {
        GradientBuffer { values: vec![0.0; elements] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.values.len() * ELEMENT_SIZE
    }

    /// Little-endian byte view used for segmentation.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SyncError> {
        if !bytes.len().is_multiple_of(ELEMENT_SIZE) {
            return Err(SyncError::RaggedBytes(bytes.len()));
        }
        let values = bytes
            .chunks_exact(ELEMENT_SIZE)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok(GradientBuffer { values })
    }
}

/// Element-wise mean; buffers are summed in slice order, then divided by their count.
pub fn aggregate(buffers: &[GradientBuffer]) -> GradientBuffer {
    let Some(first) = buffers.first() else {
        return GradientBuffer::default();
    };
    let mut sum = vec![0.0f32; first.len()];
    for b in buffers {
        for (s, v) in sum.iter_mut().zip(&b.values) {
            *s += *v;
        }
    }
    let n = buffers.len() as f32;
    GradientBuffer { values: sum.into_iter().map(|s| s / n).collect() }
}

/// Source of per-worker gradients.
pub trait Workload {
    fn gradients(&mut self, epoch: usize, batch: usize, worker: usize, elements: usize) -> GradientBuffer;
}

/// Independent normal values, seeded per (epoch, batch, worker).
#[derive(Debug, Clone)]
pub struct NormalWorkload {
    pub seed: u64,
    pub std_dev: f32,
}

impl NormalWorkload {
    pub fn new(seed: u64) -> Self {
        NormalWorkload { seed, std_dev: 1.0 }
    }
}

impl Workload for NormalWorkload {
    fn gradients(&mut self, epoch: usize, batch: usize, worker: usize, elements: usize) -> GradientBuffer {
        let stream = mix(self.seed, &[epoch as u64, batch as u64, worker as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let normal = Normal::new(0.0f32, self.std_dev).expect("finite std_dev");
        GradientBuffer { values: (0..elements).map(|_| normal.sample(&mut rng)).collect() }
    }
}

/// splitmix64 over a sequence of words.
fn mix(seed: u64, words: &[u64]) -> u64 {
    let mut x = seed;
    for w in words.iter().chain([&0x5eed]) {
        x = x.wrapping_add(*w).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SyncMode {
    /// Gather with Early Close.
    LossTolerant,
    /// Same protocol, every packet critical and no Early Close.
    ReliableBaseline,
}

impl SyncMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SyncMode::LossTolerant => "loss_tolerant",
            SyncMode::ReliableBaseline => "reliable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Gather,
    Broadcast,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Gather => "gather",
            Direction::Broadcast => "broadcast",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncPlan {
    pub n_workers: usize,
    /// Gradient bytes per worker; a multiple of 4.
    pub model_bytes: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub profile: NetworkProfile,
    pub pct_threshold: f64,
    pub mode: SyncMode,
    /// Bytes at the head and tail of each gradient buffer that must arrive.
    pub critical_bytes: usize,
    pub sender: SenderConfig,
    /// Seeds the senders' RQ positions.
    pub seed: u64,
    pub stop_spacing: Duration,
    /// Virtual-time bound on one gather or broadcast round.
    pub round_timeout: Duration,
    /// Record every send admission and loss declaration.
    pub log_packets: bool,
}

impl Default for SyncPlan {
    fn default() -> Self {
        SyncPlan {
            n_workers: 8,
            model_bytes: 8 << 20,
            epochs: 1,
            batches_per_epoch: 20,
            profile: NetworkProfile::Dcn,
            pct_threshold: DEFAULT_PCT_THRESHOLD,
            mode: SyncMode::LossTolerant,
            critical_bytes: DEFAULT_CRITICAL_BYTES,
            sender: SenderConfig::default(),
            seed: 0,
            stop_spacing: Duration::from_millis(1),
            round_timeout: Duration::from_secs(60),
            log_packets: false,
        }
    }
}

impl SyncPlan {
    pub fn elements(&self) -> usize {
        self.model_bytes / ELEMENT_SIZE
    }

    pub fn validate(&self) -> Result<(), SyncError> {
        let bad = |m: String| Err(SyncError::InvalidPlan(m));
        if self.n_workers == 0 || self.n_workers >= u16::MAX as usize {
            return bad(format!("n_workers = {} must be in 1..65535", self.n_workers));
        }
        if self.model_bytes == 0 || !self.model_bytes.is_multiple_of(ELEMENT_SIZE) {
            return bad(format!("model_bytes = {} must be a positive multiple of 4", self.model_bytes));
        }
        if self.model_bytes > u32::MAX as usize {
            return bad(format!("model_bytes = {} exceeds the 32-bit registration field", self.model_bytes));
        }
        if !(0.0..=1.0).contains(&self.pct_threshold) {
            return bad(format!("pct_threshold = {} outside [0, 1]", self.pct_threshold));
        }
        if self.epochs == 0 || self.batches_per_epoch == 0 {
            return bad("epochs and batches_per_epoch must be at least 1".into());
        }
        if self.round_timeout.is_zero() {
            return bad("round_timeout must be positive".into());
        }
        Ok(())
    }

    fn critical_ranges(&self, len: usize) -> Vec<Range<usize>> {
        match self.mode {
            SyncMode::ReliableBaseline => vec![0..len],
            SyncMode::LossTolerant => self.critical_layout().byte_ranges(len),
        }
    }

    fn critical_layout(&self) -> CriticalLayout {
        CriticalLayout::HeadTail { head: self.critical_bytes, tail: self.critical_bytes }
    }
}

/// Outcome of one flow within a round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundFlow {
    pub worker: usize,
    pub flow_id: u16,
    /// From round start to close at the receiver.
    pub fct: Duration,
    pub close: CloseRecord,
    pub missing_segments: Vec<u32>,
    pub seg_len: usize,
    /// Sender counters when the round finished.
    pub stats: SenderStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatherOutcome {
    pub aggregate: GradientBuffer,
    pub flows: Vec<RoundFlow>,
    pub elapsed: Duration,
    pub lt_thresholds: Vec<Duration>,
    pub deadline: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastOutcome {
    pub delivered: Vec<GradientBuffer>,
    pub flows: Vec<RoundFlow>,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub epoch: usize,
    pub batch: usize,
    pub direction: Direction,
    pub flow: RoundFlow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub gather_time: Duration,
    pub broadcast_time: Duration,
    /// Slowest gather flow plus slowest broadcast flow.
    pub bst: Duration,
    pub lt_thresholds: Vec<Duration>,
    pub deadline: Option<Duration>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub batches: Vec<BatchRecord>,
    pub flows: Vec<FlowRecord>,
    pub events: Vec<Event>,
    /// Last aggregate, as delivered to the workers.
    pub final_aggregate: GradientBuffer,
}

impl RunReport {
    pub fn mean_bst(&self) -> Option<Duration> {
        let n = self.batches.len() as u32;
        (n > 0).then(|| self.batches.iter().map(|b| b.bst).sum::<Duration>() / n)
    }

    pub fn close_records(&self) -> impl Iterator<Item = &CloseRecord> {
        self.flows.iter().map(|f| &f.flow.close)
    }
}

/// A parameter server and its workers on one cluster.
pub struct SyncSession<'c, C: Cluster + ?Sized> {
    cluster: &'c mut C,
    plan: SyncPlan,
    lt: LtThresholdState,
    lt_ready: bool,
    next_flow_id: u16,
    events: Vec<Event>,
}

impl<'c, C: Cluster + ?Sized> SyncSession<'c, C> {
    pub fn new(cluster: &'c mut C, plan: SyncPlan) -> Result<Self, SyncError> {
        plan.validate()?;
        let nodes = cluster.endpoints().len();
        if nodes != plan.n_workers + 1 {
            return Err(SyncError::InvalidPlan(format!(
                "cluster has {nodes} nodes, plan needs {} (server plus workers)",
                plan.n_workers + 1
            )));
        }
        let level = if plan.log_packets { LogLevel::Packets } else { LogLevel::Flows };
        let reliable = ReceiverConfig { stop_spacing: plan.stop_spacing, ..ReceiverConfig::reliable(ELEMENT_SIZE) };
        for ep in cluster.endpoints_mut() {
            ep.set_log_level(level);
            ep.set_default_policy(reliable.clone());
        }
        let fallback = (plan.sender.cc.initial_rtprop, plan.sender.cc.initial_btlbw_bps);
        let lt = LtThresholdState::new(plan.profile.deadline_slack(), plan.model_bytes as u64, fallback);
        Ok(SyncSession { cluster, plan, lt, lt_ready: false, next_flow_id: 0, events: Vec::new() })
    }

    pub fn plan(&self) -> &SyncPlan {
        &self.plan
    }

    pub fn lt_state(&self) -> &LtThresholdState {
        &self.lt
    }

    pub fn cluster(&mut self) -> &mut C {
        self.cluster
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    /// Re-initializes every link's LT threshold from the server's latest
    /// view of that worker's RTprop and BtlBw.
    pub fn begin_epoch(&mut self, epoch: usize) {
        self.lt.begin_epoch(epoch as u64);
        for w in 0..self.plan.n_workers {
            let (rt, bw) = self.cluster.endpoints()[PS.0 as usize].peer_estimates(worker_node(w));
            self.lt.init_link(w, rt, bw);
        }
        self.lt_ready = true;
    }

    fn flow_id(&mut self) -> u16 {
        let id = self.next_flow_id;
        self.next_flow_id = self.next_flow_id.wrapping_add(1);
        id
    }

    fn sender_config(&self, flow_id: u16, worker: usize) -> SenderConfig {
        SenderConfig { seed: mix(self.plan.seed, &[flow_id as u64, worker as u64]), ..self.plan.sender.clone() }
    }

    fn collect_events(&mut self) {
        for ep in self.cluster.endpoints_mut() {
            let evs = ep.take_events();
            if self.plan.log_packets || !evs.is_empty() {
                self.events.extend(evs);
            }
        }
    }

    /// Runs until every flow in `keys` is closed at its receiver.
    fn run_round(
        &mut self,
        direction: Direction,
        started: Timestamp,
        keys: &[(NodeId, FlowKey)],
        senders: &[(NodeId, FlowKey)],
    ) -> Result<(), SyncError> {
        let reg_wait = match (direction, self.plan.mode) {
            (Direction::Gather, SyncMode::LossTolerant) => (self.lt.deadline() * 10).min(self.plan.round_timeout),
            _ => self.plan.round_timeout,
        };
        let mut registered = |eps: &[Endpoint]| {
            senders.iter().all(|(node, key)| {
                let ep = &eps[node.0 as usize];
                ep.sender_finished(*key) || ep.sender(*key).is_some_and(|s| s.is_acked(PacketKey::Registration))
            })
        };
        let ok = self.cluster.run_until(started + reg_wait, &mut registered)?;
        if !ok {
            let eps = self.cluster.endpoints();
            let worker = senders
                .iter()
                .position(|(node, key)| {
                    let ep = &eps[node.0 as usize];
                    !ep.sender_finished(*key) && !ep.sender(*key).is_some_and(|s| s.is_acked(PacketKey::Registration))
                })
                .unwrap_or(0);
            self.collect_events();
            return Err(SyncError::WorkerUnreachable { worker, waited: reg_wait });
        }
        let closed = |eps: &[Endpoint], (node, key): &(NodeId, FlowKey)| {
            eps[node.0 as usize].receiver(*key).is_some_and(|r| r.is_closed())
        };
        let mut all_closed = |eps: &[Endpoint]| keys.iter().all(|k| closed(eps, k));
        let ok = self.cluster.run_until(started + self.plan.round_timeout, &mut all_closed)?;
        self.collect_events();
        if !ok {
            let eps = self.cluster.endpoints();
            let open = (0..keys.len()).filter(|&w| !closed(eps, &keys[w])).collect();
            return Err(SyncError::RoundTimeout { direction, timeout: self.plan.round_timeout, open });
        }
        Ok(())
    }

    /// Takes the closed flow's data and releases its storage.
    fn harvest(
        &mut self,
        started: Timestamp,
        worker: usize,
        (node, key): (NodeId, FlowKey),
        sender: (NodeId, FlowKey),
    ) -> Result<(RoundFlow, Vec<u8>), SyncError> {
        let eps = self.cluster.endpoints_mut();
        let stats = eps[sender.0 .0 as usize].sender_stats(sender.1).unwrap_or_default();
        let rx = eps[node.0 as usize].receiver_mut(key).expect("round checked the receiver exists");
        let close = rx.close_record().expect("round checked the flow closed").clone();
        let data = rx.reassemble()?;
        let flow = RoundFlow {
            worker,
            flow_id: key.1,
            fct: close.closed_at.saturating_since(started),
            missing_segments: rx.missing_segments(),
            seg_len: rx.seg_len(),
            close,
            stats,
        };
        rx.release_storage();
        Ok((flow, data))
    }

    fn retire(&mut self) {
        for ep in self.cluster.endpoints_mut() {
            ep.retire_closed();
        }
    }

    /// Every worker sends its gradients to the server; returns the mean with
    /// missing segments counted as zeros.
    pub fn gather_round(&mut self, workers: &[GradientBuffer]) -> Result<GatherOutcome, SyncError> {
        let n = self.plan.n_workers;
        let elements = self.plan.elements();
        if workers.len() != n || workers.iter().any(|b| b.len() != elements) {
            return Err(SyncError::ShapeMismatch { expected: n, elements });
        }
        if self.plan.mode == SyncMode::LossTolerant && !self.lt_ready {
            self.begin_epoch(0);
        }
        self.retire();
        let started = self.cluster.now();
        let deadline = (self.plan.mode == SyncMode::LossTolerant).then(|| self.lt.deadline());
        let mut lt_thresholds = Vec::with_capacity(n);
        let mut rx_keys = Vec::with_capacity(n);
        let mut tx_keys = Vec::with_capacity(n);
        for (w, buf) in workers.iter().enumerate() {
            let id = self.flow_id();
            let policy = match self.plan.mode {
                SyncMode::LossTolerant => {
                    let lt = self.lt.lt_threshold(w).unwrap_or_default();
                    lt_thresholds.push(lt);
                    ReceiverConfig {
                        element_size: ELEMENT_SIZE,
                        max_segment_bytes: self.plan.sender.max_segment_bytes,
                        pct_threshold: self.plan.pct_threshold,
                        lt_threshold: lt,
                        deadline,
                        critical: self.plan.critical_layout(),
                        stop_spacing: self.plan.stop_spacing,
                    }
                }
                SyncMode::ReliableBaseline => ReceiverConfig {
                    max_segment_bytes: self.plan.sender.max_segment_bytes,
                    stop_spacing: self.plan.stop_spacing,
                    ..ReceiverConfig::reliable(ELEMENT_SIZE)
                },
            };
            let bytes = buf.to_bytes();
            let critical = self.plan.critical_ranges(bytes.len());
            let cfg = self.sender_config(id, w);
            let eps = self.cluster.endpoints_mut();
            eps[PS.0 as usize].set_receive_policy(worker_node(w), policy);
            eps[worker_node(w).0 as usize].start_flow(started, PS, id, bytes, ELEMENT_SIZE, &critical, &cfg)?;
            rx_keys.push((PS, (worker_node(w), id)));
            tx_keys.push((worker_node(w), (PS, id)));
        }
        self.run_round(Direction::Gather, started, &rx_keys, &tx_keys)?;

        let mut flows = Vec::with_capacity(n);
        let mut received = Vec::with_capacity(n);
        for w in 0..n {
            let (flow, data) = self.harvest(started, w, rx_keys[w], tx_keys[w])?;
            if self.plan.mode == SyncMode::LossTolerant && flow.close.reason == CloseReason::AllReceived {
                self.lt.update(w, flow.close.elapsed);
            }
            received.push(GradientBuffer::from_bytes(&data)?);
            flows.push(flow);
        }
        let elapsed = flows.iter().map(|f| f.fct).max().unwrap_or_default();
        Ok(GatherOutcome { aggregate: aggregate(&received), flows, elapsed, lt_thresholds, deadline })
    }

    /// Sends `aggregate` to every worker on fully reliable flows.
    pub fn broadcast_round(&mut self, aggregate: &GradientBuffer) -> Result<BroadcastOutcome, SyncError> {
        let n = self.plan.n_workers;
        if aggregate.len() != self.plan.elements() {
            return Err(SyncError::ShapeMismatch { expected: 1, elements: self.plan.elements() });
        }
        self.retire();
        let started = self.cluster.now();
        let bytes = aggregate.to_bytes();
        let reliable = ReceiverConfig {
            max_segment_bytes: self.plan.sender.max_segment_bytes,
            stop_spacing: self.plan.stop_spacing,
            ..ReceiverConfig::reliable(ELEMENT_SIZE)
        };
        let mut rx_keys = Vec::with_capacity(n);
        let mut tx_keys = Vec::with_capacity(n);
        for w in 0..n {
            let id = self.flow_id();
            let cfg = self.sender_config(id, w);
            let eps = self.cluster.endpoints_mut();
            eps[worker_node(w).0 as usize].set_receive_policy(PS, reliable.clone());
            eps[PS.0 as usize].start_flow(started, worker_node(w), id, bytes.clone(), ELEMENT_SIZE, &[0..bytes.len()], &cfg)?;
            rx_keys.push((worker_node(w), (PS, id)));
            tx_keys.push((PS, (worker_node(w), id)));
        }
        self.run_round(Direction::Broadcast, started, &rx_keys, &tx_keys)?;

        let mut flows = Vec::with_capacity(n);
        let mut delivered = Vec::with_capacity(n);
        for w in 0..n {
            let (flow, data) = self.harvest(started, w, rx_keys[w], tx_keys[w])?;
            if data != bytes {
                return Err(SyncError::BroadcastMismatch(w));
            }
            delivered.push(GradientBuffer::from_bytes(&data)?);
            flows.push(flow);
        }
        let elapsed = flows.iter().map(|f| f.fct).max().unwrap_or_default();
        Ok(BroadcastOutcome { delivered, flows, elapsed })
    }

    /// Lets leftover traffic (stop repeats, critical retransmissions) finish.
    pub fn drain(&mut self) -> Result<bool, SyncError> {
        let horizon = self.cluster.now() + self.plan.round_timeout;
        let done = self.cluster.run_until(horizon, &mut |eps: &[Endpoint]| eps.iter().all(Endpoint::is_idle))?;
        self.collect_events();
        Ok(done)
    }
}

/// Runs every (epoch, batch) of `plan`: gather, then broadcast.
pub fn run_training_sim<C: Cluster + ?Sized>(
    cluster: &mut C,
    plan: &SyncPlan,
    workload: &mut dyn Workload,
) -> Result<RunReport, SyncError> {
    let mut session = SyncSession::new(cluster, plan.clone())?;
    let mut report = RunReport::default();
    let elements = plan.elements();
    for epoch in 0..plan.epochs {
        if plan.mode == SyncMode::LossTolerant {
            session.begin_epoch(epoch);
        }
        for batch in 0..plan.batches_per_epoch {
            let grads: Vec<GradientBuffer> =
                (0..plan.n_workers).map(|w| workload.gradients(epoch, batch, w, elements)).collect();
            let gather = session.gather_round(&grads)?;
            let broadcast = session.broadcast_round(&gather.aggregate)?;
            report.batches.push(BatchRecord {
                epoch,
                batch,
                gather_time: gather.elapsed,
                broadcast_time: broadcast.elapsed,
                bst: gather.elapsed + broadcast.elapsed,
                lt_thresholds: gather.lt_thresholds,
                deadline: gather.deadline,
            });
            for (direction, flows) in [(Direction::Gather, gather.flows), (Direction::Broadcast, broadcast.flows)] {
                report.flows.extend(flows.into_iter().map(|flow| FlowRecord { epoch, batch, direction, flow }));
            }
            report.final_aggregate = gather.aggregate;
        }
    }
    session.drain()?;
    report.events = session.take_events();
    Ok(report)
}
