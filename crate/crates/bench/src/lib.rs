//! Experiment grids over the LTP simulator.
//!
//! An [`ExperimentSpec`] names a loss grid and a set of sync modes. For each
//! (loss rate, mode) pair [`run_experiment`] builds a fresh cluster and runs
//! the training loop; every mode at a given loss rate sees the same channel
//! seed, so mode comparisons are paired. The resulting [`MetricsReport`] can be
//! flattened into per-flow, per-batch and summary rows and written as CSV or
//! JSONL with [`export`].

mod config;
mod export;
mod report;

use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;

use ltp::channel::ChannelConfig;
use ltp::cluster::{ClusterError, SimCluster, UdpCluster};
use ltp::receiver::NetworkProfile;
use ltp::sync::{run_training_sim, NormalWorkload, RunReport, SyncError, SyncMode, SyncPlan};
use thiserror::Error;

pub use config::{FileConfig, ModeName, ProfileName};
pub use export::{export, Format, BATCH_COLUMNS, FLOW_COLUMNS, SUMMARY_COLUMNS};
pub use report::{BatchRow, FlowRow, SummaryRow};

pub const DEFAULT_LOSS_GRID: [f64; 5] = [0.0, 0.0001, 0.001, 0.005, 0.01];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: toml::de::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub n_workers: usize,
    /// Gradient bytes per worker.
    pub model_bytes: usize,
    pub loss_grid: Vec<f64>,
    pub batches: usize,
    pub epochs: usize,
    pub modes: Vec<SyncMode>,
    pub profile: NetworkProfile,
    pub pct_threshold: f64,
    pub seed: u64,
    /// Link model for simulated runs; `loss_rate` and `seed` are overridden per grid point.
    pub channel: ChannelConfig,
    /// Use loopback UDP sockets and the wall clock instead of the simulator.
    pub real_udp: bool,
    /// Keep per-packet send and loss events in each run's report.
    pub log_packets: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            n_workers: 8,
            model_bytes: 8 << 20,
            loss_grid: DEFAULT_LOSS_GRID.to_vec(),
            batches: 20,
            epochs: 1,
            modes: vec![SyncMode::LossTolerant, SyncMode::ReliableBaseline],
            profile: NetworkProfile::Dcn,
            pct_threshold: ltp::receiver::DEFAULT_PCT_THRESHOLD,
            seed: 0,
            channel: ChannelConfig::default(),
            real_udp: false,
            log_packets: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |field, reason: String| Err(BenchError::InvalidSpec { field, reason });
        if self.n_workers == 0 || self.n_workers >= u16::MAX as usize {
            return bad("workers", format!("{} is not in 1..65535", self.n_workers));
        }
        if self.model_bytes == 0 || !self.model_bytes.is_multiple_of(4) {
            return bad("model-bytes", format!("{} is not a positive multiple of 4", self.model_bytes));
        }
        if self.model_bytes > u32::MAX as usize {
            return bad("model-bytes", format!("{} does not fit in 32 bits", self.model_bytes));
        }
        if self.loss_grid.is_empty() {
            return bad("loss", "the grid is empty".into());
        }
        if let Some(p) = self.loss_grid.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return bad("loss", format!("{p} is not in [0, 1)"));
        }
        if self.batches == 0 {
            return bad("batches", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.modes.is_empty() {
            return bad("mode", "no modes selected".into());
        }
        if !(self.pct_threshold > 0.0 && self.pct_threshold <= 1.0) {
            return bad("pct-threshold", format!("{} is not in (0, 1]", self.pct_threshold));
        }
        Ok(())
    }

    pub fn plan(&self, mode: SyncMode) -> SyncPlan {
        SyncPlan {
            n_workers: self.n_workers,
            model_bytes: self.model_bytes,
            epochs: self.epochs,
            batches_per_epoch: self.batches,
            profile: self.profile,
            pct_threshold: self.pct_threshold,
            mode,
            seed: self.seed,
            log_packets: self.log_packets,
            ..SyncPlan::default()
        }
    }
}

/// One grid point.
#[derive(Debug, Clone)]
pub struct ModeRun {
    pub loss_rate: f64,
    pub mode: SyncMode,
    pub model_bytes: usize,
    pub n_workers: usize,
    pub report: RunReport,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    /// In grid order, modes inner.
    pub runs: Vec<ModeRun>,
}

impl MetricsReport {
    pub fn run(&self, loss_rate: f64, mode: SyncMode) -> Option<&ModeRun> {
        self.runs.iter().find(|r| r.loss_rate == loss_rate && r.mode == mode)
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<MetricsReport, BenchError> {
    spec.validate()?;
    let mut report = MetricsReport::default();
    for &loss_rate in &spec.loss_grid {
        for &mode in &spec.modes {
            let plan = spec.plan(mode);
            plan.validate()?;
            let mut workload = NormalWorkload::new(spec.seed);
            let nodes = spec.n_workers + 1;
            let run = if spec.real_udp {
                let bind = SocketAddr::from((Ipv4Addr::LOCALHOST, 0));
                let mut cluster = UdpCluster::bind(nodes, bind, loss_rate, spec.seed)?;
                run_training_sim(&mut cluster, &plan, &mut workload)?
            } else {
                let channel = ChannelConfig { loss_rate, seed: spec.seed, ..spec.channel.clone() };
                let mut cluster = SimCluster::new(nodes, channel)?;
                run_training_sim(&mut cluster, &plan, &mut workload)?
            };
            report.runs.push(ModeRun {
                loss_rate,
                mode,
                model_bytes: spec.model_bytes,
                n_workers: spec.n_workers,
                report: run,
            });
        }
    }
    Ok(report)
}
