use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ltp::sync::SyncMode;
use ltp_bench::{export, run_experiment, BenchError, ExperimentSpec, FileConfig, Format, ModeName, ProfileName};

/// Runs an incast gradient-sync grid over the simulated network and writes metrics.
#[derive(Debug, Parser)]
#[command(name = "ltp-bench", version)]
struct Args {
    /// Flat key = value file with the same keys as the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Gradient bytes per worker.
    #[arg(long)]
    model_bytes: Option<usize>,
    /// Loss rate of one grid point; repeat for a grid.
    #[arg(long)]
    loss: Vec<f64>,
    /// Batches per epoch.
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Repeat to run several modes; both by default.
    #[arg(long, value_enum)]
    mode: Vec<ModeName>,
    #[arg(long, value_enum)]
    profile: Option<ProfileName>,
    #[arg(long)]
    pct_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: results]
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: csv]
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Run over loopback UDP sockets in real time.
    #[arg(long)]
    real_udp: bool,
}

fn run(args: Args) -> Result<(), BenchError> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let mut spec = ExperimentSpec::default();
    file.apply(&mut spec);
    if let Some(v) = args.workers {
        spec.n_workers = v;
    }
    if let Some(v) = args.model_bytes {
        spec.model_bytes = v;
    }
    if !args.loss.is_empty() {
        spec.loss_grid = args.loss;
    }
    if let Some(v) = args.batches {
        spec.batches = v;
    }
    if let Some(v) = args.epochs {
        spec.epochs = v;
    }
    if !args.mode.is_empty() {
        spec.modes = args.mode.into_iter().map(SyncMode::from).collect();
    }
    if let Some(v) = args.profile {
        spec.profile = v.into();
    }
    if let Some(v) = args.pct_threshold {
        spec.pct_threshold = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    spec.real_udp |= args.real_udp;
    let out = args.out.or(file.out).unwrap_or_else(|| PathBuf::from("results"));
    let format = args.format.or(file.format).unwrap_or(Format::Csv);

    spec.validate()?;
    let report = run_experiment(&spec)?;
    for s in report.summary_rows() {
        eprintln!(
            "loss {:<7} {:<13} mean BST {:8.2} ms  p99 {:8.2} ms  early {:3}  forced {:3}",
            s.loss_rate, s.mode, s.mean_bst_ms, s.p99_bst_ms, s.early_closed, s.deadline_forced
        );
    }
    for path in export(&report, format, &out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ltp-bench: {e}");
            ExitCode::FAILURE
        }
    }
}
