use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::{BenchError, MetricsReport};

/// Column order of `flows.csv`; matches the fields of [`crate::FlowRow`].
pub const FLOW_COLUMNS: &[&str] = &[
    "loss_rate",
    "mode",
    "epoch",
    "batch",
    "direction",
    "worker",
    "flow_id",
    "fct_ms",
    "close_reason",
    "received_fraction",
    "missing_segments",
    "transmissions",
    "retransmissions",
    "losses_declared",
    "lt_ms",
    "deadline_ms",
];

pub const BATCH_COLUMNS: &[&str] =
    &["loss_rate", "mode", "epoch", "batch", "gather_ms", "broadcast_ms", "bst_ms", "max_lt_ms", "deadline_ms"];

pub const SUMMARY_COLUMNS: &[&str] = &[
    "loss_rate",
    "mode",
    "batches",
    "mean_bst_ms",
    "p50_bst_ms",
    "p99_bst_ms",
    "max_bst_ms",
    "mean_gather_ms",
    "mean_broadcast_ms",
    "p50_gather_fct_ms",
    "p99_gather_fct_ms",
    "mean_received_fraction",
    "min_received_fraction",
    "all_received",
    "early_closed",
    "deadline_forced",
    "retransmissions",
    "throughput_gbps",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

/// Writes `flows`, `batches` and `summary` files into `dir`, creating it if
/// needed, and returns their paths.
pub fn export(report: &MetricsReport, format: Format, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    fs::create_dir_all(dir).map_err(|source| BenchError::Io { path: dir.to_owned(), source })?;
    let path = |stem: &str| dir.join(format!("{stem}.{}", format.extension()));
    let files = [path("flows"), path("batches"), path("summary")];
    write_rows(&files[0], format, FLOW_COLUMNS, &report.flow_rows())?;
    write_rows(&files[1], format, BATCH_COLUMNS, &report.batch_rows())?;
    write_rows(&files[2], format, SUMMARY_COLUMNS, &report.summary_rows())?;
    Ok(files.into())
}

fn write_rows<T: Serialize>(path: &Path, format: Format, columns: &[&str], rows: &[T]) -> Result<(), BenchError> {
    let io = |source| BenchError::Io { path: path.to_owned(), source };
    let file = File::create(path).map_err(io)?;
    match format {
        Format::Csv => {
            let csv_err = |source| BenchError::Csv { path: path.to_owned(), source };
            // The header is written by hand so an empty report still gets one.
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record(columns).map_err(csv_err)?;
            for row in rows {
                w.serialize(row).map_err(csv_err)?;
            }
            w.flush().map_err(io)
        }
        Format::Jsonl => {
            let mut w = BufWriter::new(file);
            for row in rows {
                serde_json::to_writer(&mut w, row)
                    .map_err(|source| BenchError::Json { path: path.to_owned(), source })?;
                w.write_all(b"\n").map_err(io)?;
            }
            w.flush().map_err(io)
        }
    }
}
