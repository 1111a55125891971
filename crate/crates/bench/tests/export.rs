use std::fs;
use std::path::Path;
use std::process::Command;

use ltp::sync::SyncMode;
use ltp_bench::{
    export, run_experiment, BatchRow, ExperimentSpec, FileConfig, FlowRow, Format, MetricsReport, SummaryRow,
    BATCH_COLUMNS, FLOW_COLUMNS, SUMMARY_COLUMNS,
};
use serde::Serialize;

fn small_spec() -> ExperimentSpec {
    ExperimentSpec {
        n_workers: 8,
        model_bytes: 64 << 10,
        loss_grid: vec![0.01],
        batches: 2,
        seed: 5,
        ..ExperimentSpec::default()
    }
}

/// Header line that serde produces for a row type.
fn serde_header<T: Serialize>(row: &T) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(row).unwrap();
    let out = String::from_utf8(w.into_inner().unwrap()).unwrap();
    out.lines().next().unwrap().to_owned()
}

#[test]
fn column_constants_match_row_fields() {
    let report = run_experiment(&ExperimentSpec { batches: 1, modes: vec![SyncMode::LossTolerant], ..small_spec() })
        .unwrap();
    let flow: FlowRow = report.flow_rows().remove(0);
    let batch: BatchRow = report.batch_rows().remove(0);
    let summary: SummaryRow = report.summary_rows().remove(0);
    assert_eq!(serde_header(&flow), FLOW_COLUMNS.join(","));
    assert_eq!(serde_header(&batch), BATCH_COLUMNS.join(","));
    assert_eq!(serde_header(&summary), SUMMARY_COLUMNS.join(","));
}

#[test]
fn empty_report_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let files = export(&MetricsReport::default(), Format::Csv, dir.path()).unwrap();
    let expect = [FLOW_COLUMNS, BATCH_COLUMNS, SUMMARY_COLUMNS];
    for (path, cols) in files.iter().zip(expect) {
        assert_eq!(fs::read_to_string(path).unwrap(), format!("{}\n", cols.join(",")));
    }
    let files = export(&MetricsReport::default(), Format::Jsonl, dir.path()).unwrap();
    assert!(files.iter().all(|p| fs::read_to_string(p).unwrap().is_empty()));
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_owned).collect()
}

#[test]
fn two_batches_of_eight_workers_give_32_flow_rows_per_mode() {
    let spec = ExperimentSpec { modes: vec![SyncMode::ReliableBaseline], ..small_spec() };
    let dir = tempfile::tempdir().unwrap();
    export(&run_experiment(&spec).unwrap(), Format::Csv, dir.path()).unwrap();
    let flows = data_lines(&dir.path().join("flows.csv"));
    let count = |dir: &str| flows.iter().filter(|l| l.split(',').nth(4) == Some(dir)).count();
    assert_eq!((count("gather"), count("broadcast")), (16, 16));
    assert_eq!(data_lines(&dir.path().join("batches.csv")).len(), 2);
    assert_eq!(data_lines(&dir.path().join("summary.csv")).len(), 1);
}

#[test]
fn jsonl_mirrors_csv_rows() {
    let report = run_experiment(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export(&report, Format::Jsonl, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("flows.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), report.flow_rows().len());
    let keys: Vec<&str> = rows[0].as_object().unwrap().keys().map(String::as_str).collect();
    let mut cols = FLOW_COLUMNS.to_vec();
    cols.sort();
    let mut keys = keys;
    keys.sort();
    assert_eq!(keys, cols);
}

#[test]
fn same_seed_gives_identical_files() {
    let spec = small_spec();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    export(&run_experiment(&spec).unwrap(), Format::Csv, a.path()).unwrap();
    export(&run_experiment(&spec).unwrap(), Format::Csv, b.path()).unwrap();
    for f in ["flows.csv", "batches.csv", "summary.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_specs_name_the_field() {
    let cases: [(&str, ExperimentSpec); 5] = [
        ("workers", ExperimentSpec { n_workers: 0, ..small_spec() }),
        ("model-bytes", ExperimentSpec { model_bytes: 6, ..small_spec() }),
        ("loss", ExperimentSpec { loss_grid: vec![0.0, 1.5], ..small_spec() }),
        ("batches", ExperimentSpec { batches: 0, ..small_spec() }),
        ("pct-threshold", ExperimentSpec { pct_threshold: 0.0, ..small_spec() }),
    ];
    for (field, spec) in cases {
        match run_experiment(&spec) {
            Err(ltp_bench::BenchError::InvalidSpec { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{field}: {other:?}"),
        }
    }
}

#[test]
fn config_file_sets_fields() {
    let text = "workers = 3\nmodel-bytes = 4096\nloss = [0.0, 0.01]\nmode = \"reliable\"\nprofile = \"wan\"\nseed = 9\nformat = \"jsonl\"\n";
    let cfg = FileConfig::parse(text, Path::new("grid.toml")).unwrap();
    let mut spec = ExperimentSpec::default();
    cfg.apply(&mut spec);
    assert_eq!(spec.n_workers, 3);
    assert_eq!(spec.model_bytes, 4096);
    assert_eq!(spec.loss_grid, vec![0.0, 0.01]);
    assert_eq!(spec.modes, vec![SyncMode::ReliableBaseline]);
    assert_eq!(spec.profile, ltp::receiver::NetworkProfile::Wan);
    assert_eq!(spec.seed, 9);
    assert_eq!(cfg.format, Some(Format::Jsonl));

    let err = FileConfig::parse("wokers = 3\n", Path::new("grid.toml")).unwrap_err();
    assert!(err.to_string().contains("grid.toml"), "{err}");
}

#[test]
fn cli_writes_files_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.toml");
    fs::write(&cfg, "workers = 2\nmodel-bytes = 8192\nloss = 0.5\nbatches = 1\n").unwrap();
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_ltp-bench"))
        .args(["--config", cfg.to_str().unwrap(), "--loss", "0", "--mode", "loss-tolerant", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let flows = data_lines(&out.join("flows.csv"));
    assert_eq!(flows.len(), 4);
    assert!(flows.iter().all(|l| l.starts_with("0.0,loss_tolerant,")));

    let bad = Command::new(env!("CARGO_BIN_EXE_ltp-bench")).args(["--workers", "0"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("invalid workers"));
}
