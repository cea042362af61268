use std::path::Path;
use std::process::{Command, Output};

use ulysses_lab::costmodel::{CostReport, MemoryReport};
use ulysses_lab::simgroup::CommLedger;
use ulysses_lab::verify::VerifyReport;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ulysses-lab")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cost.cfg");
    std::fs::write(&cfg, "# cost grid\nn = 1024\nh = 512\np = 2,4\nconvention = exact\n").unwrap();
    let o = run(&["cost", "--config", cfg.to_str().unwrap(), "--p", "2,4,8,16", "--convention", "asymptotic", "--format", "csv"]);
    assert!(o.status.success());
    let report = CostReport::from_csv(stdout(&o).as_bytes()).unwrap();
    let ratios: Vec<f64> = report.rows.iter().filter(|r| r.scheme.name() == "megatron").filter_map(|r| r.ratio_vs_ulysses).collect();
    assert_eq!(ratios, vec![2.0, 4.0, 8.0, 16.0]);
}

#[test]
fn unknown_key_is_a_usage_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "n = 8\nwidth = 3\n").unwrap();
    let o = run(&["verify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`width`"));
    let o = run(&["memory", "--stage", "7"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`stage`"));
}

#[test]
fn verify_writes_reports_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ok");
    let o = run(&["verify", "--n", "8,16", "--p", "1,2,4", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let json = read(&out, "verify.json");
    let report = VerifyReport::from_json(&json).unwrap();
    assert!(report.all_pass && !report.cells.is_empty());
    assert_eq!(report.to_json().unwrap(), json);

    let victim = "ring/dense/attention/n8-b1-d8-h2-p2";
    let o = run(&["verify", "--n", "8", "--p", "1,2", "--perturb", victim]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains(&format!("FAIL {victim}")));
}

#[test]
fn trace_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["trace", "--scheme", "megatron", "--p", "4", "--layers", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    let csv = read(dir.path(), "ledger.csv");
    let json = read(dir.path(), "ledger.json");
    let records = CommLedger::records_from_csv(csv.as_bytes()).unwrap();
    assert_eq!(records.len(), 8);
    let ledger = CommLedger::from_records(4, records);
    assert_eq!(ledger.to_csv().unwrap(), csv);
    assert_eq!(CommLedger::from_records(4, CommLedger::records_from_json(&json).unwrap()).to_json().unwrap(), json);
    assert!(csv.starts_with("step_label,collective,aggregate_elements,per_rank_egress_elements\n"));
}

#[test]
fn memory_and_sweep_outputs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["memory", "--example", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let csv = read(dir.path(), "memory.csv");
    assert_eq!(MemoryReport::from_csv(csv.as_bytes()).unwrap().to_csv().unwrap(), csv);
    let json = read(dir.path(), "memory.json");
    assert_eq!(MemoryReport::from_json(&json).unwrap().to_json().unwrap(), json);

    let o = run(&["sweep", "--format", "json", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let json = stdout(&o);
    assert_eq!(CostReport::from_json(&json).unwrap().to_json().unwrap(), json);
    let csv = read(dir.path(), "sweep.csv");
    assert_eq!(CostReport::from_csv(csv.as_bytes()).unwrap().to_csv().unwrap(), csv);
}

#[test]
fn help_lists_subcommands() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for sub in ["verify", "cost", "trace", "memory", "sweep"] {
        assert!(text.contains(sub), "{sub}");
    }
}

#[test]
fn mode_and_seed_flags() {
    let a = run(&["verify", "--n", "8", "--p", "1,2", "--seed", "9", "--mode", "concurrent", "--format", "json"]);
    let b = run(&["verify", "--n", "8", "--p", "1,2", "--seed", "9", "--mode", "lockstep", "--format", "json"]);
    assert_eq!(a.stdout, b.stdout);
    let c = run(&["verify", "--n", "8", "--p", "1,2", "--seed", "10", "--format", "json"]);
    assert_ne!(a.stdout, c.stdout);
    let bad = run(&["verify", "--mode", "sometimes"]);
    assert_eq!(bad.status.code(), Some(2));
}
