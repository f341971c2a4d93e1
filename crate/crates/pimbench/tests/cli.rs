//! End-to-end tests of the `pimbench` binary: exit codes, export formats,
//! determinism, and the sweep/compare subcommands.

use std::path::Path;
use std::process::{Command, Output};

const GRAPH_CONF: &str = "\
config-version = 1
[experiment]
kind = coherence
[workload]
kind = graph
vertices = 256
edges = 2048
[cores]
cpu = 8
pim = 8
[run]
mechanism = lazypim
seed = 1
";

const IMPICA_CONF: &str = "\
config-version = 1
[experiment]
kind = impica-micro
[workload]
kind = list
nodes = 256
lookups = 64
[run]
seed = 3
";

fn pimbench(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pimbench"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_conf(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_emits_csv_with_fixed_header() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_conf(dir.path(), "g.conf", GRAPH_CONF);
    let out = pimbench(&["run", "--config", &conf], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("experiment,mechanism,seed,metric,value\n"));
    assert!(stdout.contains("coherence,lazypim,1,off-chip-bytes,"));
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_conf(dir.path(), "g.conf", GRAPH_CONF);
    let a = pimbench(&["run", "--config", &conf, "--seed", "9"], dir.path());
    let b = pimbench(&["run", "--config", &conf, "--seed", "9"], dir.path());
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn compare_adds_cpu_only_arm_and_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_conf(dir.path(), "g.conf", GRAPH_CONF);
    let out = pimbench(&["compare", "--config", &conf], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("coherence,cpu-only,1,off-chip-bytes-vs-cpu-only,1\n"));
    assert!(stdout.contains("coherence,lazypim,1,off-chip-bytes-vs-cpu-only,"));
}

#[test]
fn sweep_emits_one_report_per_seed_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_conf(dir.path(), "i.conf", IMPICA_CONF);
    let out = Command::new(env!("CARGO_BIN_EXE_pimbench"))
        .args([
            "sweep", "--seeds", "4", "--config", &conf, "--format", "json",
        ])
        .env("PIMBENCH_THREADS", "2")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let seeds: Vec<u64> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, vec![3, 4, 5, 6]);
}

#[test]
fn out_flag_writes_the_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_conf(dir.path(), "g.conf", GRAPH_CONF);
    let out_path = dir.path().join("report.csv");
    let out = pimbench(
        &[
            "run",
            "--config",
            &conf,
            "--out",
            out_path.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let body = std::fs::read_to_string(&out_path).unwrap();
    assert!(body.starts_with("experiment,mechanism,seed,metric,value\n"));
}

#[test]
fn trace_flag_writes_jsonl_next_to_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_conf(dir.path(), "g.conf", GRAPH_CONF);
    let out_path = dir.path().join("report.csv");
    let out = pimbench(
        &[
            "run",
            "--trace",
            "--config",
            &conf,
            "--out",
            out_path.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let trace = std::fs::read_to_string(dir.path().join("report.trace.jsonl")).unwrap();
    let first = trace.lines().next().unwrap();
    serde_json::from_str::<serde_json::Value>(first).unwrap();
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pimbench(&["run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_conf(
        dir.path(),
        "bad.conf",
        "config-version = 1\n[experiment]\nkind = coherence\nbogus = 1\n",
    );
    let out = pimbench(&["run", "--config", &conf], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn unreadable_config_path_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pimbench(&["run", "--config", "does-not-exist.conf"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unwritable_out_path_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_conf(dir.path(), "g.conf", GRAPH_CONF);
    let out = pimbench(
        &["run", "--config", &conf, "--out", "missing-dir/report.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}
