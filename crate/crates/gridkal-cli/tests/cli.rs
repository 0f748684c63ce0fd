//! End-to-end tests of the `gridkal` binary on a small two-boundary network.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gridkal")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn write_fixtures(dir: &Path) -> (PathBuf, PathBuf) {
    let network = serde_json::json!({
        "nodes": [
            {"id": "v1", "kind": "boundary"},
            {"id": "m", "kind": "interior"},
            {"id": "v2", "kind": "boundary"}
        ],
        "edges": [
            {"id": "e1", "from": "v1", "to": "m", "length": 1.0, "a": 0.1, "b": 1.0, "d": 100.0},
            {"id": "e2", "from": "m", "to": "v2", "length": 1.0, "a": 0.1, "b": 1.0, "d": 100.0}
        ]
    });
    let scenario = serde_json::json!({
        "time": {"T": 2.0, "steps": 40, "theta": 0.51},
        "mesh": {"elements_per_pipe": 4},
        "signals": [
            {
                "node": "v1",
                "u_D": [
                    {"kind": "linear", "t0": 0.0, "t1": 1.0, "v0": 2.0, "v1": 2.3},
                    {"kind": "constant", "t0": 1.0, "t1": 2.0, "value": 2.3}
                ],
                "ou": {"kappa": 3.0, "mu": 0.0, "sigma": 0.05}
            },
            {
                "node": "v2",
                "u_D": [{"kind": "constant", "t0": 0.0, "t1": 2.0, "value": 1.0}],
                "ou": {"kappa": 3.0, "mu": 0.0, "sigma": 0.0}
            }
        ],
        "measurement": {"nodes": ["v1", "v2"], "noise_percent": 0.01},
        "mor": {"method": "moment-matching", "order": 8},
        "filters": ["kf", "rkf"],
        "M": 10,
        "M_mc": 1,
        "seed": 7
    });
    let net_path = dir.join("net.json");
    let scn_path = dir.join("scn.json");
    std::fs::write(&net_path, serde_json::to_string_pretty(&network).unwrap()).unwrap();
    std::fs::write(&scn_path, serde_json::to_string_pretty(&scenario).unwrap()).unwrap();
    (net_path, scn_path)
}

#[test]
fn validate_ok_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let (net, _) = write_fixtures(dir.path());
    let out = run(&["validate", "--network", net.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 diagnostics"));

    let out = run(&["validate", "--network", "/nonexistent/net.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/net.json"));
}

#[test]
fn validate_flags_bad_network() {
    let dir = tempfile::tempdir().unwrap();
    let bad = serde_json::json!({
        "nodes": [
            {"id": "v1", "kind": "boundary"},
            {"id": "v2", "kind": "boundary"}
        ],
        "edges": [
            {"id": "e1", "from": "v1", "to": "v2", "length": 0.0, "a": 1.0, "b": 1.0, "d": 1.0}
        ]
    });
    let path = dir.path().join("bad.json");
    std::fs::write(&path, bad.to_string()).unwrap();
    let out = run(&["validate", "--network", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["benchmark", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn benchmark_writes_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let (net, scn) = write_fixtures(dir.path());
    let out_dir = dir.path().join("results");
    let out = run(&[
        "benchmark",
        "--network",
        net.to_str().unwrap(),
        "--scenario",
        scn.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--orders",
        "6,8",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for f in ["run.json", "report.json", "errors.csv", "mor_curve.csv"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out_dir.join("errors.csv")).unwrap();
    assert!(csv.starts_with("filter,error,offline_s,online_s,postproc_s\n"));
    assert_eq!(csv.lines().count(), 3); // header + kf + rkf
    let curve = std::fs::read_to_string(out_dir.join("mor_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("n,error"));
    assert_eq!(curve.lines().count(), 3);
}

#[test]
fn benchmark_deterministic_modulo_timing() {
    let dir = tempfile::tempdir().unwrap();
    let (net, scn) = write_fixtures(dir.path());
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "benchmark",
            "--network",
            net.to_str().unwrap(),
            "--scenario",
            scn.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        let mut v: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out_dir.join("report.json")).unwrap(),
        )
        .unwrap();
        for row in v["rows"].as_array_mut().unwrap() {
            row["offline_s"] = 0.into();
            row["online_s"] = 0.into();
            row["postproc_s"] = 0.into();
        }
        reports.push(v);
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn estimate_emits_trajectory_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (net, scn) = write_fixtures(dir.path());
    let out_dir = dir.path().join("est");
    let out = run(&[
        "estimate",
        "--network",
        net.to_str().unwrap(),
        "--scenario",
        scn.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--filter",
        "rkf",
        "--order",
        "8",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let est = std::fs::read_to_string(out_dir.join("estimate.csv")).unwrap();
    assert!(est.starts_with("t,dof_0,"));
    assert_eq!(est.lines().count(), 42); // header + K+1 states
    let rep: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(rep["rows"][0]["filter"], "rkf");
    assert_eq!(rep["rows"][0]["prolongation"], true);
}

#[test]
fn reduce_writes_basis_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (net, scn) = write_fixtures(dir.path());
    let out_dir = dir.path().join("basis");
    let out = run(&[
        "reduce",
        "--network",
        net.to_str().unwrap(),
        "--scenario",
        scn.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("basis.csv").exists());
    let side: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("basis.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(side["n"], 8);
    assert_eq!(side["system_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn simulate_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let (net, scn) = write_fixtures(dir.path());
    let out_dir = dir.path().join("sim");
    let out = run(&[
        "simulate",
        "--network",
        net.to_str().unwrap(),
        "--scenario",
        scn.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("run.json").exists());
    let traj = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 42);
}
