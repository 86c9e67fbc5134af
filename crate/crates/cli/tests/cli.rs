//! End-to-end checks of the `qkdnet` binary: output and exit codes.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cfg(rel: &str) -> String {
    root().join("configs").join(rel).display().to_string()
}

fn qkdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdnet"))
        .args(args)
        .env_remove("RUST_LOG")
        .env_remove("QKDNET_HTTP_ADDR")
        .env_remove("QKDNET_SESSION_ADDR")
        .env_remove("QKDNET_SERVER")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_reports_channel_counts() {
    let o = qkdnet(&["validate", &cfg("madqci.toml")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("45 feasible channels"), "{out}");
    assert!(out.contains("border nodes: Norte, Quevedo"), "{out}");

    let o = qkdnet(&["validate", &cfg("pair.toml")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("1 feasible channels"));
}

#[test]
fn a_broken_network_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(cfg("pair.toml")).unwrap().replace("b = \"B\"", "b = \"Nowhere\"");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, text).unwrap();
    let o = qkdnet(&["validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Nowhere"), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());

    let o = qkdnet(&["validate", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(qkdnet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(qkdnet(&["validate"]).status.code(), Some(1));
    assert_eq!(qkdnet(&["switch", "sw-quijote", "tx-l3", "--config", &cfg("madqci.toml")]).status.code(), Some(1));
    let h = qkdnet(&["--help"]);
    assert_eq!(h.status.code(), Some(0));
    assert!(stdout(&h).contains("validate"));
}

#[test]
fn opot_experiment_writes_exports() {
    let dir = tempfile::tempdir().unwrap();
    let o = qkdnet(&["experiment", &cfg("experiments/opot.toml"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("experiment: opot-demo"));
    assert!(stdout(&o).to_lowercase().contains("ratio"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("opot-demo.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    assert!(dir.path().join("opot-demo.jsonl").exists());
}

#[test]
fn cloud_experiment_passes_its_audit() {
    let dir = tempfile::tempdir().unwrap();
    let o = qkdnet(&["experiment", &cfg("experiments/cloud.toml"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("unique-key audit: PASS"), "{}", stdout(&o));
}

#[test]
fn a_malformed_experiment_points_at_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    std::fs::write(&spec, "id = \"x\"\nseed = 1\n[workload]\nkind = \"opot\"\npackets = \"many\"\n").unwrap();
    let o = qkdnet(&["experiment", spec.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("workload") && err.contains("\"many\""), "{err}");
}

#[test]
fn scenario_runs_are_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let audit = dir.path().join(format!("{tag}.audit.jsonl"));
        let snap = dir.path().join(format!("{tag}.json"));
        let o = qkdnet(&[
            "run",
            "--config",
            &cfg("madqci.toml"),
            "--seed",
            "5",
            "--scenario",
            &cfg("scenarios/demo.toml"),
            "--audit",
            audit.to_str().unwrap(),
            "--snapshot",
            snap.to_str().unwrap(),
            "--no-serve",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (stdout(&o), std::fs::read(audit).unwrap(), std::fs::read(snap).unwrap())
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a.0.lines().count(), 7);
    assert!(a.0.lines().all(|l| l.contains("\"ok\":true")), "{}", a.0);
    assert!(!a.1.is_empty());
    assert!(a == b, "two runs with one seed diverged");
}

#[test]
fn live_mode_refuses_scenarios() {
    let o = qkdnet(&["run", "--config", &cfg("pair.toml"), "--mode", "live-clock", "--no-serve"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn an_occupied_port_exits_3() {
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = held.local_addr().unwrap().to_string();
    let o = qkdnet(&["run", "--config", &cfg("pair.toml"), "--http", &addr, "--session", "127.0.0.1:0"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(&addr), "{}", stderr(&o));
}

#[test]
fn embedded_route_crosses_the_border() {
    let o = qkdnet(&["route", "Quintin", "Distrito", "--config", &cfg("madqci.toml")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let text = v.to_string();
    assert!(text.contains("Quevedo") && text.contains("Norte"), "{text}");

    let o = qkdnet(&["route", "Quintin", "Atlantis", "--config", &cfg("madqci.toml")]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn embedded_switch_rejection_exits_3() {
    let ok = qkdnet(&["switch", "sw-quijote", "tx:l3", "rx:l2", "--config", &cfg("madqci.toml")]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("APPLIED"), "{}", stdout(&ok));

    let bad = qkdnet(&["switch", "sw-quijote", "tx:l3", "rx:l3", "--config", &cfg("madqci.toml")]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(stdout(&bad).contains("REJECTED"));
}

#[test]
fn client_commands_fail_cleanly_without_a_server() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let o = qkdnet(&["status", "--server", &format!("http://127.0.0.1:{port}")]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("cannot reach"));
}
