//! Command-line behaviour: exit codes and messages.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_crossing");

fn table2() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/table2.scenario")
}

#[test]
fn malformed_alpha_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(table2()).unwrap().replace("alpha = 0.1", "alpha = 1.5");
    let path = dir.path().join("bad.scenario");
    std::fs::write(&path, text).unwrap();
    let out = Command::new(BIN).arg("simulate").arg(&path).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("controller.alpha"));
}

#[test]
fn uncontrolled_run_exits_with_safety_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN).arg("simulate").arg(table2()).arg("--uncontrolled").arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(dir.path().join("trajectory.csv").exists());
}

#[test]
fn report_recomputes_a_written_run() {
    let dir = tempfile::tempdir().unwrap();
    let st = Command::new(BIN).arg("simulate").arg(table2()).arg("--out").arg(dir.path()).output().unwrap();
    assert!(st.status.success());
    let out = Command::new(BIN).arg("report").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["ca_conflict_samples"], 0);
    assert!(v["settling_time_s"].as_f64().is_some());
}

#[test]
fn report_on_missing_directory_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN).arg("report").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn duplicate_vehicle_id_is_rejected() {
    let mut server = Command::new(BIN)
        .args(["serve", "--bind", "127.0.0.1:0", "--exit-when-idle", "--max-runtime-s", "30"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(server.stdout.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().unwrap().unwrap();
        if let Some(a) = line.strip_prefix("listening on ") {
            break a.trim().to_string();
        }
    };
    let agent = |d: &str| {
        Command::new(BIN)
            .arg("agent")
            .arg(table2())
            .args(["--id", "1", "--manager", &addr, "--duration-s", d])
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap()
    };
    let mut first = agent("3");
    std::thread::sleep(std::time::Duration::from_millis(500));
    let second = agent("1").wait_with_output().unwrap();
    assert_eq!(second.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&second.stderr).to_lowercase().contains("reject"));
    assert!(first.wait().unwrap().success());
    let _rest: Vec<_> = lines.collect();
    assert!(server.wait().unwrap().success());
}
