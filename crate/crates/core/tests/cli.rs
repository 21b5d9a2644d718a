use std::process::Command;

fn semlink() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_semlink"));
    cmd.env_remove("RUST_BACKTRACE");
    cmd
}

#[test]
fn ingest_writes_splits() {
    let dir = tempfile::tempdir().unwrap();
    let status = semlink().args(["ingest", "--seed", "2", "--out"]).arg(dir.path()).status().unwrap();
    assert!(status.success());
    let train = std::fs::read_to_string(dir.path().join("train.txt")).unwrap();
    let test = std::fs::read_to_string(dir.path().join("test.txt")).unwrap();
    assert_eq!(train.lines().count(), 4 * test.lines().count());
    assert!(dir.path().join("vocab.txt").exists());
}

#[test]
fn descending_grid_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = semlink()
        .args(["sweep", "--snr-grid", "0,4,2", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ascending"));
}

#[test]
fn missing_checkpoint_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let status = semlink().args(["sweep", "--out"]).arg(dir.path()).status().unwrap();
    assert!(!status.success());
}

#[test]
fn missing_config_exits_nonzero() {
    let status = semlink().args(["train", "--config", "/nonexistent/run.toml"]).status().unwrap();
    assert!(!status.success());
}

#[test]
fn oracle_tests_pass() {
    let out = semlink().args(["oracle-tests", "--draws", "20000", "--seed", "5"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 8);
}
