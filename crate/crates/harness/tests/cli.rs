use std::path::PathBuf;
use std::process::Command;

use gds_core::record::RunRecord;

fn gds() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gds"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn validate_shipped_scenarios() {
    for file in ["overvoltage.toml", "undervoltage.toml"] {
        let out = gds().args(["validate", "--config"]).arg(scenario(file)).output().unwrap();
        assert!(out.status.success(), "{file}: {}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.starts_with("ok kind="), "{text}");
    }
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "exchange_rate_hz = 5.0\n").unwrap();
    let out = gds().args(["validate", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid configuration"));
}

#[test]
fn run_writes_outputs_and_metrics_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.toml");
    std::fs::write(&cfg, "kind = \"undervoltage\"\nduration_s = 20.0\nseed = 9\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = gds()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--seed", "11"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let record = RunRecord::read(&out_dir.join("record.csv")).unwrap();
    assert_eq!(record.rows.len(), 40);
    assert_eq!(record.meta("seed"), Some("11"));
    assert_eq!(record.meta("kind"), Some("undervoltage"));
    let header = std::fs::read_to_string(out_dir.join("record.csv")).unwrap();
    assert!(header.contains("time_s,SIN/P_el_SIN,SIN/P_el_SIN.quality"));

    let config = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    let hash = config.lines().next().unwrap().strip_prefix("# config_hash=").unwrap();
    assert_eq!(record.meta("config_hash"), Some(hash));

    let recomputed = gds().arg("metrics").arg("--record").arg(out_dir.join("record.csv")).output().unwrap();
    assert!(recomputed.status.success());
    let written = std::fs::read_to_string(out_dir.join("metrics.txt")).unwrap();
    assert_eq!(String::from_utf8(recomputed.stdout).unwrap(), written);
}

#[test]
fn zero_duration_run_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("zero.toml");
    std::fs::write(&cfg, "duration_s = 0.0\n").unwrap();
    let out = gds().args(["run", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let record = RunRecord::read(&dir.path().join("record.csv")).unwrap();
    assert!(record.is_empty());
    assert!(std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap().contains("rows=0"));
}

#[test]
fn serve_rejects_unknown_namespace() {
    let out = gds().args(["serve", "--namespace", "XYZ"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn serve_reports_taken_port() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = gds().args(["serve", "--namespace", "RSE", "--port", &port]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("port in use"));
}
