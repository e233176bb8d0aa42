//! End-to-end CLI checks: exit-code contract and output files.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dcnsim"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dcnsim-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const CONFIG: &str = r#"{
  "suite": {"family": {"kind": "quadratic", "l1": 10.0, "mu": 1.0},
            "nodes": 4, "dim": 3, "heterogeneity": 0.5},
  "topology": {"kind": "static", "shape": {"shape": "ring"}},
  "algo": "dcn-sc",
  "eps": 1e-6,
  "seed": 7
}"#;

#[test]
fn run_writes_outputs_and_exits_zero() {
    let dir = tmp_dir("run");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.join("out");
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "run must exit 0 when the gap target is met");
    for f in ["trace.csv", "params.json", "suite.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    // compare over the single trace exits 0 and prints a summary.
    let cmp = bin().arg("compare").arg(out.join("trace.csv")).output().unwrap();
    assert!(cmp.status.success());
    assert!(String::from_utf8_lossy(&cmp.stdout).contains("final_gap"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tmp_dir("bad");
    let cfg = dir.join("bad.json");
    std::fs::write(&cfg, r#"{"mystery": 1}"#).unwrap();
    let status = bin().args(["run", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2), "schema errors must exit 2");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn check_subcommand_reports_ok() {
    let out = bin().args(["check", "--seed", "5"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("check cubic-stationarity: ok"));
    assert!(!text.contains("FAILED"));
}
