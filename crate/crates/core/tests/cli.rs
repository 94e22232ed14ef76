use std::path::Path;
use std::process::{Command, Output};

use vvsl::experiments::{canned, CANNED};

fn vvsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vvsl")).args(args).output().unwrap()
}

fn out_dir(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn zero_v_is_a_config_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = canned("sg2-null").unwrap();
    cfg.v = 0;
    cfg.out = out.clone();
    let path = dir.path().join("v0.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let o = vvsl(&["dims", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn unknown_canned_name_lists_the_known_ones() {
    let o = vvsl(&["dims", "--canned", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for name in CANNED {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(vvsl(&["dims", "--seed", "x"]).status.code(), Some(2));
    assert_eq!(vvsl(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let o = vvsl(&["dims", "--canned", "sg2-null", "--seed", "4", "--out", out_dir(d)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = std::fs::read_to_string(a.join("dims.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(b.join("dims.csv")).unwrap());
    assert!(csv.starts_with("# config_hash=") && csv.lines().next().unwrap().ends_with("seed=4"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(a.join("report.txt").is_file());
}

#[test]
fn pressure_subcommand_reports_closed_form() {
    let o = vvsl(&["pressure", "--kind", "hausdorff", "--family", "sg2", "--V", "1", "--solve"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let root = v["root"].as_f64().unwrap();
    assert!((root - 3f64.ln() / 2f64.ln()).abs() < 1e-9, "{v}");
}

#[test]
fn graph_then_count_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("g");
    let o = vvsl(&["graph", "--family", "sg2", "--V", "1", "--depth", "2", "--out", out_dir(&stem)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    // level-2 SG(2): the Dirichlet spectrum has 12 eigenvalues
    let o = vvsl(&["count", "--graph", out_dir(&stem), "--bc", "dirichlet", "--lambda", "1e9"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    let last = text.lines().last().unwrap();
    assert!(last.ends_with(",12,12"), "{text}");
}
