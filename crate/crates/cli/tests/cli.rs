use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn pcaplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcaplab")).args(args).output().expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn out_arg(dir: &tempfile::TempDir) -> String {
    dir.path().to_str().unwrap().to_string()
}

#[test]
fn golden_ball_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("ball.json");
    let out = pcaplab(&["run", cfg.to_str().unwrap(), "--out", &out_arg(&dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path());
    assert_eq!(r["scenario"], "ball");
    assert_eq!(r["verdict"], "PASS");
    let prov = &r["provenance"];
    assert_eq!(prov["config_sha"].as_str().unwrap().len(), 64);
    assert_eq!(prov["grid"]["cells"], 256);
    assert!(prov["tolerances"]["ball_capacity_rel"].is_number());
    assert!(dir.path().join("capacity.csv").exists());
}

#[test]
fn golden_unconverged_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("fail_unconverged.json");
    let out = pcaplab(&["run", cfg.to_str().unwrap(), "--out", &out_arg(&dir)]);
    assert_eq!(out.status.code(), Some(1));
    let r = report(dir.path());
    assert_eq!(r["verdict"], "FAIL");
    assert!(r["metrics"]["error"].as_str().unwrap().contains("did not converge"));
}

#[test]
fn golden_missing_p_is_a_usage_error() {
    let cfg = scenario("missing_p.json");
    let out = pcaplab(&["run", cfg.to_str().unwrap(), "--out", "/nonexistent/never-written"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing_p.json:5:1"), "{err}");
    assert!(err.contains("`p`"), "{err}");
}

#[test]
fn usage_errors_exit_3() {
    assert_eq!(pcaplab(&["run", "--no-such-flag"]).status.code(), Some(3));
    assert_eq!(pcaplab(&["frobnicate"]).status.code(), Some(3));
    assert_eq!(pcaplab(&["run", "--scenario", "nope"]).status.code(), Some(3));
    assert_eq!(pcaplab(&["solve", "--bodies", "blob", "--grid", "32"]).status.code(), Some(3));
    assert_eq!(pcaplab(&["solve", "--workers", "0"]).status.code(), Some(3));
    assert_eq!(pcaplab(&["run", "/nonexistent/config.json"]).status.code(), Some(3));
    assert_eq!(pcaplab(&["--help"]).status.code(), Some(0));
}

#[test]
fn semantic_config_error_points_at_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"n\": 2,\n  \"p\": 3.5\n}\n").unwrap();
    let out = pcaplab(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json:3:"), "{err}");
}

#[test]
fn bm_run_writes_deficit_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = pcaplab(&["run", "--scenario", "bm", "--bodies", "disk,square", "--grid", "128", "--out", &out_arg(&dir)]);
    let code = out.status.code().unwrap();
    assert!(code <= 2, "{}", String::from_utf8_lossy(&out.stderr));
    let mut rd = csv::Reader::from_path(dir.path().join("bm.csv")).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..5], ["lambda", "lhs", "rhs", "deficit", "homothety_residual"]);
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 5);
    let mid: f64 = rows[2][3].parse().unwrap();
    assert!(mid > 0.0);
}

#[test]
fn identical_config_and_seed_give_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |dir: &str, workers: &'static str| {
        vec![
            "concavity".to_string(),
            "--bodies".into(),
            "disk,square".into(),
            "--grid".into(),
            "64".into(),
            "--seed".into(),
            "11".into(),
            "--workers".into(),
            workers.into(),
            "--out".into(),
            dir.to_string(),
        ]
    };
    let run = |v: Vec<String>| {
        let refs: Vec<&str> = v.iter().map(String::as_str).collect();
        pcaplab(&refs)
    };
    let oa = run(args(&out_arg(&a), "1"));
    let ob = run(args(&out_arg(&b), "2"));
    assert_eq!(oa.status.code(), ob.status.code());
    for name in ["report.json", "concavity.csv", "alpha_profile.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn plots_are_written_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let out = pcaplab(&["levelsets", "--bodies", "square", "--grid", "64", "--plots", "--out", &out_arg(&dir)]);
    assert!(out.status.code().unwrap() <= 2);
    let svgs: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "svg"))
        .collect();
    assert!(!svgs.is_empty());
}
