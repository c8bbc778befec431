use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn latewalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latewalk")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn constants_for_d3() {
    let out = latewalk(&["constants", "--d", "3"]);
    assert!(out.status.success());
    let v = json(&out);
    assert!((v["p_d"].as_f64().unwrap() - 0.34).abs() < 0.01);
    for key in ["d", "G0", "p_d", "C_d", "alpha0", "alpha1", "method", "tolerances"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn exit_codes() {
    assert_eq!(latewalk(&["simulate"]).status.code(), Some(2));
    assert_eq!(latewalk(&["constants", "--d", "2"]).status.code(), Some(2));
    assert_eq!(latewalk(&["no-such-command"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "name = \"x\"\nstatistic = \"nope\"\n[geometry]\nn = 6\n").unwrap();
    let out = latewalk(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = latewalk(&["excursions", "--n", "8", "--r", "1", "--R", "2", "--replicas", "1", "--out", blocker.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_is_reproducible_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "name = \"u\"\nstatistic = \"uncovered\"\nreplicas = 6\nseed = 3\n[geometry]\nn = 8\n[params]\nalpha = 0.5\nt_star = 3000.0\ngamma = 0.5\n",
    )
    .unwrap();
    let mut csvs = Vec::new();
    for (jobs, sub) in [("1", "a"), ("3", "b")] {
        let out = dir.path().join(sub);
        let res = latewalk(&["simulate", "--config", cfg.to_str().unwrap(), "--jobs", jobs, "--out", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        csvs.push(fs::read(out.join("rows.csv")).unwrap());
        assert!(out.join("manifest.json").exists() && out.join("results.json").exists());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn distinguish_emits_exceedance() {
    let dir = tempfile::tempdir().unwrap();
    let out = latewalk(&[
        "distinguish", "--alpha", "0.4", "--n", "8", "--t-star", "4000", "--replicas", "5", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let d = &json(&out)["aggregates"]["distinguisher"];
    assert!(d["walk_exceed"].is_number() && d["reference_exceed"].is_number());
}

#[test]
fn report_on_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = latewalk(&["report", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(json(&out)["files"], 0);
    assert!(dir.path().join("summary.csv").exists());
}

#[test]
fn bundled_list_and_fixtures() {
    let out = latewalk(&["simulate", "--list"]);
    assert!(json(&out).as_array().unwrap().iter().any(|v| v == "uniformity-n24"));
    let dir = tempfile::tempdir().unwrap();
    let out = latewalk(&["oracle-fixtures", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let f: Value = serde_json::from_slice(&fs::read(dir.path().join("hitting-time-n4.json")).unwrap()).unwrap();
    assert!(f["residual"].as_f64().unwrap() < 1e-8);
    assert!(f["value"].as_f64().unwrap() > 64.0);
}
