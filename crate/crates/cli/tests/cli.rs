use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_milestone-kit"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin().args(args).arg("-c").arg(config).arg("--out").arg(out).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dw1d() -> Value {
    json!({
        "model": { "name": "double_well_1d", "beta": 3.0 },
        "grid": { "nodes": [801, 1] },
        "a": { "kind": "half_space", "normal": [1, 0], "offset": -1.0 },
        "b": { "kind": "half_space", "normal": [-1, 0], "offset": -1.0 },
        "milestones": { "kind": "committor", "levels": [0.9, 0.5, 0.1] },
        "sampling": { "mode": "cells", "per_cell_transitions": 300 },
        "methods": ["optimal", "oracle"],
        "seed": 11
    })
}

fn dw2d() -> Value {
    json!({
        "model": { "name": "double_well_2d", "beta": 1.0 },
        "grid": { "nodes": [101, 101] },
        "a": { "kind": "ball", "center": [-1, 0], "radius": 0.2 },
        "b": { "kind": "ball", "center": [1, 0], "radius": 0.2 },
        "milestones": { "kind": "committor", "levels": [0.8, 0.65, 0.5, 0.35, 0.2] },
        "sampling": { "mode": "cells", "per_cell_transitions": 600 },
        "seed": 3
    })
}

#[test]
fn committor_writes_fields_and_normalizations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dw2d.json", &dw2d());
    let out = dir.path().join("out");
    let o = run(&["committor"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("q_minus.bin").exists());
    let z = std::fs::read_to_string(out.join("Z.csv")).unwrap();
    assert_eq!(z.lines().count(), 6);
    for i in 0..5 {
        assert!(out.join(format!("rho_{i}.csv")).exists());
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("committor_report.json")).unwrap()).unwrap();
    assert!(report["relative_spread"].as_f64().unwrap() < 0.02);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.json");
    let o = run(&["committor"], &missing, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere.json"));
}

#[test]
fn missing_seed_and_bad_schema_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = dw1d();
    v.as_object_mut().unwrap().remove("seed");
    let cfg = write_config(dir.path(), "noseed.json", &v);
    let o = run(&["sample"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed"));
    let cfg = write_config(dir.path(), "typo.json", &json!({ "model": { "name": "ou_1d" }, "sed": 1 }));
    assert_eq!(run(&["sample"], &cfg, &dir.path().join("out")).status.code(), Some(1));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
}

#[test]
fn irregular_level_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    // A deep double well has an almost flat committor inside the wells.
    let v = json!({
        "model": { "name": "double_well_1d", "beta": 25.0 },
        "a": { "kind": "half_space", "normal": [1, 0], "offset": -1.1 },
        "b": { "kind": "half_space", "normal": [-1, 0], "offset": -1.1 },
        "milestones": { "kind": "committor", "levels": [0.999999999995, 0.5] },
        "seed": 1
    });
    let cfg = write_config(dir.path(), "flat.json", &v);
    let o = run(&["committor"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("irregular level 0.999999999995"), "{}", stderr(&o));
}

#[test]
fn sample_writes_stats_and_hits() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = dw2d();
    v["kernel"] = json!({ "bins": 4, "samples_per_bin": 20, "start": "bin_centers" });
    let cfg = write_config(dir.path(), "dw2d.json", &v);
    let out = dir.path().join("out");
    let o = run(&["sample"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats: Value = serde_json::from_str(&std::fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    let deps = stats["stats"]["departures"].as_array().unwrap();
    assert_eq!(deps.len(), 5);
    assert!(deps.iter().all(|d| d.as_u64().unwrap() == 600));
    for i in 0..5 {
        assert!(out.join(format!("hits_{i}.csv")).exists());
        assert!(out.join(format!("histogram_{i}.csv")).exists());
        assert!(out.join(format!("kernel_{i}.csv")).exists());
    }
}

#[test]
fn undersampling_fails_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = dw1d();
    v["sampling"] = json!({ "mode": "long", "total_time": 20.0, "min_departures": 100 });
    let cfg = write_config(dir.path(), "short.json", &v);
    let o = run(&["sample"], &cfg, &dir.path().join("a"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("under-sampled"));
    let o = bin()
        .args(["sample", "--force", "-c"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("b"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));

    v["sampling"] = json!({ "mode": "long" });
    let cfg = write_config(dir.path(), "no_time.json", &v);
    assert_eq!(run(&["sample"], &cfg, &dir.path().join("c")).status.code(), Some(1));
}

#[test]
fn mfpt_report_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dw1d.json", &dw1d());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = bin().args(["mfpt", "--workers", "1", "-c"]).arg(&cfg).arg("--out").arg(&a).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = bin().args(["mfpt", "--workers", "3", "-c"]).arg(&cfg).arg("--out").arg(&b).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let ra = std::fs::read(a.join("mfpt_report.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("mfpt_report.json")).unwrap());
    let report: Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
    let opt = report["methods"]["optimal"]["value"].as_f64().unwrap();
    let oracle = report["methods"]["oracle"]["value"].as_f64().unwrap();
    assert!((opt - oracle).abs() / oracle < 0.2, "optimal {opt} vs oracle {oracle}");
    assert_eq!(report["z_scores"].as_array().unwrap().len(), 1);

    let o = bin().args(["mfpt", "--seed", "12", "-c"]).arg(&cfg).arg("--out").arg(dir.path().join("c")).output().unwrap();
    assert!(o.status.success());
    let rc: Value = serde_json::from_slice(&std::fs::read(dir.path().join("c/mfpt_report.json")).unwrap()).unwrap();
    assert_ne!(rc["config_hash"], report["config_hash"]);
}

#[test]
fn mfpt_methods_without_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = dw1d();
    v["methods"] = json!(["exact"]);
    let cfg = write_config(dir.path(), "exact.json", &v);
    let o = run(&["mfpt"], &cfg, &dir.path().join("a"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kernel"));

    let mut v = dw2d();
    v["methods"] = json!(["oracle"]);
    let cfg = write_config(dir.path(), "oracle.json", &v);
    let o = run(&["mfpt"], &cfg, &dir.path().join("b"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("oracle"));
}

#[test]
fn exact_writes_kernel_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = dw1d();
    v["kernel"] = json!({ "bins": 1, "samples_per_bin": 200, "start": "bin_centers" });
    let cfg = write_config(dir.path(), "dw1d.json", &v);
    let out = dir.path().join("out");
    let o = run(&["exact"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..3 {
        assert!(out.join(format!("kernel_{i}.csv")).exists());
    }
    assert!(out.join("exact_field.csv").exists());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("exact_report.json")).unwrap()).unwrap();
    assert!(report["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn validate_exit_codes_follow_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let pass = json!({
        "model": { "name": "ou_1d" },
        "validation": { "budget": { "transitions": 20000 }, "criteria": ["A10"] },
        "seed": 1
    });
    let cfg = write_config(dir.path(), "pass.json", &pass);
    let o = run(&["validate"], &cfg, &dir.path().join("a"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("A10 PASS"));

    // Far too coarse a grid for the normalizations to agree.
    let fail = json!({
        "model": { "name": "ou_1d" },
        "validation": { "budget": { "grid_nodes": 15, "fine_grid_nodes": 21 }, "criteria": ["A2"] },
        "seed": 1
    });
    let cfg = write_config(dir.path(), "fail.json", &fail);
    let o = run(&["validate"], &cfg, &dir.path().join("b"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("A2"));

    let unknown = json!({ "model": { "name": "ou_1d" }, "validation": { "criteria": ["A11"] }, "seed": 1 });
    let cfg = write_config(dir.path(), "unknown.json", &unknown);
    assert_eq!(run(&["validate"], &cfg, &dir.path().join("c")).status.code(), Some(1));
}
