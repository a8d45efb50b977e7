use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn lmdp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmdp"))
        .current_dir(dir)
        .env("RUST_BACKTRACE", "0")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lmdp(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn c_star_from(stderr: &[u8]) -> String {
    let text = String::from_utf8_lossy(stderr);
    text.lines().find_map(|l| l.strip_prefix("c_star=")).expect("c_star reported").trim().to_string()
}

#[test]
fn full_pipeline_unconstrained() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen", "--seed", "1", "--out", "inst.json"]);
    let out = lmdp(d, &["sample", "--instance", "inst.json", "--n", "1500", "--seed", "2", "--out", "ds.csv"]);
    assert!(out.status.success());
    let c_star = c_star_from(&out.stderr);
    let csv = fs::read_to_string(d.join("ds.csv")).unwrap();
    assert!(csv.starts_with("k,s,a,s_next\n"));
    assert_eq!(csv.lines().count(), 1501);

    ok(
        d,
        &["solve", "--instance", "inst.json", "--dataset", "ds.csv", "--c-star", &c_star, "--t-iters", "400", "--out", "pol.json"],
    );
    let pol: Value = serde_json::from_str(&fs::read_to_string(d.join("pol.json")).unwrap()).unwrap();
    assert_eq!(pol["zs"].as_array().unwrap().len(), 400);
    assert!(pol["alpha"].as_f64().unwrap() > 0.0);

    let metrics: Value = serde_json::from_str(&ok(d, &["eval", "--instance", "inst.json", "--policy", "pol.json", "--oracle"])).unwrap();
    let returns = metrics["returns"].as_array().unwrap();
    assert_eq!(returns.len(), 1);
    let subopt = metrics["subopt"].as_f64().unwrap();
    let j0 = returns[0].as_f64().unwrap();
    assert!(subopt >= -1e-9);
    assert!((metrics["J0_star"].as_f64().unwrap() - j0 - subopt).abs() <= 1e-12);
}

#[test]
fn constrained_modes_report_violations() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen", "--seed", "1", "--constraints", "1", "--out", "inst.json"]);
    let out = lmdp(d, &["sample", "--instance", "inst.json", "--n", "1000", "--out", "ds.csv"]);
    let c_star = c_star_from(&out.stderr);
    for mode in ["constrained", "exact-feasibility"] {
        ok(
            d,
            &[
                "solve", "--instance", "inst.json", "--dataset", "ds.csv", "--c-star", &c_star, "--mode", mode,
                "--phi", "0.06", "--t-iters", "200", "--out", "pol.json",
            ],
        );
        let metrics: Value = serde_json::from_str(&ok(d, &["eval", "--instance", "inst.json", "--policy", "pol.json"])).unwrap();
        assert_eq!(metrics["returns"].as_array().unwrap().len(), 2);
        assert!(metrics["violations"][0].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn all_randomness_follows_the_seed() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen", "--seed", "4", "--out", "a.json"]);
    ok(d, &["gen", "--seed", "4", "--out", "b.json"]);
    assert_eq!(fs::read(d.join("a.json")).unwrap(), fs::read(d.join("b.json")).unwrap());
    for name in ["x.csv", "y.csv"] {
        ok(d, &["sample", "--instance", "a.json", "--n", "300", "--seed", "9", "--behavior", "uniform", "--out", name]);
    }
    assert_eq!(fs::read(d.join("x.csv")).unwrap(), fs::read(d.join("y.csv")).unwrap());
    let solve = |out: &str| {
        ok(d, &["solve", "--instance", "a.json", "--dataset", "x.csv", "--c-star", "3", "--t-iters", "50", "--seed", "9", "--out", out])
    };
    solve("p.json");
    solve("q.json");
    assert_eq!(fs::read(d.join("p.json")).unwrap(), fs::read(d.join("q.json")).unwrap());
}

fn without_wall_time(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn sweep_reports_are_stable_and_consistent() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("spec.json"),
        r#"{"instance": {"states": 6, "actions": 3, "dim": 5, "gamma": 0.9, "seed": 1},
            "n_grid": [100, 300], "solver": {"t_iters": 60}, "num_seeds": 3, "seed": 5}"#,
    )
    .unwrap();
    let first = ok(d, &["sweep", "--spec", "spec.json", "--format", "csv", "--out", "rows.csv"]);
    let second = ok(d, &["sweep", "--spec", "spec.json", "--format", "csv", "--sequential"]);
    assert_eq!(without_wall_time(&first), without_wall_time(&second));
    assert_eq!(first, fs::read_to_string(d.join("rows.csv")).unwrap());
    assert!(!d.join("rows.csv.partial").exists());

    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "n,seed,mode,J0_mix,J0_star,subopt,viol_max,c_star,T,wall_ms");
    assert_eq!(lines.len(), 1 + 2 * 3);
    let mut seeds = Vec::new();
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| f[i].parse::<f64>().unwrap();
        assert!((num(4) - num(3) - num(5)).abs() <= 1e-12);
        assert_eq!(num(6), 0.0);
        assert_eq!(f[8], "60");
        seeds.push(f[1].to_string());
    }
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), 6);

    let summary = ok(d, &["sweep", "--spec", "spec.json"]);
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "n,count,subopt_median,subopt_iqr,viol_median,viol_iqr");
    assert!(rows[1].starts_with("100,3,") && rows[2].starts_with("300,3,"));
}

#[test]
fn single_state_sweep_is_exact() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("spec.json"),
        r#"{"instance": {"states": 1, "actions": 1, "dim": 1, "gamma": 0.5, "seed": 0},
            "n_grid": [100], "solver": {"t_iters": 10}, "num_seeds": 1}"#,
    )
    .unwrap();
    let csv = ok(d, &["sweep", "--spec", "spec.json", "--format", "csv"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].split(',').nth(5).unwrap().parse::<f64>().unwrap().abs() <= 1e-12);
}

#[test]
fn usage_errors_fail_cleanly() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen", "--constraints", "1", "--out", "inst.json"]);
    ok(d, &["sample", "--instance", "inst.json", "--n", "50", "--out", "ds.csv"]);
    let out = lmdp(d, &["solve", "--instance", "inst.json", "--dataset", "ds.csv", "--c-star", "2", "--mode", "constrained"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--phi"));

    let out = lmdp(d, &["gen", "--constraints", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--tau"));

    let out = lmdp(d, &["solve", "--instance", "missing.json", "--dataset", "ds.csv", "--c-star", "2"]);
    assert!(!out.status.success());

    fs::write(d.join("bad.json"), r#"{"instance": {"states": 2, "actions": 2, "dim": 2, "gamma": 0.9, "seed": 0}, "n_grid": [10, 5], "num_seeds": 1}"#).unwrap();
    let out = lmdp(d, &["sweep", "--spec", "bad.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("increasing"));
}
