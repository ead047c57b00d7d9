//! End-to-end runs of the binary on small instances.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{"schema": 1,
  "problem": {"n": 10, "rho": 0, "p": 0.01, "lambda_s": 0.5, "lambda_f": 100,
              "mu0": 0, "sigma0": 1, "mu1": 1, "sigma1": 1},
  "solver": {"grid_size": 11},
  "sim": {"replications": 500, "base_seed": 7},
  "sweep": {"q_values": [0.0, 0.1, 0.5, 1.0]},
  "calibration": {"tolerance": 0.05}}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sleepwake"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_small_grid_is_fast_and_complete() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let out = dir.path().join("out");
    let start = Instant::now();
    let o = run(&["solve", "--config", s(&cfg), "--out", s(&out)]);
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["J.csv", "policy.csv", "policy.json", "report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let j = fs::read_to_string(out.join("J.csv")).unwrap();
    assert!(j.starts_with("pi,J,action_kind,m_or_q\n"));
    assert_eq!(j.lines().count(), 12);
    assert!(j.lines().last().unwrap().starts_with("1.0,0.0,stop"));
    let report = json(&out.join("report.json"));
    assert!(report["final_sup_norm_delta"].as_f64().unwrap() < report["tolerance"].as_f64().unwrap());
    assert_eq!(report["strategy"], "control-m");
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["simulate", "--config", s(&cfg), "--out", s(out), "--trace"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["episodes.csv", "metrics.json", "trace.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let episodes = fs::read_to_string(a.join("episodes.csv")).unwrap();
    assert!(episodes.starts_with("seed,T,tau,delay,false_alarm,obs_cost\n"));
    assert_eq!(episodes.lines().count(), 501);

    let c = dir.path().join("c");
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(&c), "--seed", "8"]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("episodes.csv")).unwrap(), fs::read(c.join("episodes.csv")).unwrap());
}

#[test]
fn saved_policy_reproduces_fresh_solve() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let solved = dir.path().join("solved");
    assert!(run(&["solve", "--config", s(&cfg), "--out", s(&solved)]).status.success());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let policy = solved.join("policy.json");
    assert!(run(&["simulate", "--config", s(&cfg), "--out", s(&a), "--policy", s(&policy)])
        .status
        .success());
    assert!(run(&["simulate", "--config", s(&cfg), "--out", s(&b)]).status.success());
    assert_eq!(fs::read(a.join("episodes.csv")).unwrap(), fs::read(b.join("episodes.csv")).unwrap());
}

#[test]
fn extract_policy_round_trips_through_values() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["solve", "--config", s(&cfg), "--out", s(&a)]).status.success());
    let o = run(&[
        "extract-policy",
        "--config",
        s(&cfg),
        "--values",
        s(&a.join("J.csv")),
        "--out",
        s(&b),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("policy.csv")).unwrap(), fs::read(b.join("policy.csv")).unwrap());
}

#[test]
fn zero_false_alarm_cost_stops_at_once() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &SMALL.replace("\"lambda_f\": 100", "\"lambda_f\": 0"),
    );
    let out = dir.path().join("out");
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["metrics"]["prob_false_alarm"].as_f64().unwrap(), 1.0);
    assert_eq!(m["metrics"]["mean_delay"].as_f64().unwrap(), 0.0);
}

#[test]
fn bad_config_exits_one_and_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cases = [
        (SMALL.replace("\"grid_size\": 11", "\"grid_size\": 1"), "solver.grid_size"),
        (SMALL.replace("\"schema\": 1", "\"schema\": 9"), "schema"),
        (SMALL.replace("\"p\": 0.01", "\"p\": 2"), "p"),
        (SMALL.replace("\"n\": 10", "\"n\": 10, \"extra\": 1"), "extra"),
        (SMALL.replace("\"replications\": 500", "\"replications\": 0"), "sim.replications"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("c{i}.json"), text);
        let o = run(&["solve", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
        assert_eq!(o.status.code(), Some(1), "case {i}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(field), "case {i}: {err}");
    }
    let o = run(&["solve", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn policy_for_another_instance_is_refused() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let solved = dir.path().join("solved");
    assert!(run(&["solve", "--config", s(&cfg), "--out", s(&solved)]).status.success());
    let policy = solved.join("policy.json");
    for other in [
        SMALL.replace("\"n\": 10", "\"n\": 4"),
        SMALL.replace("\"lambda_s\": 0.5", "\"lambda_s\": 0.25"),
    ] {
        let cfg2 = write_config(dir.path(), "c2.json", &other);
        let o = run(&[
            "simulate",
            "--config",
            s(&cfg2),
            "--policy",
            s(&policy),
            "--out",
            s(&dir.path().join("o")),
        ]);
        assert_eq!(o.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&o.stderr).contains("mismatch"));
    }
}

#[test]
fn non_convergence_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &SMALL.replace("\"grid_size\": 11", "\"grid_size\": 11, \"max_iters\": 3"),
    );
    let o = run(&["solve", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_marks_a_single_argmin() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let out = dir.path().join("out");
    let o = run(&["sweep-q", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("q,J0,E_DD,P_FA,gamma,argmin"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r[5] == 1.0).count(), 1);
    let best = rows.iter().find(|r| r[5] == 1.0).unwrap()[1];
    assert!(rows.iter().all(|r| r[1] >= best));
    // Every sensor on costs lambda_s * n per slot and at least one slot.
    assert!(rows[3][1] >= 0.5 * 10.0);
}

#[test]
fn calibration_hits_the_target_rate() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let out = dir.path().join("out");
    let o = run(&[
        "calibrate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--target-alpha",
        "0.1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let c = json(&out.join("calibration.json"));
    let p_fa = c["prob_false_alarm"].as_f64().unwrap();
    assert!((p_fa - 0.1).abs() <= 0.05, "{p_fa}");
    assert!(c["lambda_f"].as_f64().unwrap() > 0.0);
}

#[test]
fn figures_writes_every_data_file() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let out = dir.path().join("out");
    let o = run(&["figures", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "control-m/J.csv",
        "control-q/policy.csv",
        "fixed-m-1/J.csv",
        "fixed-m-3/report.json",
        "differential-cost.csv",
        "sweep-lambda_s-0.5.csv",
        "sweep-lambda_s-0.csv",
        "trace-control-m.csv",
        "trace-fixed-m-3.csv",
        "trace-fixed-m-10.csv",
        "summary.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let d = fs::read_to_string(out.join("differential-cost.csv")).unwrap();
    assert!(d.starts_with("pi,d1,d2,"));
}
