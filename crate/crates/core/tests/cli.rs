use std::path::Path;
use std::process::{Command, Output};

fn scaleinv(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scaleinv"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

#[test]
fn solve_writes_solution_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let system = dir.path().join("system.csv");
    std::fs::write(&system, "phi_0,v\n2,1\n1,2\n").unwrap();
    let out = dir.path().join("out");
    let res = scaleinv(&["solve", system.to_str().unwrap(), "--max-iters", "50"], &out);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let solution = std::fs::read_to_string(out.join("solution.csv")).unwrap();
    let mut lines = solution.lines();
    assert_eq!(lines.next(), Some("method,w_0"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "scale_invariant");
    assert!((row[1].parse::<f64>().unwrap() - 1.25).abs() < 1e-12);
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 51);
}

#[test]
fn experiment_writes_tables_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let res = scaleinv(&["experiment", "outlier", "--reps", "50", "--seed", "3"], dir.path());
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
    for f in ["outlier_errors.csv", "summary.csv", "checks.csv", "config.json", "meta.json"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let table = std::fs::read_to_string(dir.path().join("outlier_errors.csv")).unwrap();
    assert_eq!(table.lines().count(), 21);
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(config["repetitions"], 50);
    assert_eq!(config["seed"], 3);
}

#[test]
fn failed_checks_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    // an unreachable tolerance makes the oracle comparison fail
    std::fs::write(&config, r#"{"experiment": "rl", "tolerance": 1e-12, "repetitions": 1}"#).unwrap();
    let res = scaleinv(&["experiment", "rl", "--config", config.to_str().unwrap()], dir.path());
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stdout));
    assert!(String::from_utf8_lossy(&res.stdout).contains("FAILED"));
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = scaleinv(&["solve", "does_not_exist.csv"], dir.path());
    assert_eq!(missing.status.code(), Some(1));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "phi_0,v\n0,1\n1,2\n").unwrap();
    let zero_row = scaleinv(&["solve", bad.to_str().unwrap()], dir.path());
    assert_eq!(zero_row.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&zero_row.stderr).contains("error"));

    let invalid = scaleinv(&["experiment", "outlier", "--reps", "0"], dir.path());
    assert_eq!(invalid.status.code(), Some(1));

    let usage = scaleinv(&["experiment", "nonsense"], dir.path());
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn config_file_must_match_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"experiment": "steps"}"#).unwrap();
    let res = scaleinv(&["experiment", "outlier", "--config", config.to_str().unwrap()], dir.path());
    assert_eq!(res.status.code(), Some(1));

    std::fs::write(&config, r#"{"no_such_field": 1}"#).unwrap();
    let res = scaleinv(&["experiment", "outlier", "--config", config.to_str().unwrap()], dir.path());
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn command_line_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"repetitions": 500, "m": 10}"#).unwrap();
    let res = scaleinv(&["experiment", "outlier", "--config", config.to_str().unwrap(), "--reps", "20"], dir.path());
    assert_eq!(res.status.code(), Some(0));
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["repetitions"], 20);
    assert_eq!(echoed["m"], 10);
}

#[test]
fn help_exits_cleanly() {
    let res = Command::new(env!("CARGO_BIN_EXE_scaleinv")).arg("--help").output().unwrap();
    assert_eq!(res.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&res.stdout).contains("experiment"));
}
