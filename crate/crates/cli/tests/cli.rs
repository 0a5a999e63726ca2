use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_synthforest"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Simulated panel with 48 pre and 12 post periods and an effect of 10.
fn fixture(dir: &Path) -> String {
    let out = run(&["simulate", "--output-dir", &path(dir, "sim"), "--seed", "5", "--pre", "48", "--post", "12"]);
    assert!(out.status.success());
    path(dir, "sim/panel.csv")
}

fn json(file: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(file).unwrap()).unwrap()
}

#[test]
fn simulate_is_deterministic_and_writes_truth() {
    let dir = TempDir::new().unwrap();
    let a = path(dir.path(), "a");
    let b = path(dir.path(), "b");
    for out in [&a, &b] {
        assert!(run(&["simulate", "--output-dir", out, "--seed", "9", "--tau", "0"]).status.success());
    }
    for f in ["panel.csv", "truth.csv"] {
        assert_eq!(fs::read(Path::new(&a).join(f)).unwrap(), fs::read(Path::new(&b).join(f)).unwrap());
    }
    let truth = fs::read_to_string(Path::new(&a).join("truth.csv")).unwrap();
    assert!(truth.starts_with("week_start,f,y0,tau,observed\n"));
    assert!(truth.lines().skip(1).all(|l| l.split(',').nth(3) == Some("0")));
    assert_eq!(json(Path::new(&a).join("config_echo.json"))["command"], "simulate");
}

#[test]
fn fit_reports_effect_and_replays_from_echo() {
    let dir = TempDir::new().unwrap();
    let panel = fixture(dir.path());
    let first = path(dir.path(), "fit");
    let out = run(&[
        "fit", "--panel", &panel, "--t0", "48", "--n-trees", "60", "--n-boot", "500", "--output-dir", &first,
    ]);
    assert!(out.status.success());
    let report = json(Path::new(&first).join("report.json"));
    let ate = report["effect"]["ate_hat"].as_f64().unwrap();
    assert!((ate - 10.0).abs() < 2.0, "ate {ate}");
    assert_eq!(report["t0"], 48);
    let ci = &report["effect"]["bootstrap"];
    assert!(ci["ci_low"].as_f64().unwrap() <= ate && ate <= ci["ci_high"].as_f64().unwrap());
    let gaps = fs::read_to_string(Path::new(&first).join("gaps.csv")).unwrap();
    assert!(gaps.starts_with("week_start,observed,predicted,gap\n"));
    assert_eq!(gaps.lines().count(), 61);

    // Replaying the echo with a different thread cap gives identical bytes.
    let second = path(dir.path(), "replay");
    let echo = path(dir.path(), "fit/config_echo.json");
    let out = run(&["fit", "--config", &echo, "--output-dir", &second, "--threads", "1"]);
    assert!(out.status.success());
    for f in ["report.json", "gaps.csv", "model.json"] {
        assert_eq!(
            fs::read(Path::new(&first).join(f)).unwrap(),
            fs::read(Path::new(&second).join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn scm_weights_lie_on_the_simplex() {
    let dir = TempDir::new().unwrap();
    let panel = fixture(dir.path());
    let out_dir = path(dir.path(), "scm");
    let out = run(&["fit", "--estimator", "scm", "--panel", &panel, "--t0", "48", "--n-boot", "100", "--output-dir", &out_dir]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("weights:"));
    let weights = json(Path::new(&out_dir).join("report.json"))["model"]["weights"].clone();
    let w: Vec<f64> = weights.as_object().unwrap().values().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(w.len(), 4);
    assert!(w.iter().all(|&v| v >= 0.0));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-8);
}

#[test]
fn enet_tuning_logs_grid_and_choice() {
    let dir = TempDir::new().unwrap();
    let panel = fixture(dir.path());
    let out_dir = path(dir.path(), "enet");
    let out = run(&[
        "fit", "--estimator", "enet", "--tune", "--holdout", "0.1", "--panel", &panel, "--t0", "48", "--n-boot", "100",
        "--output-dir", &out_dir,
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("chosen lambda"));
    let tuning = &json(Path::new(&out_dir).join("report.json"))["tuning"];
    assert_eq!(tuning["scores"].as_array().unwrap().len(), 24);
    assert_eq!(tuning["split"]["kind"], "holdout");
}

#[test]
fn placebo_writes_per_unit_gaps_and_ranking() {
    let dir = TempDir::new().unwrap();
    let panel = fixture(dir.path());
    let out_dir = path(dir.path(), "placebo");
    let out = run(&["placebo", "--panel", &panel, "--t0", "48", "--n-trees", "40", "--output-dir", &out_dir]);
    assert!(out.status.success());
    let gap_files = fs::read_dir(Path::new(&out_dir).join("placebo")).unwrap().count();
    assert_eq!(gap_files, 5);
    let summary = fs::read_to_string(Path::new(&out_dir).join("placebo_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    let report = json(Path::new(&out_dir).join("placebo_report.json"));
    assert_eq!(report["report"]["exclusion_multiplier"], 2.0);
    assert_eq!(report["report"]["main_rank_gap"], 1);
}

#[test]
fn conformal_is_deterministic_and_runs_spec_test() {
    let dir = TempDir::new().unwrap();
    let panel = fixture(dir.path());
    let mut outputs = Vec::new();
    for name in ["c1", "c2"] {
        let out_dir = path(dir.path(), name);
        let out = run(&[
            "conformal", "--panel", &panel, "--t0", "48", "--n-trees", "30", "--scheme", "moving-block", "--null", "zero",
            "--spec-test", "--kappa-max", "3", "--n-samples", "200", "--output-dir", &out_dir,
        ]);
        assert!(out.status.success());
        outputs.push(fs::read(Path::new(&out_dir).join("conformal.json")).unwrap());
        let spec = fs::read_to_string(Path::new(&out_dir).join("spec_test.csv")).unwrap();
        assert!(spec.starts_with("kappa,p_iid,p_moving_block\n"));
        assert_eq!(spec.lines().count(), 4);
    }
    assert_eq!(outputs[0], outputs[1]);
    let result: serde_json::Value = serde_json::from_slice(&outputs[0]).unwrap();
    assert_eq!(result["n_permutations"], 60);
    assert_eq!(result["histogram"]["counts"].as_array().unwrap().len(), 50);
    assert!(result["p_value"].as_f64().unwrap() <= 0.05);
}

#[test]
fn compare_lists_three_estimators_and_placeholder() {
    let dir = TempDir::new().unwrap();
    let panel = fixture(dir.path());
    let out_dir = path(dir.path(), "cmp");
    let out = run(&["compare", "--panel", &panel, "--t0", "48", "--n-trees", "30", "--holdout", "0.1", "--output-dir", &out_dir]);
    assert!(out.status.success());
    let table = fs::read_to_string(Path::new(&out_dir).join("compare.csv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["forest", "scm", "enet", "matrix_completion"]);
    assert!(table.lines().last().unwrap().ends_with("not implemented"));
    let val = fs::read_to_string(Path::new(&out_dir).join("compare_validation.csv")).unwrap();
    assert_eq!(val.lines().count(), 5);
    // 10% of 48 rounds up to 5 validation periods.
    assert_eq!(json(Path::new(&out_dir).join("compare.json"))["validation"], serde_json::json!([43, 48]));
}

#[test]
fn ingest_merges_units_and_summarizes() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("events.csv");
    let mut csv = String::from("event_date,country,n\n");
    for day in 1..=15 {
        let date = format!("2016-01-{day:02}");
        csv.push_str(&format!("{date},Israel,1\n{date},Palestine,2\n{date},Jordan,{}\n", day % 3));
    }
    fs::write(&input, csv).unwrap();
    let out_dir = path(dir.path(), "ingest");
    let out = run(&[
        "ingest", "--input", &input.to_string_lossy(), "--date-col", "event_date", "--unit-col", "country",
        "--count-col", "n", "--start", "2016-01-01", "--merge", "Israel+Palestine=Israel-Palestine", "--summary",
        "--output-dir", &out_dir,
    ]);
    assert!(out.status.success());
    let panel = fs::read_to_string(Path::new(&out_dir).join("panel.csv")).unwrap();
    let mut lines = panel.lines();
    assert_eq!(lines.next(), Some("week_start,Israel-Palestine,Jordan"));
    assert_eq!(lines.next(), Some("2016-01-01,21,7"));
    assert_eq!(lines.next(), Some("2016-01-08,21,8"));
    assert_eq!(lines.next(), None, "the one-day trailing week is dropped");
    let summary = fs::read_to_string(Path::new(&out_dir).join("summary.csv")).unwrap();
    assert!(summary.contains("Israel-Palestine,21,0,21,21,21,21,21"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Israel-Palestine"));
}

#[test]
fn exit_codes_distinguish_usage_and_analysis_errors() {
    let dir = TempDir::new().unwrap();
    let out_dir = path(dir.path(), "x");
    let missing = run(&["ingest", "--input", &path(dir.path(), "missing.csv"), "--output-dir", &out_dir]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing.csv"));
    assert_eq!(run(&["fit", "--no-such-flag"]).status.code(), Some(2));

    let panel = fixture(dir.path());
    let bad_onset = run(&["fit", "--panel", &panel, "--t0", "500", "--output-dir", &out_dir]);
    assert_eq!(bad_onset.status.code(), Some(1));
    let bad_leaf = run(&["fit", "--panel", &panel, "--t0", "48", "--min-leaf", "0", "--output-dir", &out_dir]);
    assert_eq!(bad_leaf.status.code(), Some(1));
}
