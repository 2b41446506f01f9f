use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ha-learn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .filter_map(|l| l.strip_prefix(key))
        .map(|v| v.trim().parse().unwrap())
        .next_back()
        .unwrap_or_else(|| panic!("no {key} in {report}"))
}

#[test]
fn lawnmower_chain_recovers_labels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "lawnmower", "--seed", "7"]);
    for f in ["trace.csv", "labels.csv", "truth.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    ok(d, &["learn", "--penalty", "bic"]);
    for f in ["segmentation.txt", "guards.txt", "automaton.json", "predicted.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let report = ok(d, &["eval"]);
    assert!(value(&report, "attribution_error") <= 0.05, "{report}");
}

#[test]
fn empty_trace_exits_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.csv"), "t,v\n").unwrap();
    let out = run(dir.path(), &["learn", "--trace", "empty.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trace too short"));
}

#[test]
fn missing_file_and_unknown_command_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["learn", "--trace", "nope.csv"]).status.code(), Some(2));
    assert!(!run(dir.path(), &["frobnicate"]).status.success());
    assert!(!run(dir.path(), &["gen", "submarine"]).status.success());
}

#[test]
fn invalid_thresholds_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "lawnmower"]);
    let out = run(d, &["learn", "--theta-universal", "0.3", "--theta-relevant", "0.6"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(d, &["learn", "--stride", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mario_exports_a_graph_and_simulates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "mario"]);
    assert!(d.join("script.csv").exists());
    ok(d, &["learn", "--derive", "vy=y", "--penalty", "mdl"]);
    let dot = ok(d, &["export", "--format", "graph"]);
    assert!(dot.starts_with("digraph"));
    let nodes = dot
        .lines()
        .filter(|l| l.trim_start().starts_with("\"m") && !l.contains("->"))
        .count();
    assert!(nodes >= 6, "{dot}");
    ok(d, &["export", "--format", "structured", "--out", "ha.txt"]);
    assert!(d.join("ha.txt").exists());

    let report = ok(d, &["simulate", "--derive", "vy=y", "--compare", "vy_true", "--emit-plot", "plot"]);
    assert!(value(&report, "mae") <= 1.0, "{report}");
    assert!(d.join("simulated.csv").exists());
    let observed = fs::read_to_string(d.join("plot/observed.csv")).unwrap();
    assert!(observed.starts_with("step,value\n"));
    assert!(d.join("plot/simulated.csv").exists());
}

#[test]
fn script_replays_to_the_same_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "mario", "--seed", "3", "--out", "a"]);
    ok(d, &["gen", "mario", "--script", "a/script.csv", "--out", "b"]);
    for f in ["trace.csv", "labels.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "random", "--seed", "5"]);
    ok(d, &["--threads", "1", "learn", "--out", "one"]);
    ok(d, &["--threads", "4", "learn", "--out", "four"]);
    for f in ["segmentation.txt", "guards.txt", "automaton.json", "predicted.csv"] {
        assert_eq!(fs::read(d.join("one").join(f)).unwrap(), fs::read(d.join("four").join(f)).unwrap(), "{f}");
    }
    let a = ok(d, &["--threads", "1", "eval", "--scenario", "random", "--trials", "3"]);
    let b = ok(d, &["--threads", "4", "eval", "--scenario", "random", "--trials", "3"]);
    assert_eq!(a, b);
}

#[test]
fn batch_eval_reports_each_trial() {
    let dir = tempfile::tempdir().unwrap();
    let report = ok(
        dir.path(),
        &["eval", "--scenario", "random", "--trials", "3", "--trim-extremes", "--out", "batch.txt"],
    );
    assert_eq!(report.lines().filter(|l| l.starts_with("trial ")).count(), 3);
    assert!(value(&report, "attribution_error") <= 0.08, "{report}");
    assert!(dir.path().join("batch.txt").exists());
}
