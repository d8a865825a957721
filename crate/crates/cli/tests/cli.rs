//! End-to-end runs of the `cfens` binary on a small seeded fixture.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cfens::report::Report;
use cfens_core::detect::{Detector, ZScoreDetector};
use cfens_core::Method;

fn cfens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfens"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cfens(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Univariate spike fixture with four injected events.
fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["synth", "--output", "spikes.csv", "--length", "1500", "--count", "4", "--amplitude", "3.5,4.5", "--seed", "3"],
    );
    let csv = dir.path().join("spikes.csv");
    assert!(dir.path().join("spikes.truth.json").exists());
    (dir, csv)
}

#[test]
fn explain_ice_returns_valid_members() {
    let (dir, _) = fixture();
    ok(dir.path(), &["explain", "--input", "spikes.csv", "--method", "ice", "--out", "ex"]);
    let report = Report::load(dir.path().join("ex/explain.json")).unwrap();
    assert_eq!(report.schema, "cfens.report/1");
    let run = report.run(Method::Ice).unwrap();
    let det = ZScoreDetector::default();
    let mut members = 0;
    for (a, r) in report.anomalies.iter().zip(&run.results) {
        assert!(r.trace.is_some(), "explain keeps loss traces");
        for m in &r.ensemble.members {
            let scores = det.score(a.window.context.view(), m.suspect.view()).unwrap();
            assert!(scores.iter().all(|&s| s < 0.5));
            members += 1;
        }
    }
    assert!(members >= 1);
}

#[test]
fn evaluate_writes_a_four_row_table_and_a_self_contained_report() {
    let (dir, _) = fixture();
    let stdout = ok(
        dir.path(),
        &["evaluate", "--input", "spikes.csv", "--methods", "dpe,ice,fs,naive", "--iterations", "400", "--N", "40", "--out", "ev"],
    );
    let table = std::fs::read_to_string(dir.path().join("ev/report.txt")).unwrap();
    assert_eq!(stdout, table);
    for m in ["dpe", "ice", "fs", "naive"] {
        assert_eq!(table.lines().filter(|l| l.starts_with(&format!("{m} "))).count(), 1, "{table}");
    }
    let report = Report::load(dir.path().join("ev/report.json")).unwrap();
    assert_eq!(report.runs.len(), 4);
    let starts: Vec<usize> = report.anomalies.iter().map(|a| a.window.origin.start).collect();
    for run in &report.runs {
        let run_starts: Vec<usize> = run.results.iter().map(|r| r.metrics.start).collect();
        assert_eq!(run_starts, starts, "every method sees the same windows");
    }
    let dev = report.max_metric_deviation().unwrap();
    assert!(dev <= 1e-9, "stored metrics deviate by {dev}");
    let svgs = std::fs::read_dir(dir.path().join("ev/svg")).unwrap().count();
    assert_eq!(svgs, 4 * report.anomalies.len());
}

#[test]
fn render_of_an_empty_ensemble_is_annotated() {
    let (dir, _) = fixture();
    ok(
        dir.path(),
        &["explain", "--input", "spikes.csv", "--method", "ice", "--iterations", "1", "--out", "ex"],
    );
    let report = Report::load(dir.path().join("ex/explain.json")).unwrap();
    assert!(report.runs[0].results[0].ensemble.is_empty());
    ok(dir.path(), &["render", "--report", "ex/explain.json", "--out", "empty.svg"]);
    let svg = std::fs::read_to_string(dir.path().join("empty.svg")).unwrap();
    assert!(svg.contains("no counterfactual found"));
    assert!(svg.contains(r#"class="original""#));
}

#[test]
fn dpe_maps_export_as_heat_maps() {
    let (dir, _) = fixture();
    ok(
        dir.path(),
        &["explain", "--input", "spikes.csv", "--method", "dpe", "--iterations", "300", "--N", "5", "--out", "ex"],
    );
    ok(
        dir.path(),
        &["render", "--report", "ex/explain.json", "--method", "dpe", "--heatmap", "0", "--out", "d.svg"],
    );
    assert!(dir.path().join("d-map.svg").exists());
}

#[test]
fn detect_writes_scores_and_labels() {
    let (dir, _) = fixture();
    ok(dir.path(), &["detect", "--input", "spikes.csv", "--out", "det"]);
    let text = std::fs::read_to_string(dir.path().join("det/detections.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("timestamp,score,predicted,label"));
    assert_eq!(lines.count(), 1500);
}

#[test]
fn tune_writes_leaderboard_and_best_config() {
    let (dir, _) = fixture();
    std::fs::write(
        dir.path().join("grid.json"),
        r#"{"grid": {"lambda_joint": [0.01, 0.1], "lambdaT": [0.01], "learning_rate": [0.1, 1.0]}}"#,
    )
    .unwrap();
    ok(
        dir.path(),
        &["tune", "--config", "grid.json", "--input", "spikes.csv", "--method", "ice", "--iterations", "200", "--out", "tu"],
    );
    let board = std::fs::read_to_string(dir.path().join("tu/tune-ice/leaderboard.csv")).unwrap();
    assert_eq!(board.lines().count(), 1 + 4);
    let best: cfens_core::HyperParams =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("tu/tune-ice/best.json")).unwrap()).unwrap();
    assert_eq!(best.iterations, 200);
}

#[test]
fn external_detector_matches_the_builtin_one() {
    let (dir, _) = fixture();
    let bin = env!("CARGO_BIN_EXE_cfens");
    let args = ["explain", "--input", "spikes.csv", "--method", "ice", "--iterations", "150", "--N", "3"];
    ok(dir.path(), &[&args[..], &["--out", "builtin"]].concat());
    ok(
        dir.path(),
        &[&args[..], &["--out", "ext", "--detector", "ext", "--ext-command", bin, "zscore-server"]].concat(),
    );
    let a = Report::load(dir.path().join("builtin/explain.json")).unwrap();
    let b = Report::load(dir.path().join("ext/explain.json")).unwrap();
    for (x, y) in a.runs[0].results.iter().zip(&b.runs[0].results) {
        assert_eq!(x.ensemble.len(), y.ensemble.len());
        for (p, q) in x.ensemble.members.iter().zip(&y.ensemble.members) {
            let dev = (&p.suspect - &q.suspect).mapv(f64::abs).fold(0.0_f64, |m, &v| m.max(v));
            assert!(dev < 1e-4, "finite-difference gradients drift by {dev}");
        }
    }
}

fn error_line(out: &Output) -> serde_json::Value {
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    serde_json::from_str(stderr.trim()).unwrap()
}

#[test]
fn failures_exit_1_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let e = error_line(&cfens(dir.path(), &["evaluate", "--input", "missing.csv"]));
    assert_eq!(e["error"], "InvalidParameter");
    let e = error_line(&cfens(dir.path(), &["evaluate", "--theta", "2"]));
    assert_eq!(e["error"], "InvalidParameter");
    let e = error_line(&cfens(dir.path(), &["evaluate", "--no-such-flag"]));
    assert_eq!(e["error"], "Usage");
    std::fs::write(dir.path().join("c.json"), r#"{"seeed": 1}"#).unwrap();
    let e = error_line(&cfens(dir.path(), &["evaluate", "--config", "c.json"]));
    assert_eq!(e["error"], "Json");
    std::fs::write(dir.path().join("bad.csv"), "timestamp,dim_0\n0,1.0\n1,abc\n").unwrap();
    let e = error_line(&cfens(dir.path(), &["detect", "--input", "bad.csv"]));
    assert_eq!(e["error"], "ParseError");
    assert!(cfens(dir.path(), &["--help"]).status.success());
}

#[test]
fn no_detections_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--output", "calm.csv", "--length", "800", "--count", "0"]);
    let e = error_line(&cfens(dir.path(), &["evaluate", "--input", "calm.csv"]));
    assert_eq!(e["error"], "NoAnomalies");
}
