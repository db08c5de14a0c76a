use std::path::{Path, PathBuf};

use cihj::cli::{run, EXIT_CAP, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK};
use serde_json::Value;

const FAMILY: &str = r#"{"h": 0, "T": 1, "n": 1, "m_past": 0, "m_fut": 2,
                         "slope_bound": 1, "velocity_alphabet": [-1, 0, 1], "start_values": [0]}"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{"schema": "cihj.experiment.v1", "family": {FAMILY},
            "schedule": [[1, 1], [0.5, 0.5], [0.25, 0.25]],
            "ci_check": {{"samples": 10, "exhibit_m_fut": [16, 32]}}{extra}}}"#
    );
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn cihj(command: &str, config: &Path, out: &Path, more: &[&str]) -> i32 {
    let mut args = vec!["cihj", command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(more);
    run(args)
}

fn summary(out: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn penalty_suite_passes_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    assert_eq!(cihj("penalty-suite", &cfg, &out, &["--threads", "2"]), EXIT_OK);
    let s = summary(&out);
    assert_eq!(s["schema"], "cihj.report.v1");
    assert_eq!(s["command"], "penalty-suite");
    assert_eq!(s["pass"], true);
    assert_eq!(s["checks"][0]["details"]["violations"], 0);
    assert_eq!(s["input_digests"]["config"].as_str().unwrap().len(), 64);
    let csv = std::fs::read_to_string(out.join("penalty_pairs.csv")).unwrap();
    // 9 paths at 3 nodes each, every ordered pair, plus the header
    assert_eq!(s["checks"][0]["details"]["family_size"], 9);
    assert_eq!(csv.lines().count(), 27 * 27 + 1);
}

#[test]
fn malformed_config_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ \"family\": ").unwrap();
    let out = dir.path().join("out");
    assert_eq!(cihj("all", &cfg, &out, &[]), EXIT_CONFIG);
    assert!(!out.exists());

    let cfg = write_config(dir.path(), r#", "schedule_typo": 1"#);
    assert_eq!(cihj("solve", &cfg, &out, &[]), EXIT_CONFIG);
    assert!(!out.exists());
    assert_eq!(run(["cihj", "solve"]), EXIT_CONFIG);
    assert_eq!(run(["cihj", "bogus"]), EXIT_CONFIG);
}

#[test]
fn unequal_terminal_data_is_a_boundary_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#", "compare": {"phi1": {"kind": "constant", "value": 1}, "phi2": {"kind": "value"}}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(cihj("compare", &cfg, &out, &[]), EXIT_CHECK_FAILED);
    let s = summary(&out);
    let v = &s["checks"][0]["details"]["boundary_violation"];
    assert!(v["gap"].as_f64().unwrap() > 0.0);
}

#[test]
fn equal_values_compare_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    assert_eq!(cihj("compare", &cfg, &out, &[]), EXIT_OK);
    let d = &summary(&out)["checks"][0]["details"];
    assert_eq!(d["verdict"], "comparison-holds");
    assert_eq!(d["b"], 0.0);
}

#[test]
fn table_round_trip_through_solve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    assert_eq!(cihj("solve", &cfg, &out, &[]), EXIT_OK);
    let table = out.join("value_table.csv");
    assert!(table.is_file());
    let extra = format!(
        r#", "compare": {{"phi1": {{"kind": "table", "path": "{}"}}, "phi2": {{"kind": "value"}}}}"#,
        table.display()
    );
    let cfg = write_config(dir.path(), &extra);
    let out2 = dir.path().join("out2");
    assert_eq!(cihj("compare", &cfg, &out2, &[]), EXIT_OK);
    assert!(summary(&out2)["input_digests"]["phi1"].is_string());
}

#[test]
fn cap_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    assert_eq!(cihj("penalty-suite", &cfg, &out, &["--cap", "4"]), EXIT_CAP);
}

#[test]
fn normalized_summaries_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("problem.json");
    std::fs::write(&problem, r#"{"n": 1, "controls": [-1, 1], "running_cost": "x(t)", "terminal": "x(t)"}"#).unwrap();
    let cfg = write_config(
        dir.path(),
        r#", "problem": "problem.json",
            "compare": {"phi1": {"kind": "value_perturbed", "t_idx": 1, "member": 0, "delta": 0.25}, "phi2": {"kind": "value"}}"#,
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ca = cihj("all", &cfg, &a, &["--normalize-timestamps"]);
    let cb = cihj("all", &cfg, &b, &["--normalize-timestamps", "--threads", "1"]);
    assert_eq!(ca, cb);
    let sa = std::fs::read(a.join("summary.json")).unwrap();
    assert_eq!(sa, std::fs::read(b.join("summary.json")).unwrap());
    let s: Value = serde_json::from_slice(&sa).unwrap();
    assert!(s["generated_unix"].is_null());
    assert!(s["checks"].as_array().unwrap().iter().all(|c| c["runtime_ms"].is_null()));
    for f in ["penalty_pairs.csv", "ci_check.csv", "value_table.csv", "compare_margins.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
