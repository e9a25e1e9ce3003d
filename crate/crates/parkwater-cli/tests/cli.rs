//! End-to-end checks of the `parkwater` binary: exit codes, file outputs,
//! and byte-level reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_parkwater"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

#[test]
fn validate_accepts_shipped_instances() {
    let out = run(&[
        "validate",
        data("eip1.json").to_str().unwrap(),
        data("eip2.json").to_str().unwrap(),
        data("tiny.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 3);
}

#[test]
fn validate_rejects_malformed_file_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    fs::write(&path, "{ this is not json").unwrap();
    let out = run(&["validate", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(!stderr(&out).is_empty());
}

#[test]
fn validate_flags_negative_flow_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(data("tiny.json")).unwrap();
    let tampered = text.replacen("4.0", "-4.0", 1);
    assert_ne!(text, tampered, "fixture should contain the flow 4.0");
    let path = dir.path().join("negative.json");
    fs::write(&path, tampered).unwrap();
    let out = run(&["validate", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).lines().count() >= 1);
}

#[test]
fn solve_writes_all_outputs_and_reports_objective() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "solve",
        data("tiny.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("objective ")), "stdout: {text}");
    assert!(text.lines().any(|l| l.starts_with("gap_rel ")));
    assert!(text.lines().any(|l| l.starts_with("nodes ")));
    for name in ["solution.json", "report.txt", "summary.csv", "network_t1.dot"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let csv = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(csv.starts_with("model,freshwater_tph,wastewater_tph,removal_ratio,"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn solve_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = run(&[
            "solve",
            data("tiny.json").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    }
    for name in ["solution.json", "summary.csv", "report.txt", "network_t1.dot"] {
        let left = fs::read(a.join(name)).unwrap();
        let right = fs::read(b.join(name)).unwrap();
        assert_eq!(left, right, "{name} differs between identical runs");
    }
}

#[test]
fn solve_exits_3_on_infeasible_instance() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "solve",
        data("infeasible.json").to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
}

#[test]
fn report_round_trips_a_solve_and_rejects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let solved = run(&[
        "solve",
        data("tiny.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&solved), 0);
    let solution = out_dir.join("solution.json");

    let dots = dir.path().join("dots");
    let ok = run(&[
        "report",
        data("tiny.json").to_str().unwrap(),
        solution.to_str().unwrap(),
        "--out",
        dots.to_str().unwrap(),
    ]);
    assert_eq!(code(&ok), 0, "stderr: {}", stderr(&ok));
    assert!(stdout(&ok).contains("objective (cost):"));
    assert!(dots.join("network_t1.dot").exists());

    // Shift one routed flow by a tonne: the balances no longer close and the
    // report command must refuse the file.
    let text = fs::read_to_string(&solution).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let flow = &mut doc["periods"][0]["reuse"][0]["flow"];
    *flow = serde_json::json!(flow.as_f64().unwrap() + 1.0);
    let tampered = out_dir.join("tampered.json");
    fs::write(&tampered, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    let bad = run(&[
        "report",
        data("tiny.json").to_str().unwrap(),
        tampered.to_str().unwrap(),
    ]);
    assert_eq!(code(&bad), 5, "stderr: {}", stderr(&bad));
    assert!(stderr(&bad).contains("residual"));
}

#[test]
fn sweep_on_single_period_instance_matches_solve() {
    let dir = tempfile::tempdir().unwrap();
    let solve_dir = dir.path().join("solve");
    let sweep_dir = dir.path().join("sweep");
    let solved = run(&[
        "solve",
        data("tiny.json").to_str().unwrap(),
        "--out",
        solve_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&solved), 0);
    let swept = run(&[
        "sweep",
        data("tiny.json").to_str().unwrap(),
        "--out",
        sweep_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&swept), 0, "stderr: {}", stderr(&swept));
    let sweep_csv = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let solve_csv = fs::read_to_string(solve_dir.join("summary.csv")).unwrap();
    // Same numbers, one extra name suffix and status column.
    let sweep_row = sweep_csv.lines().nth(1).unwrap();
    let solve_row = solve_csv.lines().nth(1).unwrap();
    let sweep_fields: Vec<&str> = sweep_row.split(',').collect();
    let solve_fields: Vec<&str> = solve_row.split(',').collect();
    assert_eq!(sweep_fields[0], "tiny_r1");
    assert_eq!(&sweep_fields[1..8], &solve_fields[1..8]);
    assert_eq!(sweep_fields[8], "gap-reached");
}
