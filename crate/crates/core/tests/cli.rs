use std::path::Path;
use std::process::{Command, Output};

fn ratchet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratchet"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn list_names_scenarios_and_configs() {
    let o = ratchet(&["list"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for name in [
        "walkthrough",
        "travel-stress-12",
        "governance-audit-8",
        "no-governance",
        "reflect-memory",
    ] {
        assert!(out.contains(name), "missing {name}");
    }
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w");
    let o = ratchet(&[
        "run",
        "--scenario",
        "walkthrough",
        "--seeds",
        "7,13",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("walkthrough"));
    for f in [
        "runs.jsonl",
        "summary.txt",
        "summary.csv",
        "curve.csv",
        "ledger-full-7.jsonl",
        "tasks-full-13.jsonl",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let runs = std::fs::read_to_string(out.join("runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 2);

    let table = ratchet(&["report", "--in", path(&out)]);
    assert!(table.status.success());
    assert_eq!(
        stdout(&table),
        std::fs::read_to_string(out.join("summary.txt")).unwrap()
    );
    let csv = ratchet(&["report", "--in", path(&out), "--format", "csv"]);
    assert_eq!(
        stdout(&csv),
        std::fs::read_to_string(out.join("summary.csv")).unwrap()
    );
    let jl = ratchet(&["report", "--in", path(&out), "--format", "jsonl"]);
    let lines: Vec<serde_json::Value> = stdout(&jl)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["seed"], 13);

    let missing = ratchet(&["report", "--in", path(&dir.path().join("nope"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn ablate_writes_one_row_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = ratchet(&[
        "ablate",
        "--scenario",
        "walkthrough",
        "--grid",
        "full,no-fdka",
        "--seeds",
        "7",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains(",no-fdka,"));
}

#[test]
fn bad_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    assert_eq!(
        ratchet(&["run", "--scenario", "atlantis", "--out", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        ratchet(&[
            "run",
            "--scenario",
            "walkthrough",
            "--config",
            "mystery",
            "--out",
            out
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(ratchet(&["tta-bound", "--p", "0"]).status.code(), Some(2));
}

#[test]
fn tta_bound_reports_holding_bound() {
    let o = ratchet(&["tta-bound", "--trials", "20000"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["bound"], 5);
    assert_eq!(v["holds"], true);
}

#[test]
fn audit_matches_expectations() {
    let o = ratchet(&["audit"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 8);
    assert!(!out.contains("MISMATCH"));
}

#[test]
fn review_queue_approve_and_deny() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("defer.json");
    std::fs::write(&cfg, r#"{"name":"defer","governance":{"human":"defer"}}"#).unwrap();
    let out = dir.path().join("r");
    let o = ratchet(&[
        "run",
        "--scenario",
        "governance-activation-6",
        "--config",
        path(&cfg),
        "--seeds",
        "7",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ledger = out.join("ledger-defer-7.jsonl");
    let review = |extra: &[&str]| {
        let mut args = vec![
            "review",
            "--ledger",
            path(&ledger),
            "--scenario",
            "governance-activation-6",
        ];
        args.extend_from_slice(extra);
        ratchet(&args)
    };

    let listed = stdout(&review(&["list"]));
    let keys: Vec<&str> = listed
        .lines()
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(keys.len(), 1, "{listed}");
    assert!(listed.contains("UPDATE_TOOL_SCHEMA"));

    let unknown = review(&["deny", "deadbeef", "--rationale", "no"]);
    assert_eq!(unknown.status.code(), Some(2));

    let ok = review(&["approve", keys[0]]);
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    assert!(stdout(&ok).contains("committed"));
    assert_eq!(stdout(&review(&["list"])).trim(), "review queue empty");
    assert_eq!(review(&["approve", keys[0]]).status.code(), Some(2));
    assert_eq!(
        review(&["deny", keys[0], "--rationale", "late"])
            .status
            .code(),
        Some(2)
    );
}
