use std::fs;
use std::path::Path;
use std::process::Command;

use graphfog::{parse_cli, run, EXIT_OK, EXIT_USAGE};
use graphfog_core::experiment::{ExperimentId, ReportFormat};
use graphfog_core::SimTime;

fn invoke(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("graphfog").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn defaults_follow_the_experiment() {
    let inv = parse_cli(["graphfog", "exp1"]).unwrap();
    assert_eq!(inv.config.experiment, ExperimentId::Exp1);
    assert_eq!(inv.config.master_seed, 42);
    assert_eq!(inv.config.replications, 5);
    assert_eq!(
        inv.config.formats.iter().copied().collect::<Vec<_>>(),
        [ReportFormat::Csv, ReportFormat::Json]
    );
    assert!(!inv.dry_run);

    let inv = parse_cli([
        "graphfog",
        "exp3",
        "--reps",
        "3",
        "--horizon",
        "1500.5",
        "--format",
        "json",
        "--seed",
        "7",
    ])
    .unwrap();
    assert_eq!(inv.config.replications, 3);
    assert_eq!(inv.config.master_seed, 7);
    assert_eq!(inv.config.horizon, Some(SimTime::from_nanos(1_500_500_000)));
    assert_eq!(
        inv.config.formats.iter().copied().collect::<Vec<_>>(),
        [ReportFormat::Json]
    );
    assert_eq!(
        parse_cli(["graphfog", "exp2"]).unwrap().config.replications,
        1
    );
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["exp1", "--reps", "0"][..],
        &["exp9"],
        &[],
        &["exp1", "--bogus"],
        &["exp1", "--horizon", "-5"],
        &["exp1", "--format", "xml"],
        &["exp1", "--seed", "abc"],
    ] {
        let (code, out, err) = invoke(args);
        assert_eq!(code, EXIT_USAGE, "{args:?}");
        assert!(out.is_empty());
        assert!(!err.is_empty());
        assert!(!err.contains('\u{1b}'), "colour codes in {err:?}");
    }
}

#[test]
fn help_and_version_exit_0() {
    let (code, out, _) = invoke(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("--scenario"));
    let (code, out, _) = invoke(&["--version"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn bad_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let (code, _, err) = invoke(&["exp1", "--scenario", path(&missing), "--dry-run"]);
    assert_eq!(code, 3, "{err}");

    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(invoke(&["exp1", "--app", path(&garbage), "--dry-run"]).0, 3);

    let faults = dir.path().join("faults.json");
    fs::write(
        &faults,
        r#"[{"atMs": 10, "action": "FAIL_DEVICE", "device": "nowhere"}]"#,
    )
    .unwrap();
    assert_eq!(
        invoke(&["exp1", "--faults", path(&faults), "--dry-run"]).0,
        3
    );

    let incidents = dir.path().join("incidents.json");
    fs::write(&incidents, r#"[{"atMs": 0, "zone": "c1"}]"#).unwrap();
    assert_eq!(
        invoke(&["custom", "--incidents", path(&incidents), "--dry-run"]).0,
        3
    );
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(invoke(&["exp3", "--out", path(a.path())]).0, EXIT_OK);
    assert_eq!(invoke(&["exp3", "--out", path(b.path())]).0, EXIT_OK);
    for name in [
        "report.json",
        "latency.csv",
        "incidents.csv",
        "assignments.csv",
        "devices.csv",
        "sensors.csv",
        "tuples.csv",
    ] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty(), "{name}");
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn empty_fault_script_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let faults = dir.path().join("faults.json");
    fs::write(&faults, "[]").unwrap();
    let plain = dir.path().join("plain");
    let scripted = dir.path().join("scripted");
    assert_eq!(
        invoke(&["exp1", "--format", "json", "--out", path(&plain)]).0,
        EXIT_OK
    );
    assert_eq!(
        invoke(&[
            "exp1",
            "--format",
            "json",
            "--out",
            path(&scripted),
            "--faults",
            path(&faults)
        ])
        .0,
        EXIT_OK
    );
    assert_eq!(
        fs::read(plain.join("report.json")).unwrap(),
        fs::read(scripted.join("report.json")).unwrap()
    );
    assert!(!plain.join("latency.csv").exists());
}

#[test]
fn latency_csv_has_the_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, _) = invoke(&["exp1", "--format", "csv", "--out", path(dir.path())]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("latency.csv"));
    let text = fs::read_to_string(dir.path().join("latency.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("loop_id,n,mean_ms,variance_ms2,ci95_low_ms,ci95_high_ms")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(
        rows,
        [
            "z1/alert-to-confirmation,40,205.3,0,205.3,205.3",
            "z1/coordination,5,205.3,0,205.3,205.3"
        ]
    );
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let (code, out, _) = invoke(&["exp4", "--dry-run", "--out", path(&out_dir)]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("ratio=200"), "{out}");
    assert!(!out_dir.exists());
}

#[test]
fn custom_scenario_runs_its_own_incidents() {
    let dir = tempfile::tempdir().unwrap();
    let incidents = dir.path().join("incidents.json");
    fs::write(
        &incidents,
        r#"[{"atMs": 0, "zone": "z4"}, {"atMs": 0, "zone": "z5", "kind": "flood"}]"#,
    )
    .unwrap();
    let (code, out, err) = invoke(&[
        "custom",
        "--incidents",
        path(&incidents),
        "--format",
        "json",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.starts_with("custom seed=42 reps=1"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    let incidents = report["runs"][0]["incidents"].as_array().unwrap();
    assert_eq!(incidents.len(), 2);
    assert_eq!(incidents[1]["kind"], "flood");
}

#[test]
fn binary_reads_the_seed_from_the_environment() {
    let bin = env!("CARGO_BIN_EXE_graphfog");
    let seed_line = |envs: &[(&str, &str)], args: &[&str]| {
        let out = Command::new(bin)
            .args(args)
            .envs(envs.iter().copied())
            .output()
            .unwrap();
        (
            out.status.code(),
            String::from_utf8(out.stdout)
                .unwrap()
                .lines()
                .next()
                .unwrap_or_default()
                .to_string(),
        )
    };
    let (code, line) = seed_line(&[("GRAPHFOG_SEED", "99")], &["exp2", "--dry-run"]);
    assert_eq!(code, Some(0));
    assert_eq!(line, "exp2 seed=99 reps=1");
    let (_, line) = seed_line(
        &[("GRAPHFOG_SEED", "99")],
        &["exp2", "--dry-run", "--seed", "5"],
    );
    assert_eq!(line, "exp2 seed=5 reps=1");

    let out = Command::new(bin)
        .args(["exp1", "--reps", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin)
        .args(["exp1", "--scenario", "/nonexistent/road.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
