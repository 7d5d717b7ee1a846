use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridplan"))
        .args(args)
        .output()
        .expect("spawn hybridplan")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixtures {
    cluster: PathBuf,
    model: PathBuf,
    plan: PathBuf,
}

fn golden() -> Fixtures {
    Fixtures {
        cluster: fixture("cluster.json"),
        model: fixture("model.json"),
        plan: fixture("golden_plan.json"),
    }
}

fn with_profiles<'a>(cmd: &'a str, f: &'a Fixtures, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![cmd, "--cluster", p(&f.cluster), "--model", p(&f.model)];
    args.extend_from_slice(extra);
    args
}

#[test]
fn synth_missing_hidden_is_usage_error() {
    let out = run(&["synth-profile", "--model", "--layers", "4", "--seq", "128"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("--hidden"));
}

#[test]
fn synth_without_kind_is_usage_error() {
    let out = run(&["synth-profile", "--layers", "4"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_unwritable_output_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("missing/dir/model.json");
    let out = run(&[
        "synth-profile",
        "--model",
        "--layers",
        "2",
        "--hidden",
        "64",
        "--seq",
        "32",
        "-o",
        p(&target),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn synthesized_profiles_feed_search_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let cluster = dir.path().join("cluster.json");
    let plan = dir.path().join("plan.json");
    let out = run(&[
        "synth-profile",
        "--model",
        "--layers",
        "4",
        "--hidden",
        "128",
        "--seq",
        "64",
        "--global-batch",
        "8",
        "-o",
        p(&model),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(&[
        "synth-profile",
        "--cluster",
        "--devices",
        "4",
        "--devices-per-node",
        "2",
        "-o",
        p(&cluster),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = run(&["search", "--cluster", p(&cluster), "--model", p(&model), "-o", p(&plan)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = String::from_utf8(out.stdout).unwrap();
    let line = summary.trim_end();
    assert_eq!(summary.lines().count(), 1);
    let fields: Vec<&str> = line.split(' ').collect();
    assert_eq!(fields.len(), 3, "{line}");
    assert!(fields[0].starts_with("time=") && fields[1].starts_with("pp=") && fields[2].starts_with("microbatch="));

    let out = run(&[
        "validate",
        "--cluster",
        p(&cluster),
        "--model",
        p(&model),
        "--plan",
        p(&plan),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "ok\n");
}

#[test]
fn search_then_validate_exits_zero() {
    let f = golden();
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    for transitions in ["on", "off"] {
        let out = run(&with_profiles(
            "search",
            &f,
            &["--transitions", transitions, "-o", p(&plan)],
        ));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = run(&with_profiles(
            "validate",
            &f,
            &["--transitions", transitions, "--plan", p(&plan)],
        ));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
}

#[test]
fn infeasible_search_names_tightest_stage() {
    let f = Fixtures {
        cluster: fixture("cluster_tiny_memory.json"),
        ..golden()
    };
    let out = run(&with_profiles("search", &f, &[]));
    assert_eq!(code(&out), 4);
    let err = stderr(&out);
    assert!(err.contains("tightest stage"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn malformed_profile_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("model.json");
    fs::write(&bad, "{\"model\": {\"n_layers\": ").unwrap();
    let out = run(&["search", "--cluster", p(&fixture("cluster.json")), "--model", p(&bad)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn unknown_profile_key_needs_lenient() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(fixture("cluster.json")).unwrap()).unwrap();
    doc["cluster"]["rack"] = Value::from("a1");
    let cluster = dir.path().join("cluster.json");
    fs::write(&cluster, doc.to_string()).unwrap();
    let model = fixture("model.json");
    let strict = run(&["search", "--cluster", p(&cluster), "--model", p(&model)]);
    assert_eq!(code(&strict), 2);
    let lenient = run(&["search", "--lenient", "--cluster", p(&cluster), "--model", p(&model)]);
    assert_eq!(code(&lenient), 0, "{}", stderr(&lenient));
}

#[test]
fn missing_plan_file_is_io_error() {
    let f = golden();
    let out = run(&with_profiles("validate", &f, &["--plan", "/nonexistent/plan.json"]));
    assert_eq!(code(&out), 3);
}

fn corrupted_plan(edit: impl FnOnce(&mut Value)) -> tempfile::NamedTempFile {
    let mut plan: Value = serde_json::from_str(&fs::read_to_string(fixture("golden_plan.json")).unwrap()).unwrap();
    edit(&mut plan);
    let file = tempfile::NamedTempFile::new().unwrap();
    fs::write(file.path(), plan.to_string()).unwrap();
    file
}

#[test]
fn validate_rejects_overlapping_ranges() {
    let f = golden();
    let bad = corrupted_plan(|plan| {
        plan["pp"] = Value::from(2);
        plan["stage_ranges"] = serde_json::json!([[0, 2], [1, 2]]);
    });
    let out = run(&with_profiles("validate", &f, &["--plan", p(bad.path())]));
    assert_eq!(code(&out), 5);
    assert!(
        stderr(&out).contains("stage_ranges not a partition"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn validate_rejects_stale_cost() {
    let f = golden();
    let bad = corrupted_plan(|plan| {
        let t = plan["predicted_iteration_time"].as_f64().unwrap();
        plan["predicted_iteration_time"] = Value::from(t * 0.5);
    });
    let out = run(&with_profiles("validate", &f, &["--plan", p(bad.path())]));
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("stale cost"));
}

#[test]
fn simulate_on_corrupted_plan_exits_five() {
    let f = golden();
    let bad = corrupted_plan(|plan| plan["stage_ranges"] = serde_json::json!([[0, 1]]));
    let out = run(&with_profiles("simulate", &f, &["--plan", p(bad.path())]));
    assert_eq!(code(&out), 5);
}

#[test]
fn report_csv_has_one_row_per_layer_stage_and_total() {
    let f = golden();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("report.csv");
    let json = dir.path().join("report.json");
    let out = run(&with_profiles(
        "report",
        &f,
        &["--plan", p(&f.plan), "--csv", p(&csv), "-o", p(&json)],
    ));
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let plan: Value = serde_json::from_str(&fs::read_to_string(&f.plan).unwrap()).unwrap();
    let model: Value = serde_json::from_str(&fs::read_to_string(&f.model).unwrap()).unwrap();
    let n_layers = model["model"]["n_layers"].as_u64().unwrap();
    let pp = plan["pp"].as_u64().unwrap();

    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let width = header.split(',').count();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len() as u64, n_layers + pp + 1);
    assert!(rows.iter().all(|r| r.split(',').count() == width));
    assert!(rows.last().unwrap().starts_with("total,"));
}

#[test]
fn report_layer_times_reconcile_with_stage_times() {
    let f = golden();
    let out = run(&with_profiles("report", &f, &["--plan", p(&f.plan)]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    for stage in report["stages"].as_array().unwrap() {
        let idx = stage["stage"].as_u64().unwrap();
        let sum: f64 = report["layers"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|l| l["stage"].as_u64() == Some(idx))
            .map(|l| l["time"].as_f64().unwrap() + l["transition_in"].as_f64().unwrap())
            .sum();
        let stage_time = stage["per_microbatch_time"].as_f64().unwrap();
        assert!((sum - stage_time).abs() <= 1e-9 * stage_time, "{sum} vs {stage_time}");
    }
}

#[test]
fn simulate_golden_plan_tracks_analytic_time() {
    let f = golden();
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let out = run(&with_profiles(
        "simulate",
        &f,
        &["--plan", p(&f.plan), "--trace", p(&trace)],
    ));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let sim: Value = serde_json::from_slice(&out.stdout).unwrap();
    let plan: Value = serde_json::from_str(&fs::read_to_string(&f.plan).unwrap()).unwrap();
    let makespan = sim["makespan"].as_f64().unwrap();
    let analytic = plan["predicted_iteration_time"].as_f64().unwrap();
    assert!(makespan <= analytic * (1.0 + 1e-9), "{makespan} vs {analytic}");
    assert!((analytic - makespan) / analytic < 0.05);

    let events: Vec<Value> = fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!events.is_empty());
    let times: Vec<f64> = events.iter().map(|e| e["time"].as_f64().unwrap()).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let f = golden();
    for cmd in ["search", "simulate", "report"] {
        let extra: Vec<&str> = if cmd == "search" {
            vec![]
        } else {
            vec!["--plan", p(&f.plan)]
        };
        let a = run(&with_profiles(cmd, &f, &extra));
        let b = run(&with_profiles(cmd, &f, &extra));
        assert_eq!(code(&a), 0, "{cmd}: {}", stderr(&a));
        assert_eq!(a.stdout, b.stdout, "{cmd}");
        assert_eq!(a.stderr, b.stderr, "{cmd}");
    }
}

#[test]
fn search_pipes_into_validate() {
    use std::io::Write;
    use std::process::Stdio;

    let f = golden();
    let searched = run(&with_profiles("search", &f, &[]));
    assert_eq!(code(&searched), 0, "{}", stderr(&searched));
    let mut child = Command::new(env!("CARGO_BIN_EXE_hybridplan"))
        .args(with_profiles("validate", &f, &["--plan", "/dev/stdin"]))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&searched.stdout).unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(out.stdout, b"ok\n");
}
