use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn memloop(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memloop"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn run_fixture(config: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg = fixture(config);
    let mut args = vec!["run", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    memloop(&args, out)
}

#[test]
fn run_prints_the_frozen_summary_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_fixture("remem.json", tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("demo-remem");
    for f in [
        "results.jsonl",
        "config.resolved.json",
        "memory.snapshot.jsonl",
        "report.json",
        "report.csv",
    ] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert_eq!(
        std::fs::read_to_string(dir.join("results.jsonl"))
            .unwrap()
            .lines()
            .count(),
        12
    );
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/remem_summary.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, stdout(&o)).unwrap();
    }
    assert_eq!(stdout(&o), std::fs::read_to_string(golden).unwrap());
}

#[test]
fn missing_tasks_file_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_fixture("remem.json", tmp.path(), &["--set", "tasks_path=nowhere.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("demo-remem").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_fixture("remem.json", tmp.path(), &["--set", "retrieval.topk=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("topk"));
}

#[test]
fn overrides_are_recorded_in_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_fixture(
        "remem.json",
        tmp.path(),
        &[
            "--ordering",
            "easy_to_hard",
            "--set",
            "retrieval.k=2",
            "--run-id",
            "sorted",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(tmp.path().join("sorted/config.resolved.json")).unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg["ordering"], "easy_to_hard");
    assert_eq!(cfg["retrieval"]["k"], 2);
    assert_eq!(cfg["run_id"], "sorted");
    assert!(stdout(&o).starts_with("sorted S="));
}

#[test]
fn bad_ordering_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_fixture("remem.json", tmp.path(), &["--ordering", "shuffled"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn embedder_outage_aborts_the_stream() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/embed", listener.local_addr().unwrap());
    drop(listener);
    let tmp = tempfile::tempdir().unwrap();
    let o = run_fixture(
        "remem.json",
        tmp.path(),
        &[
            "--set",
            &format!("embedder.endpoint={url}"),
            "--set",
            "embedder.timeout=1",
        ],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn parallel_runs_keep_config_order() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (fixture("remem.json"), fixture("history.json"));
    let o = memloop(
        &[
            "run",
            a.to_str().unwrap(),
            b.to_str().unwrap(),
            "--parallel",
            "2",
            "--output-dir",
            tmp.path().to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("demo-remem "));
    assert!(lines[1].starts_with("demo-history "));
}

#[test]
fn resume_after_completion_reproduces_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let first = run_fixture("remem.json", tmp.path(), &[]);
    let again = run_fixture("remem.json", tmp.path(), &["--resume"]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(stdout(&first), stdout(&again));
    let fresh = tempfile::tempdir().unwrap();
    assert_eq!(
        run_fixture("remem.json", fresh.path(), &["--resume"]).status.code(),
        Some(2)
    );
}

#[test]
fn compare_tabulates_runs_sorted_by_id() {
    let tmp = tempfile::tempdir().unwrap();
    run_fixture("remem.json", tmp.path(), &[]);
    run_fixture("history.json", tmp.path(), &[]);
    run_fixture(
        "history.json",
        tmp.path(),
        &["--run-id", "another", "--policy", "exp_rag"],
    );
    let d = |n: &str| tmp.path().join(n).to_string_lossy().into_owned();

    let o = memloop(&["compare", &d("demo-remem"), &d("demo-history")], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("run_id"));
    assert!(rows[1].starts_with("demo-history"));
    assert!(rows[2].starts_with("demo-remem") && rows[2].contains("remem"));
    let csv = std::fs::read_to_string(tmp.path().join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("run_id,policy,ordering,tasks,S,P,accuracy,avg_steps,pruning"));

    let o = memloop(
        &["compare", &d("demo-remem"), &d("another"), &d("demo-history")],
        tmp.path(),
    );
    let ids: Vec<String> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    assert_eq!(ids, vec!["another", "demo-history", "demo-remem"]);

    assert_eq!(
        memloop(&["compare", &d("demo-remem")], tmp.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        memloop(&["compare", &d("demo-remem"), &d("missing")], tmp.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn report_recomputes_the_same_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let run = run_fixture("remem.json", tmp.path(), &[]);
    let dir = tmp.path().join("demo-remem");
    let before = std::fs::read_to_string(dir.join("report.json")).unwrap();
    std::fs::remove_file(dir.join("report.json")).unwrap();
    let o = memloop(&["report", dir.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), stdout(&run));
    assert_eq!(std::fs::read_to_string(dir.join("report.json")).unwrap(), before);
}

#[test]
fn snapshot_inspect_lists_and_queries() {
    let tmp = tempfile::tempdir().unwrap();
    run_fixture("remem.json", tmp.path(), &[]);
    let snap = tmp.path().join("demo-remem/memory.snapshot.jsonl");
    let o = memloop(&["snapshot-inspect", snap.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("policy=remem entries=12 "));
    assert_eq!(out.lines().count(), 13);

    let o = memloop(
        &[
            "snapshot-inspect",
            snap.to_str().unwrap(),
            "--query",
            "What is 2 + 2?",
            "-k",
            "2",
        ],
        tmp.path(),
    );
    let out = stdout(&o);
    let hits: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(hits.len(), 2);
    assert!(hits[0].contains("score=1.0000") && hits[0].contains("What is 2 + 2?"));

    let bad = tmp.path().join("bad.jsonl");
    std::fs::write(&bad, "not json\n").unwrap();
    assert_eq!(
        memloop(&["snapshot-inspect", bad.to_str().unwrap()], tmp.path())
            .status
            .code(),
        Some(2)
    );
}
