use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axum::http::Uri;
use chrono::NaiveDate;
use conceptpath::kgstore::{load_workspace, save_workspace, Concept, Source, Store, Work};
use serde_json::Value;

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/corpus");
const PAGES: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../core/tests/fixtures/ingest/two_pages.json"
);

fn bin(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conceptpath"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn corpus_workspace(dir: &Path) -> PathBuf {
    let ws = dir.join("ws");
    fs::create_dir_all(&ws).unwrap();
    for entry in fs::read_dir(Path::new(CORPUS).join("workspace")).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), ws.join(entry.file_name())).unwrap();
    }
    ws
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path)
        .map(|t| t.lines().filter(|l| !l.trim().is_empty()).count())
        .unwrap_or(0)
}

fn report(ws: &Path) -> serde_json::Map<String, Value> {
    serde_json::from_str(&fs::read_to_string(ws.join("analysis/report.json")).unwrap()).unwrap()
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(tmp.path(), &["paths", "extract", "--bogus"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));

    let out = bin(tmp.path(), &["pipeline", "run", "--backend", "mock"]);
    assert_eq!(code(&out), 2, "mock without a script");
    let out = bin(tmp.path(), &["analyze", "entropy"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn schema_mismatch_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = corpus_workspace(tmp.path());
    fs::write(
        ws.join("meta.json"),
        r#"{"schema_version": 99, "created_at": "2025-01-01T00:00:00Z", "cleaned": true}"#,
    )
    .unwrap();
    for args in [&["paths", "extract"][..], &["clean"], &["analyze", "spans"]] {
        let out = bin(&ws, args);
        assert_eq!(code(&out), 3, "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).contains("schema version 99"));
    }
}

#[test]
fn paths_extract_on_empty_workspace_warns_and_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(tmp.path(), &["paths", "extract"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0 paths");
    assert!(stderr(&out).contains("no concept paths"));
    assert_eq!(lines(&tmp.path().join("paths.jsonl")), 0);
}

#[test]
fn missing_workspace_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&tmp.path().join("absent"), &["clean"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn pipeline_run_with_gold_script_populates_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = corpus_workspace(tmp.path());
    let script = format!("{CORPUS}/gold_script.jsonl");
    let out = bin(
        &ws,
        &[
            "pipeline",
            "run",
            "--backend",
            "mock",
            "--script",
            &script,
            "--parallel",
            "4",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["processed"], 10);
    assert_eq!(summary["failed"], 0);
    assert!(lines(&ws.join("paths.jsonl")) > 0);
    assert_eq!(lines(&ws.join("pipeline_runs.jsonl")), 10);

    // completed works are skipped and the parked one resumes where it stopped
    let out = bin(&ws, &["pipeline", "run", "--backend", "mock", "--script", &script]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["skipped"], 9);
    assert_eq!(summary["awaiting_review"], 1);
}

#[test]
fn pipeline_run_exits_1_when_a_work_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = corpus_workspace(tmp.path());
    let gold = fs::read_to_string(format!("{CORPUS}/gold_script.jsonl")).unwrap();
    let segmentation_only: Vec<&str> = gold
        .lines()
        .filter(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            v["work_id"] == "W1" && v["stage"] == "segmentation"
        })
        .collect();
    assert_eq!(segmentation_only.len(), 1);
    let script = tmp.path().join("short.jsonl");
    fs::write(&script, segmentation_only.join("\n")).unwrap();
    let out = bin(
        &ws,
        &[
            "pipeline",
            "run",
            "--backend",
            "mock",
            "--script",
            script.to_str().unwrap(),
            "--work",
            "W1",
        ],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["failed"], 1);
    let store = load_workspace(&ws).unwrap();
    assert!(store
        .run("W1")
        .unwrap()
        .error
        .as_deref()
        .unwrap()
        .contains("no response left"));
}

fn work(id: &str, concepts: impl IntoIterator<Item = String>) -> Work {
    Work {
        id: id.to_string(),
        title: format!("Work {id}"),
        abstract_text: "An abstract.".into(),
        publication_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
        authors: vec!["A. Author".into()],
        concept_ids: concepts.into_iter().collect(),
    }
}

/// Concept `Ck` tags `60 / k` works: frequency = 60 * rank^-1 exactly.
fn power_law_workspace(ws: &Path) {
    let freqs = [60usize, 30, 20, 15, 12, 10];
    let mut store = Store::new();
    for k in 1..=freqs.len() {
        store
            .insert_concept(Concept::new(
                format!("C{k}"),
                format!("Concept {k}"),
                0,
                Source::Openalex,
            ))
            .unwrap();
    }
    for i in 0..60 {
        let tags = (1..=freqs.len()).filter(|k| i < freqs[k - 1]).map(|k| format!("C{k}"));
        store.insert_work(work(&format!("W{i}"), tags)).unwrap();
    }
    fs::create_dir_all(ws).unwrap();
    save_workspace(&store, ws).unwrap();
}

#[test]
fn analyze_powerlaw_recovers_an_exact_power_law() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path().join("ws");
    power_law_workspace(&ws);
    let out = bin(&ws, &["analyze", "powerlaw"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = report(&ws);
    let a = r["concept_powerlaw_a"].as_f64().unwrap();
    let c = r["concept_powerlaw_c"].as_f64().unwrap();
    let r2 = r["concept_powerlaw_r2"].as_f64().unwrap();
    assert!((a + 1.0).abs() < 1e-9, "a = {a}");
    assert!((c - 60.0).abs() < 1e-6, "C = {c}");
    assert!((r2 - 1.0).abs() < 1e-9, "R2 = {r2}");
    let csv = fs::read_to_string(ws.join("analysis/concept_powerlaw_rank_frequency.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("1,C1,60"));

    let out = bin(&ws, &["analyze", "powerlaw", "--top-k", "3"]);
    assert_eq!(code(&out), 0);
    assert_eq!(report(&ws)["concept_powerlaw_fit_points"], 3);
}

/// Serves the recorded OpenAlex pages from a local port.
fn fake_openalex() -> String {
    let entries: Vec<Value> = serde_json::from_str(&fs::read_to_string(PAGES).unwrap()).unwrap();
    let pages: HashMap<String, Value> = entries
        .into_iter()
        .map(|e| {
            let url = e["request_url"].as_str().unwrap();
            (
                url.trim_start_matches("http://openalex.test").to_string(),
                e["body"].clone(),
            )
        })
        .collect();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let app = axum::Router::new().fallback(move |uri: Uri| {
                let body = uri.path_and_query().and_then(|pq| pages.get(pq.as_str())).cloned();
                async move {
                    match body {
                        Some(b) => (axum::http::StatusCode::OK, b.to_string()),
                        None => (axum::http::StatusCode::NOT_FOUND, String::new()),
                    }
                }
            });
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn ingest_to_report(ws: &Path, base: &str) -> (String, String) {
    let ingest = [
        "ingest",
        "--institution",
        "I1",
        "--from",
        "2020-01",
        "--to",
        "2020-12",
        "--page-size",
        "3",
        "--base-url",
        base,
    ];
    let steps: [&[&str]; 7] = [
        &ingest,
        &["clean"],
        &["paths", "extract"],
        &["analyze", "powerlaw"],
        &["analyze", "prevalence"],
        &["analyze", "innovation"],
        &["analyze", "spans"],
    ];
    for step in steps {
        let out = bin(ws, step);
        assert_eq!(code(&out), 0, "{step:?}: {}", stderr(&out));
    }
    (
        fs::read_to_string(ws.join("analysis/report.json")).unwrap(),
        fs::read_to_string(ws.join("paths.jsonl")).unwrap(),
    )
}

#[test]
fn ingest_clean_paths_analyze_reproduces_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let base = fake_openalex();
    let first = ingest_to_report(&tmp.path().join("a"), &base);
    let second = ingest_to_report(&tmp.path().join("b"), &base);
    assert_eq!(first, second);

    let store = load_workspace(tmp.path().join("a")).unwrap();
    assert_eq!(store.works().len(), 5);
    assert!(store.meta().cleaned);
    assert!(!store.paths().is_empty());
    let r: Value = serde_json::from_str(&first.0).unwrap();
    assert_eq!(r["paths_total"], store.paths().len());

    // re-analysing an unchanged workspace leaves the report byte-identical
    let again = bin(&tmp.path().join("a"), &["analyze", "spans"]);
    assert_eq!(code(&again), 0);
    assert_eq!(
        fs::read_to_string(tmp.path().join("a/analysis/report.json")).unwrap(),
        first.0
    );
}

#[test]
fn ingest_resume_after_a_failed_page_admits_every_work() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path().join("ws");
    let args = |base: &str| {
        vec![
            "ingest".to_string(),
            "--institution".into(),
            "I1".into(),
            "--from".into(),
            "2020-01".into(),
            "--to".into(),
            "2020-12".into(),
            "--page-size".into(),
            "3".into(),
            "--base-url".into(),
            base.to_string(),
        ]
    };
    // nothing listens on port 9, so the first page fails at transport level
    let mut dead: Vec<String> = args("http://127.0.0.1:9");
    dead.extend(["--max-retries".into(), "0".into()]);
    let out = bin(&ws, &dead.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("resume from cursor"), "{}", stderr(&out));

    let base = fake_openalex();
    let mut live = args(&base);
    live.push("--resume".into());
    let out = bin(&ws, &live.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(load_workspace(&ws).unwrap().works().len(), 5);
    assert_eq!(lines(&ws.join("ingest_raw.jsonl")), 5);
}

#[test]
fn evaluate_writes_reports_per_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = corpus_workspace(tmp.path());
    let script = format!("{CORPUS}/gold_script.jsonl");
    let out = bin(
        &ws,
        &[
            "evaluate",
            "--config",
            "stages23_raw",
            "--gold",
            CORPUS,
            "--backend",
            "mock",
            "--script",
            &script,
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let reports: Value = serde_json::from_str(&fs::read_to_string(ws.join("eval/eval_report.json")).unwrap()).unwrap();
    assert_eq!(reports[0]["configuration"], "stages23_raw");
    let csv = fs::read_to_string(ws.join("eval/eval_report.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("stages23_raw,")));
    assert!(csv.lines().count() > 1);

    let out = bin(&ws, &["evaluate", "--config", "bogus", "--gold", CORPUS]);
    assert_eq!(code(&out), 2);
}
