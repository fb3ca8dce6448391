use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name).display().to_string()
}

fn saycomply(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saycomply"))
        .args(args)
        .env_remove("SAYCOMPLY_LLM_URL")
        .env_remove("SAYCOMPLY_EMBED_URL")
        .env_remove("SAYCOMPLY_CONTEXT_BUDGET")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn eval(report: &str, method: &str) -> String {
    let (suite, corpus, world, rules) =
        (fixture("suite-s1.json"), fixture("corpus-f2"), fixture("world-w1.json"), fixture("rules-s1.json"));
    stdout(&saycomply(&[
        "eval", "--suite", &suite, "--corpus", &corpus, "--world", &world, "--method", method, "--rules", &rules,
        "--report", report,
    ]))
}

#[test]
fn eval_markdown_has_one_row_per_method() {
    let md = eval("md", "tree,top3,env");
    assert!(md.starts_with("| Method | Comply | Comply&Complete | Context Retrieval |\n|---|---|---|---|\n"));
    assert!(md.contains("| Tree RAG | 100.0% | 100.0% | 100.0% |"));
    assert!(md.contains("| Top-3 RAG |"));
    assert!(md.contains("| Env-Grounding |"));
}

#[test]
fn eval_csv_is_deterministic() {
    let a = eval("csv", "tree");
    assert_eq!(a, eval("csv", "tree"));
    assert_eq!(a.lines().count(), 14);
    assert!(a.lines().skip(1).all(|l| l.starts_with("tree,")));
}

#[test]
fn run_prints_the_event_log() {
    let (corpus, world, rules) = (fixture("corpus-f1"), fixture("world-w1.json"), fixture("rules-f1.json"));
    let out = stdout(&saycomply(&[
        "run", "--corpus", &corpus, "--world", &world, "--rules", &rules, "--query", "read the boiler gauge",
    ]));
    let events: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.first().unwrap()["kind"], "retrieved");
    assert_eq!(events.last().unwrap()["kind"], "completed");
    assert!(events.iter().enumerate().all(|(i, e)| e["seq"] == i as u64 + 1));
}

#[test]
fn retrieve_prints_context_and_trace() {
    let (corpus, rules) = (fixture("corpus-f1"), fixture("rules-f1.json"));
    let out = stdout(&saycomply(&[
        "retrieve", "--corpus", &corpus, "--rules", &rules, "--query", "check the pressure of the fire extinguishers on floor 3",
    ]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["trace"]["level3_chosen"], "extinguisher-inspection-manual");
    assert!(v["context"]["total_words"].as_u64().unwrap() <= 4000);
}

#[test]
fn ingest_reports_counts_and_missing_llm_is_an_error() {
    let out = stdout(&saycomply(&["ingest", "--corpus", &fixture("corpus-f1")]));
    assert_eq!(out.trim(), "ingested 13 entries (version 1): L1 3, L2 6, L3 4");
    let failed = saycomply(&["retrieve", "--corpus", &fixture("corpus-f1"), "--query", "x"]);
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("no LLM configured"));
}
