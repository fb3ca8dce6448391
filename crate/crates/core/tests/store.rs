mod common;

use std::fs;

use common::*;
use proptest::prelude::*;
use saycomply::store::{ingest_corpus, load_store, save_store, Category, ContextStore, EntryDraft, Level, StoreError};
use saycomply::world::ingest_site_orientation;

fn write_corpus(dir: &std::path::Path, entries: &[(&str, &str)]) {
    fs::create_dir_all(dir.join("entries")).unwrap();
    let ids: Vec<&str> = entries.iter().map(|(id, _)| *id).collect();
    fs::write(dir.join("manifest.json"), serde_json::json!({ "version": 1, "entries": ids }).to_string()).unwrap();
    for (id, text) in entries {
        fs::write(dir.join("entries").join(format!("{id}.md")), text).unwrap();
    }
}

fn entry(id: &str, level: u8, refs: &str) -> String {
    let refs = if refs.is_empty() { String::new() } else { format!("refs: {refs}\n") };
    format!("---\nid: {id}\nlevel: {level}\ncategory: operation\ntitle: {id}\nsummary: about {id}\n{refs}---\nbody of {id}\n")
}

#[test]
fn f1_ingests_thirteen_entries_at_version_one() {
    let src = fixture("corpus-f1");
    let files = fs::read_dir(src.join("entries")).unwrap().count();
    assert_eq!(files, 13);
    let store = ingest_corpus(&src, &embedder(), None).unwrap();
    assert_eq!(store.len(), 13);
    assert_eq!(store.version(), 1);
    assert_eq!(store.entries_at(Some(Level::L1), None).len(), 3);
    assert_eq!(store.entries_at(Some(Level::L3), None).len(), 4);
}

#[test]
fn orphan_level3_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &[("guide", &entry("guide", 2, "")), ("manual", &entry("manual", 3, ""))]);
    let err = ingest_corpus(dir.path(), &embedder(), None).unwrap_err();
    assert!(matches!(err, StoreError::OrphanLevel3(id) if id == "manual"));
}

#[test]
fn dangling_reference_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &[("guide", &entry("guide", 2, "missing-doc"))]);
    let err = ingest_corpus(dir.path(), &embedder(), None).unwrap_err();
    assert!(matches!(err, StoreError::DanglingRef(id) if id == "missing-doc"));
}

#[test]
fn missing_summary_is_generated_and_written_back() {
    let dir = tempfile::tempdir().unwrap();
    let log = "---\nid: pump-log\nlevel: 1\ncategory: operation\ntitle: Pump log\n---\ndate | value\n2024-01-01 | 3\n";
    write_corpus(dir.path(), &[("pump-log", log), ("guide", &entry("guide", 2, ""))]);
    let llm = saycomply::LlmGateway::scripted(vec![saycomply::ScriptedRule {
        matchers: vec!["Pump log".into()],
        completion: "Daily pump values.\nextra line".into(),
        max_uses: None,
    }])
    .unwrap();
    let templates = saycomply::TemplateSet::builtin();
    let gen = saycomply::store::SummaryGenerator { llm: &llm, templates: &templates };
    let store = ingest_corpus(dir.path(), &embedder(), Some(gen)).unwrap();
    assert_eq!(store.get("pump-log").unwrap().summary, "Daily pump values.");
    let reread = load_store(dir.path(), &embedder()).unwrap();
    assert_eq!(reread, store);
}

#[test]
fn missing_summary_without_llm_fails() {
    let dir = tempfile::tempdir().unwrap();
    let log = "---\nid: pump-log\nlevel: 1\ncategory: operation\ntitle: Pump log\n---\nrows\n";
    write_corpus(dir.path(), &[("pump-log", log), ("guide", &entry("guide", 2, ""))]);
    assert!(matches!(ingest_corpus(dir.path(), &embedder(), None), Err(StoreError::MissingSummary(_))));
}

#[test]
fn append_observation_semantics() {
    let mut store = f1();
    let before = store.get("fire-extinguisher-log").unwrap().body.lines().count();
    store
        .append_observation("fire-extinguisher-log", "2024-06-01 | extinguisher-3F-02 | pressure OK", &embedder())
        .unwrap();
    assert_eq!(store.version(), 2);
    store.append_observation("fire-extinguisher-log", "2024-06-02 | extinguisher-3F-01 | pressure OK", &embedder()).unwrap();
    let body = &store.get("fire-extinguisher-log").unwrap().body;
    let lines: Vec<&str> = body.lines().collect();
    assert_eq!(lines.len(), before + 2);
    assert_eq!(lines[before], "2024-06-01 | extinguisher-3F-02 | pressure OK");
    assert_eq!(lines[before + 1], "2024-06-02 | extinguisher-3F-01 | pressure OK");

    let err = store.append_observation("site-safety-manual", "x | y", &embedder()).unwrap_err();
    assert!(matches!(err, StoreError::WrongLevel { .. }));
    assert!(matches!(store.append_observation("nope", "x", &embedder()), Err(StoreError::UnknownEntry(_))));
    assert_eq!(store.version(), 3);
}

#[test]
fn round_trip_f1_and_f2() {
    for store in [f1(), f2()] {
        let dir = tempfile::tempdir().unwrap();
        save_store(&store, dir.path()).unwrap();
        assert_eq!(load_store(dir.path(), &embedder()).unwrap(), store);
    }
}

#[test]
fn load_from_empty_directory_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_store(dir.path(), &embedder()), Err(StoreError::CorpusFormat(_))));
}

#[test]
fn save_after_append_keeps_row() {
    let mut store = f1();
    store.append_observation("gauge-reading-log", "2024-06-01 | day | boiler-gauge | 57 psi", &embedder()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_store(&store, dir.path()).unwrap();
    let reread = load_store(dir.path(), &embedder()).unwrap();
    assert!(reread.get("gauge-reading-log").unwrap().body.ends_with("2024-06-01 | day | boiler-gauge | 57 psi"));
    assert_eq!(reread.version(), 2);
    assert_eq!(reread, store);
}

#[test]
fn entries_at_counts_on_f1() {
    let store = f1();
    let l2: Vec<&str> = store.entries_at(Some(Level::L2), None).iter().map(|e| e.id.as_str()).collect();
    assert_eq!(l2.len(), 6);
    let mut sorted = l2.clone();
    sorted.sort();
    assert_eq!(l2, sorted);
    assert_eq!(store.entries_at(None, Some(Category::Environment)).len(), 4);
    assert!(ContextStore::empty().entries_at(Some(Level::L1), None).is_empty());
}

#[test]
fn orientation_round_trips() {
    let mut store = f2();
    let id = ingest_site_orientation(&mut store, "kitchen", "Coffee machine must be descaled weekly.", &embedder()).unwrap();
    assert_eq!(id, "orientation-kitchen-1");
    let dir = tempfile::tempdir().unwrap();
    save_store(&store, dir.path()).unwrap();
    assert_eq!(load_store(dir.path(), &embedder()).unwrap(), store);
}

fn draft(id: &str, level: Level, refs: &[&str]) -> EntryDraft {
    EntryDraft {
        id: id.into(),
        level,
        category: Category::Operation,
        title: id.into(),
        summary: Some(format!("summary {id}")),
        body: format!("body {id}"),
        refs: refs.iter().map(|r| r.to_string()).collect(),
    }
}

#[test]
fn duplicate_ids_are_rejected() {
    let drafts = vec![draft("a", Level::L2, &[]), draft("a", Level::L2, &[])];
    assert!(matches!(ContextStore::from_drafts(drafts, 1, &embedder(), None), Err(StoreError::DuplicateId(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_stores_satisfy_invariants_and_round_trip(corpus in corpus_strategy(60)) {
        let store = corpus.store();
        prop_assert!(store.validate().is_ok());
        for e in store.entries() {
            prop_assert!((e.embedding.norm() - 1.0).abs() < 1e-9);
            prop_assert_eq!(e.word_count, brute_word_count(&e.body));
            if e.level == Level::L3 {
                prop_assert!(store.entries_at(Some(Level::L2), None).iter().any(|l2| l2.refs.contains(&e.id)));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_store(&store, dir.path()).unwrap();
        prop_assert_eq!(load_store(dir.path(), &embedder()).unwrap(), store);
    }
}
