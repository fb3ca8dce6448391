#![allow(dead_code)]

use std::cmp::Ordering;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use proptest::prelude::*;
use saycomply::episode::LogicalClock;
use saycomply::llm::{load_rules, ScriptedRule};
use saycomply::store::{load_store, Category, ContextStore, EntryDraft, Level};
use saycomply::{EpisodeRuntime, HashedEmbedder, LlmGateway, TemplateSet, WorldModel};

pub const EXTINGUISHER_QUERY: &str = "check the pressure of the fire extinguishers on floor 3";

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn embedder() -> HashedEmbedder {
    HashedEmbedder::default()
}

pub fn f1() -> ContextStore {
    load_store(&fixture("corpus-f1"), &embedder()).expect("F1 loads")
}

pub fn f2() -> ContextStore {
    load_store(&fixture("corpus-f2"), &embedder()).expect("F2 loads")
}

pub fn w1() -> WorldModel {
    WorldModel::load(&fixture("world-w1.json")).expect("W1 loads")
}

pub fn rules(name: &str) -> Vec<ScriptedRule> {
    load_rules(&fixture(name)).expect("rules load")
}

pub fn gateway(name: &str) -> LlmGateway {
    LlmGateway::scripted(rules(name)).expect("valid rules")
}

pub fn none_selector() -> LlmGateway {
    LlmGateway::scripted(vec![ScriptedRule {
        matchers: vec!["[L1 CATALOG]".into()],
        completion: "NONE".into(),
        max_uses: None,
    }])
    .unwrap()
}

pub fn runtime(rules_file: &str) -> (EpisodeRuntime, Arc<LlmGateway>) {
    let llm = Arc::new(gateway(rules_file));
    let rt = EpisodeRuntime::new(
        Arc::new(embedder()),
        llm.clone(),
        Arc::new(TemplateSet::builtin()),
        Arc::new(LogicalClock::default()),
    );
    (rt, llm)
}

pub fn locked(store: ContextStore) -> RwLock<ContextStore> {
    RwLock::new(store)
}

// Independent reimplementation of the hashed bag-of-words counts. Scores are
// compared in exact integer arithmetic, so the oracle has no float ties.

const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;
const SEED: u64 = 0x5a79_c0de_2024_0001;
const DIM: u64 = 256;

pub fn oracle_counts(text: &str) -> Vec<u64> {
    let mut counts = vec![0u64; DIM as usize];
    let mut token = String::new();
    let flush = |token: &mut String, counts: &mut Vec<u64>| {
        if !token.is_empty() {
            let mut h = OFFSET ^ SEED;
            for b in token.to_lowercase().bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
            counts[(h % DIM) as usize] += 1;
            token.clear();
        }
    };
    for c in text.chars() {
        if c.is_alphanumeric() {
            token.push(c);
        } else {
            flush(&mut token, &mut counts);
        }
    }
    flush(&mut token, &mut counts);
    counts
}

#[derive(Debug, Clone)]
pub struct OracleDoc {
    pub id: String,
    pub dot: u128,
    pub norm_sq: u128,
}

impl OracleDoc {
    pub fn new(id: &str, query: &[u64], text: &str) -> Self {
        let c = oracle_counts(text);
        let dot = query.iter().zip(&c).map(|(a, b)| u128::from(a * b)).sum();
        let norm_sq = c.iter().map(|v| u128::from(v * v)).sum();
        Self { id: id.to_string(), dot, norm_sq }
    }

    /// Compares dot_a/sqrt(n_a) with dot_b/sqrt(n_b) by cross-multiplying squares.
    pub fn cmp_score(&self, other: &Self) -> Ordering {
        (self.dot * self.dot * other.norm_sq).cmp(&(other.dot * other.dot * self.norm_sq))
    }
}

pub fn entry_text(title: &str, summary: &str, body: &str) -> String {
    format!("{title}\n{summary}\n{body}")
}

/// Brute-force ranking of the store entries that pass `filter`.
pub fn oracle_rank(store: &ContextStore, query: &str, filter: impl Fn(&saycomply::ContextEntry) -> bool) -> Vec<String> {
    let q = oracle_counts(query);
    let mut docs: Vec<OracleDoc> = store
        .entries()
        .filter(|e| filter(e))
        .map(|e| OracleDoc::new(&e.id, &q, &entry_text(&e.title, &e.summary, &e.body)))
        .collect();
    for i in 1..docs.len() {
        let mut j = i;
        while j > 0 {
            let ord = docs[j].cmp_score(&docs[j - 1]).then_with(|| docs[j - 1].id.cmp(&docs[j].id));
            if ord == Ordering::Greater {
                docs.swap(j, j - 1);
                j -= 1;
            } else {
                break;
            }
        }
    }
    docs.into_iter().map(|d| d.id).collect()
}

/// Oracle for the tree selection before budgeting: top-2 level-2 entries plus
/// the single most similar level-3 entry they point to.
pub fn oracle_tree(store: &ContextStore, query: &str) -> (Vec<String>, Option<String>) {
    let l2: Vec<String> = oracle_rank(store, query, |e| e.level == Level::L2).into_iter().take(2).collect();
    let pointed: Vec<String> = l2.iter().flat_map(|id| store.get(id).unwrap().refs.clone()).collect();
    let l3 = oracle_rank(store, query, |e| e.level == Level::L3 && pointed.contains(&e.id)).into_iter().next();
    (l2, l3)
}

pub fn brute_word_count(text: &str) -> usize {
    text.split(char::is_whitespace).filter(|w| !w.is_empty()).count()
}

// Random corpora.

const VOCAB: &[&str] = &[
    "pump", "valve", "gauge", "pressure", "boiler", "floor", "hall", "stairs", "robot", "scan", "photo", "read",
    "manual", "inspect", "fire", "extinguisher", "door", "sealed", "gas", "zone", "permit", "log", "kitchen",
    "coffee", "server", "rack", "camera", "thermal", "battery", "dock", "route", "corridor", "the", "of", "and",
    "must", "never", "weekly", "daily", "report",
];

fn words(min: usize, max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(VOCAB), min..=max).prop_map(|w| w.join(" "))
}

fn body() -> impl Strategy<Value = String> {
    prop::collection::vec(words(3, 40), 1..=5).prop_map(|p| p.join("\n\n"))
}

#[derive(Debug, Clone)]
pub struct RandomCorpus {
    pub drafts: Vec<EntryDraft>,
    pub query: String,
}

impl RandomCorpus {
    pub fn store(&self) -> ContextStore {
        ContextStore::from_drafts(self.drafts.clone(), 1, &embedder(), None).expect("generated corpus is valid")
    }
}

/// Valid corpora of at most `max_entries` entries with at least one level-2 entry.
pub fn corpus_strategy(max_entries: usize) -> impl Strategy<Value = RandomCorpus> {
    let max2 = (max_entries / 2).max(1);
    let max3 = max_entries / 4;
    (1..=max2, 0..=max3)
        .prop_flat_map(move |(n2, n3)| {
            let n1_max = max_entries - n2 - n3;
            (Just(n2), Just(n3), 0..=n1_max.min(max_entries / 4))
        })
        .prop_flat_map(|(n2, n3, n1)| {
            let n = n2 + n3 + n1;
            (
                Just((n2, n3, n1)),
                prop::collection::vec((words(1, 5), words(2, 10), body(), 0u8..3, prop::bool::weighted(0.1)), n),
                prop::collection::vec(prop::collection::vec(0..n3.max(1), 0..=3), n2),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
                words(1, 12),
            )
        })
        .prop_map(|((n2, n3, _n1), mut docs, refs, ids, query)| {
            let level_of = |i: usize| {
                if i < n2 {
                    Level::L2
                } else if i < n2 + n3 {
                    Level::L3
                } else {
                    Level::L1
                }
            };
            for i in 1..docs.len() {
                if docs[i].4 && level_of(i) == level_of(i - 1) {
                    docs[i].0 = docs[i - 1].0.clone();
                    docs[i].1 = docs[i - 1].1.clone();
                    docs[i].2 = docs[i - 1].2.clone();
                }
            }
            let id = |i: usize| format!("doc-{:03}", ids[i]);
            let mut l2_refs: Vec<Vec<String>> = refs
                .iter()
                .map(|r| {
                    let mut v: Vec<String> = if n3 == 0 { Vec::new() } else { r.iter().map(|j| id(n2 + j)).collect() };
                    v.sort();
                    v.dedup();
                    v
                })
                .collect();
            for j in 0..n3 {
                let target = id(n2 + j);
                if !l2_refs.iter().any(|r| r.contains(&target)) {
                    l2_refs[j % n2].push(target);
                }
            }
            let drafts = docs
                .into_iter()
                .enumerate()
                .map(|(i, (title, summary, body, cat, _))| EntryDraft {
                    id: id(i),
                    level: level_of(i),
                    category: [Category::Environment, Category::Operation, Category::Embodiment][cat as usize],
                    title,
                    summary: Some(summary),
                    body,
                    refs: if i < n2 { l2_refs[i].clone() } else { Vec::new() },
                })
                .collect();
            RandomCorpus { drafts, query }
        })
}

pub fn s1_cases() -> Vec<saycomply::eval::EvalCase> {
    saycomply::eval::load_suite(&fixture("suite-s1.json")).expect("S1 loads")
}

/// Runs `cases` on F2/W1 under `method` with the S1 rules.
pub fn run_s1(cases: &[saycomply::eval::EvalCase], method: saycomply::RetrievalMethod) -> saycomply::eval::SuiteRun {
    let store = f2();
    let world = w1();
    let llm = saycomply::eval::LlmSource::Scripted(rules("rules-s1.json"));
    let ctx = saycomply::eval::SuiteContext {
        store: &store,
        world: &world,
        embedder: Arc::new(embedder()),
        templates: Arc::new(TemplateSet::builtin()),
        llm: &llm,
    };
    let config = saycomply::EpisodeConfig { method, ..Default::default() };
    saycomply::eval::run_suite(cases, method, &config, &ctx).expect("suite runs")
}
