//! Budgeted context retrieval.
//!
//! [`retrieve_tree`] ranks level-2 instructions by cosine similarity, follows
//! the references of the top two into level 3 and keeps the single manual
//! closest to the query, then asks the LLM to pick level-1 databases from a
//! catalog. [`retrieve_topk_flat`] and [`retrieve_env_only`] are the flat
//! baselines. Every result satisfies `total_words <= budget`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, EmbedError, Embedder, Embedding};
use crate::llm::{ChatRequest, LlmError, LlmGateway, RequestTag, TemplateSet, L1_SELECT_TEMPLATE};
use crate::store::{word_count, Category, ContextEntry, ContextStore, Level};

pub const DEFAULT_BUDGET: usize = 4000;
pub const MIN_TREE_BUDGET: usize = 200;
pub const DEFAULT_TOP_K: usize = 3;
pub const LEVEL2_FANOUT: usize = 2;
/// Scores closer than this count as tied, so summation noise cannot
/// override the id tie-break.
pub const SCORE_TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("the store has no level-2 entries")]
    NoLevel2Context,
    #[error("the selected level-2 entries need {needed} words but the budget is {budget}")]
    BudgetTooSmall { needed: usize, budget: usize },
    #[error("budget {budget} is below the minimum of {min}")]
    InvalidBudget { budget: usize, min: usize },
    #[error("the store is empty")]
    EmptyStore,
    #[error("embedding the query: {0}")]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RetrievalMethod {
    #[serde(rename = "tree")]
    Tree,
    #[serde(rename = "top3")]
    TopKFlat,
    #[serde(rename = "env")]
    EnvOnly,
}

impl RetrievalMethod {
    pub const ALL: [Self; 3] = [Self::EnvOnly, Self::TopKFlat, Self::Tree];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tree => "tree",
            Self::TopKFlat => "top3",
            Self::EnvOnly => "env",
        }
    }

    /// Row label used in evaluation reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::Tree => "Tree RAG",
            Self::TopKFlat => "Top-3 RAG",
            Self::EnvOnly => "Env-Grounding",
        }
    }
}

impl fmt::Display for RetrievalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tree" => Ok(Self::Tree),
            "top3" | "topk" | "flat" => Ok(Self::TopKFlat),
            "env" | "env-only" => Ok(Self::EnvOnly),
            other => Err(format!("unknown retrieval method '{other}' (expected tree|top3|env)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    Similarity { score: f64 },
    LlmSelected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub id: String,
    pub level: Level,
    pub category: Category,
    pub title: String,
    pub selection: Selection,
    pub included_words: usize,
    pub truncated: bool,
    /// The body text handed to the planner, possibly cut at a paragraph boundary.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub method: RetrievalMethod,
    pub budget: usize,
    pub total_words: usize,
    pub items: Vec<RetrievedItem>,
}

impl RetrievedContext {
    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.items.iter().any(|i| i.id == id)
    }

    /// Checks the budget, sum and uniqueness invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let sum: usize = self.items.iter().map(|i| i.included_words).sum();
        if sum != self.total_words {
            return Err(format!("total_words {} != sum {sum}", self.total_words));
        }
        if self.total_words > self.budget {
            return Err(format!("total_words {} > budget {}", self.total_words, self.budget));
        }
        let unique: BTreeSet<&str> = self.ids().into_iter().collect();
        if unique.len() != self.items.len() {
            return Err("duplicate ids".into());
        }
        if let Some(item) = self.items.iter().find(|i| word_count(&i.text) != i.included_words) {
            return Err(format!("item '{}' word count mismatch", item.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub title: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum TruncationEvent {
    Truncated { id: String, from_words: usize, to_words: usize },
    Dropped { id: String, words: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub query_digest: String,
    /// Every candidate ranked by similarity, descending. For tree retrieval
    /// this is the level-2 tier, for the baselines the filtered store.
    pub ranking: Vec<ScoredId>,
    pub level3_candidates: Vec<ScoredId>,
    pub level3_chosen: Option<String>,
    pub level1_catalog: Vec<CatalogEntry>,
    pub level1_selected: Vec<String>,
    pub truncations: Vec<TruncationEvent>,
    pub warnings: Vec<String>,
}

/// Similarity of every entry to `query`, descending score, ties by ascending id.
pub fn rank_entries<'a>(
    query: &Embedding,
    entries: impl IntoIterator<Item = &'a ContextEntry>,
) -> Result<Vec<(&'a ContextEntry, f64)>, RetrievalError> {
    let mut scored = entries
        .into_iter()
        .map(|e| Ok((e, cosine_similarity(query, &e.embedding)?)))
        .collect::<Result<Vec<_>, EmbedError>>()?;
    scored.sort_by(|(a, sa), (b, sb)| sb.total_cmp(sa).then_with(|| a.id.cmp(&b.id)));
    let mut start = 0;
    while start < scored.len() {
        let mut end = start + 1;
        while end < scored.len() && scored[end - 1].1 - scored[end].1 <= SCORE_TIE_EPSILON {
            end += 1;
        }
        scored[start..end].sort_by(|(a, _), (b, _)| a.id.cmp(&b.id));
        start = end;
    }
    Ok(scored)
}

fn scored_ids(ranked: &[(&ContextEntry, f64)]) -> Vec<ScoredId> {
    ranked.iter().map(|(e, s)| ScoredId { id: e.id.clone(), score: *s }).collect()
}

/// Paragraphs are separated by one or more blank lines.
pub fn paragraphs(body: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in body.split_inclusive('\n') {
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                out.push(&body[s..end]);
            }
        } else {
            if start.is_none() {
                start = Some(offset);
            }
            end = offset + line.trim_end().len();
        }
        offset += line.len();
    }
    if let Some(s) = start {
        out.push(&body[s..end]);
    }
    out
}

/// Leading whole paragraphs of `body` whose word total fits `max_words`.
pub fn truncate_paragraphs(body: &str, max_words: usize) -> (String, usize) {
    let mut kept = Vec::new();
    let mut words = 0;
    for p in paragraphs(body) {
        let w = word_count(p);
        if words + w > max_words {
            break;
        }
        words += w;
        kept.push(p);
    }
    (kept.join("\n\n"), words)
}

fn full_item(entry: &ContextEntry, selection: Selection) -> RetrievedItem {
    RetrievedItem {
        id: entry.id.clone(),
        level: entry.level,
        category: entry.category,
        title: entry.title.clone(),
        selection,
        included_words: entry.word_count,
        truncated: false,
        text: entry.body.clone(),
    }
}

/// Cuts `item` down to at most `max_words`. Returns false when not even the
/// first paragraph fits.
fn shrink_item(item: &mut RetrievedItem, max_words: usize, trace: &mut RetrievalTrace) -> bool {
    let (text, words) = truncate_paragraphs(&item.text, max_words);
    if words == 0 {
        return false;
    }
    trace.truncations.push(TruncationEvent::Truncated {
        id: item.id.clone(),
        from_words: item.included_words,
        to_words: words,
    });
    item.text = text;
    item.included_words = words;
    item.truncated = true;
    true
}

fn finish(method: RetrievalMethod, budget: usize, items: Vec<RetrievedItem>) -> RetrievedContext {
    let total_words = items.iter().map(|i| i.included_words).sum();
    RetrievedContext { method, budget, total_words, items }
}

/// Level-1 databases chosen by the LLM, with the catalog it was shown.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Level1Selection {
    pub catalog: Vec<CatalogEntry>,
    pub selected: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn select_level1(
    query: &str,
    store: &ContextStore,
    llm: &LlmGateway,
    templates: &TemplateSet,
) -> Result<Level1Selection, RetrievalError> {
    let catalog: Vec<CatalogEntry> = store
        .entries_at(Some(Level::L1), None)
        .into_iter()
        .map(|e| CatalogEntry { id: e.id.clone(), title: e.title.clone(), summary: e.summary.clone() })
        .collect();
    if catalog.is_empty() {
        return Ok(Level1Selection::default());
    }
    let listing = catalog
        .iter()
        .map(|c| format!("- {} | {} | {}", c.id, c.title, c.summary))
        .collect::<Vec<_>>()
        .join("\n");
    let slots: BTreeMap<&str, String> = [("query", query.to_string()), ("catalog", listing)].into_iter().collect();
    let prompt = templates
        .render(L1_SELECT_TEMPLATE, &slots)
        .map_err(|e| LlmError::InvalidRequest(e.to_string()))?;
    let request = ChatRequest::new(RequestTag::L1Select, templates.system(), prompt, 200);
    let completion = llm.complete(&request)?;

    let known: BTreeSet<&str> = catalog.iter().map(|c| c.id.as_str()).collect();
    let mut selected: Vec<String> = Vec::new();
    let mut warnings = Vec::new();
    for raw in completion.split([',', '\n']) {
        let id = raw.trim().trim_start_matches(['-', '*']).trim();
        if id.is_empty() || id.eq_ignore_ascii_case("none") {
            continue;
        }
        if !known.contains(id) {
            warnings.push(format!("level-1 selection named unknown id '{id}'"));
        } else if !selected.iter().any(|s| s == id) {
            selected.push(id.to_string());
        }
    }
    Ok(Level1Selection { catalog, selected, warnings })
}

pub fn retrieve_tree(
    query: &str,
    store: &ContextStore,
    budget: usize,
    embedder: &dyn Embedder,
    llm: &LlmGateway,
    templates: &TemplateSet,
) -> Result<(RetrievedContext, RetrievalTrace), RetrievalError> {
    if budget < MIN_TREE_BUDGET {
        return Err(RetrievalError::InvalidBudget { budget, min: MIN_TREE_BUDGET });
    }
    let level2 = store.entries_at(Some(Level::L2), None);
    if level2.is_empty() {
        return Err(RetrievalError::NoLevel2Context);
    }
    let q = embedder.embed(query)?;
    let mut trace = RetrievalTrace { query_digest: q.digest(), ..Default::default() };

    let ranked2 = rank_entries(&q, level2)?;
    trace.ranking = scored_ids(&ranked2);
    let top2: Vec<(&ContextEntry, f64)> = ranked2.into_iter().take(LEVEL2_FANOUT).collect();

    let pointed: BTreeSet<&str> = top2.iter().flat_map(|(e, _)| e.refs.iter().map(String::as_str)).collect();
    let candidates = pointed.iter().filter_map(|id| store.get(id)).filter(|e| e.level == Level::L3);
    let ranked3 = rank_entries(&q, candidates)?;
    trace.level3_candidates = scored_ids(&ranked3);
    let chosen3 = ranked3.first().copied();
    trace.level3_chosen = chosen3.map(|(e, _)| e.id.clone());

    let l1 = select_level1(query, store, llm, templates)?;
    trace.level1_catalog = l1.catalog;
    trace.level1_selected = l1.selected.clone();
    trace.warnings.extend(l1.warnings);

    let mut items: Vec<RetrievedItem> =
        top2.iter().map(|(e, s)| full_item(e, Selection::Similarity { score: *s })).collect();
    let needed: usize = items.iter().map(|i| i.included_words).sum();
    if needed > budget {
        return Err(RetrievalError::BudgetTooSmall { needed, budget });
    }
    let mut used = needed;

    if let Some((entry, score)) = chosen3 {
        let mut item = full_item(entry, Selection::Similarity { score });
        let room = budget - used;
        if item.included_words <= room || shrink_item(&mut item, room, &mut trace) {
            used += item.included_words;
            items.push(item);
        } else {
            trace.truncations.push(TruncationEvent::Dropped { id: item.id, words: item.included_words });
        }
    }

    let mut level1_items: Vec<RetrievedItem> = l1
        .selected
        .iter()
        .filter_map(|id| store.get(id))
        .map(|e| full_item(e, Selection::LlmSelected))
        .collect();
    let mut l1_words: usize = level1_items.iter().map(|i| i.included_words).sum();
    while used + l1_words > budget {
        let dropped = level1_items.pop().expect("nonempty while over budget");
        l1_words -= dropped.included_words;
        trace.truncations.push(TruncationEvent::Dropped { id: dropped.id, words: dropped.included_words });
    }
    items.extend(level1_items);

    Ok((finish(RetrievalMethod::Tree, budget, items), trace))
}

/// Fits a ranked list into `budget`: the largest item is cut at a paragraph
/// boundary first; if that cannot help, the lowest-ranked item is dropped and
/// the procedure repeats.
fn enforce_flat_budget(items: &mut Vec<RetrievedItem>, budget: usize, trace: &mut RetrievalTrace) {
    loop {
        let total: usize = items.iter().map(|i| i.included_words).sum();
        if total <= budget || items.is_empty() {
            return;
        }
        let largest = items
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.included_words.cmp(&b.included_words).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("nonempty");
        let others = total - items[largest].included_words;
        if others <= budget && shrink_item(&mut items[largest], budget - others, trace) {
            return;
        }
        let dropped = items.pop().expect("nonempty");
        trace.truncations.push(TruncationEvent::Dropped { id: dropped.id, words: dropped.included_words });
    }
}

fn retrieve_ranked(
    method: RetrievalMethod,
    query: &str,
    candidates: Vec<&ContextEntry>,
    k: usize,
    budget: usize,
    embedder: &dyn Embedder,
) -> Result<(RetrievedContext, RetrievalTrace), RetrievalError> {
    if budget == 0 {
        return Err(RetrievalError::InvalidBudget { budget, min: 1 });
    }
    let q = embedder.embed(query)?;
    let mut trace = RetrievalTrace { query_digest: q.digest(), ..Default::default() };
    let ranked = rank_entries(&q, candidates)?;
    trace.ranking = scored_ids(&ranked);
    let mut items: Vec<RetrievedItem> = ranked
        .into_iter()
        .take(k)
        .map(|(e, s)| full_item(e, Selection::Similarity { score: s }))
        .collect();
    enforce_flat_budget(&mut items, budget, &mut trace);
    Ok((finish(method, budget, items), trace))
}

pub fn retrieve_topk_flat(
    query: &str,
    store: &ContextStore,
    k: usize,
    budget: usize,
    embedder: &dyn Embedder,
) -> Result<(RetrievedContext, RetrievalTrace), RetrievalError> {
    if store.is_empty() {
        return Err(RetrievalError::EmptyStore);
    }
    retrieve_ranked(RetrievalMethod::TopKFlat, query, store.entries().collect(), k, budget, embedder)
}

pub fn retrieve_env_only(
    query: &str,
    store: &ContextStore,
    budget: usize,
    embedder: &dyn Embedder,
) -> Result<(RetrievedContext, RetrievalTrace), RetrievalError> {
    let env = store.entries_at(None, Some(Category::Environment));
    let k = env.len();
    retrieve_ranked(RetrievalMethod::EnvOnly, query, env, k, budget, embedder)
}

/// Everything a retrieval needs besides the query and the store.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub embedder: &'a dyn Embedder,
    pub llm: &'a LlmGateway,
    pub templates: &'a TemplateSet,
    pub budget: usize,
    pub top_k: usize,
}

impl Retriever<'_> {
    pub fn retrieve(
        &self,
        method: RetrievalMethod,
        query: &str,
        store: &ContextStore,
    ) -> Result<(RetrievedContext, RetrievalTrace), RetrievalError> {
        match method {
            RetrievalMethod::Tree => retrieve_tree(query, store, self.budget, self.embedder, self.llm, self.templates),
            RetrievalMethod::TopKFlat => retrieve_topk_flat(query, store, self.top_k, self.budget, self.embedder),
            RetrievalMethod::EnvOnly => retrieve_env_only(query, store, self.budget, self.embedder),
        }
    }
}
