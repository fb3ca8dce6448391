//! Hierarchical context database.
//!
//! A corpus on disk is a directory with `manifest.json` and one
//! `entries/<id>.md` file per entry. Each entry file starts with a
//! `---`-delimited front-matter block (`id`, `level`, `category`, `title`,
//! `summary`, `refs`) followed by the body text.
//!
//! Level 1 holds observation databases and robot logs, level 2 short
//! site-specific instructions, level 3 full manuals. Every level-3 entry must
//! be referenced by at least one level-2 entry.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, Embedder, Embedding};
use crate::llm::{ChatRequest, LlmError, LlmGateway, RequestTag, TemplateSet, SUMMARIZE_TEMPLATE};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corpus format error: {0}")]
    CorpusFormat(String),
    #[error("dangling reference to '{0}'")]
    DanglingRef(String),
    #[error("level-3 entry '{0}' is not referenced by any level-2 entry")]
    OrphanLevel3(String),
    #[error("duplicate entry id '{0}'")]
    DuplicateId(String),
    #[error("entry '{0}' has an empty body")]
    EmptyBody(String),
    #[error("entry '{0}' has no summary and no llm is available to generate one")]
    MissingSummary(String),
    #[error("unknown entry '{0}'")]
    UnknownEntry(String),
    #[error("entry '{id}' is level {actual}, expected level {expected}")]
    WrongLevel { id: String, expected: Level, actual: Level },
    #[error("invalid observation row: {0}")]
    InvalidRow(String),
    #[error("embedding entry '{id}': {source}")]
    Embed { id: String, source: EmbedError },
    #[error("summarizing entry '{id}': {source}")]
    Llm { id: String, source: LlmError },
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "3")]
    L3,
}

impl Level {
    pub fn number(self) -> u8 {
        match self {
            Self::L1 => 1,
            Self::L2 => 2,
            Self::L3 => 3,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().trim_start_matches(['L', 'l']) {
            "1" => Ok(Self::L1),
            "2" => Ok(Self::L2),
            "3" => Ok(Self::L3),
            other => Err(format!("invalid level '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Environment,
    Operation,
    Embodiment,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Environment => "environment",
            Self::Operation => "operation",
            Self::Embodiment => "embodiment",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "environment" => Ok(Self::Environment),
            "operation" => Ok(Self::Operation),
            "embodiment" => Ok(Self::Embodiment),
            other => Err(format!("invalid category '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub id: String,
    pub category: Category,
    pub level: Level,
    pub title: String,
    pub summary: String,
    pub body: String,
    pub refs: Vec<String>,
    pub embedding: Embedding,
    pub word_count: usize,
}

impl ContextEntry {
    /// The text the embedding is computed over.
    pub fn embedding_text(title: &str, summary: &str, body: &str) -> String {
        format!("{title}\n{summary}\n{body}")
    }
}

/// An entry before its embedding and word count are derived.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryDraft {
    pub id: String,
    pub category: Category,
    pub level: Level,
    pub title: String,
    pub summary: Option<String>,
    pub body: String,
    pub refs: Vec<String>,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lowercase kebab-case: `[a-z0-9]+(-[a-z0-9]+)*`.
pub fn is_kebab_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .split('-')
            .all(|part| !part.is_empty() && part.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()))
}

fn finish_entry(draft: EntryDraft, summary: String, embedder: &dyn Embedder) -> Result<ContextEntry, StoreError> {
    let text = ContextEntry::embedding_text(&draft.title, &summary, &draft.body);
    let embedding = embedder
        .embed(&text)
        .map_err(|source| StoreError::Embed { id: draft.id.clone(), source })?;
    Ok(ContextEntry {
        word_count: word_count(&draft.body),
        id: draft.id,
        category: draft.category,
        level: draft.level,
        title: draft.title,
        summary,
        body: draft.body,
        refs: draft.refs,
        embedding,
    })
}

/// LLM access used to fill in missing level-1 summaries at ingest.
#[derive(Clone, Copy)]
pub struct SummaryGenerator<'a> {
    pub llm: &'a LlmGateway,
    pub templates: &'a TemplateSet,
}

impl SummaryGenerator<'_> {
    fn summarize(&self, draft: &EntryDraft) -> Result<String, StoreError> {
        let llm_err = |source| StoreError::Llm { id: draft.id.clone(), source };
        let slots = [("title", draft.title.clone()), ("body", draft.body.clone())].into_iter().collect();
        let prompt = self
            .templates
            .render(SUMMARIZE_TEMPLATE, &slots)
            .map_err(|e| llm_err(LlmError::InvalidRequest(e.to_string())))?;
        let request = ChatRequest::new(RequestTag::Summarize, self.templates.system(), prompt, 60);
        let completion = self.llm.complete(&request).map_err(llm_err)?;
        let sentence = completion.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
        if sentence.is_empty() {
            return Err(StoreError::MissingSummary(draft.id.clone()));
        }
        Ok(sentence.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u64,
    entries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextStore {
    entries: BTreeMap<String, ContextEntry>,
    version: u64,
}

impl ContextStore {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new(), version: 1 }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ContextEntry> {
        self.entries.get(id)
    }

    /// All entries in ascending id order.
    pub fn entries(&self) -> impl Iterator<Item = &ContextEntry> {
        self.entries.values()
    }

    /// Entries matching both filters, ascending id.
    pub fn entries_at(&self, level: Option<Level>, category: Option<Category>) -> Vec<&ContextEntry> {
        self.entries
            .values()
            .filter(|e| level.is_none_or(|l| e.level == l))
            .filter(|e| category.is_none_or(|c| e.category == c))
            .collect()
    }

    /// Builds a validated store from drafts. Missing level-1 summaries are
    /// generated with `summaries` when given.
    pub fn from_drafts(
        drafts: Vec<EntryDraft>,
        version: u64,
        embedder: &dyn Embedder,
        summaries: Option<SummaryGenerator<'_>>,
    ) -> Result<Self, StoreError> {
        check_drafts(&drafts)?;
        let mut entries = BTreeMap::new();
        for draft in drafts {
            let summary = match draft.summary.clone() {
                Some(s) => s,
                None => match (draft.level, summaries) {
                    (Level::L1, Some(generator)) => generator.summarize(&draft)?,
                    _ => return Err(StoreError::MissingSummary(draft.id)),
                },
            };
            let entry = finish_entry(draft, summary, embedder)?;
            entries.insert(entry.id.clone(), entry);
        }
        Ok(Self { entries, version })
    }

    /// Re-checks every structural invariant. Returns the first violation.
    pub fn validate(&self) -> Result<(), StoreError> {
        let drafts: Vec<EntryDraft> = self.entries.values().map(to_draft).collect();
        check_drafts(&drafts)?;
        for e in self.entries.values() {
            if (e.embedding.norm() - 1.0).abs() > 1e-9 {
                return Err(StoreError::CorpusFormat(format!("entry '{}' embedding is not unit length", e.id)));
            }
            if e.word_count != word_count(&e.body) {
                return Err(StoreError::CorpusFormat(format!("entry '{}' word count is stale", e.id)));
            }
            if e.summary.trim().is_empty() {
                return Err(StoreError::MissingSummary(e.id.clone()));
            }
        }
        Ok(())
    }

    /// Appends one line to a level-1 entry and recomputes its derived fields.
    pub fn append_observation(&mut self, l1_id: &str, row: &str, embedder: &dyn Embedder) -> Result<(), StoreError> {
        let row = row.trim();
        if row.is_empty() || row.contains('\n') {
            return Err(StoreError::InvalidRow(format!("{row:?} must be a single nonempty line")));
        }
        let entry = self.entries.get(l1_id).ok_or_else(|| StoreError::UnknownEntry(l1_id.to_string()))?;
        if entry.level != Level::L1 {
            return Err(StoreError::WrongLevel { id: l1_id.to_string(), expected: Level::L1, actual: entry.level });
        }
        let mut draft = to_draft(entry);
        let summary = entry.summary.clone();
        draft.body.push('\n');
        draft.body.push_str(row);
        let updated = finish_entry(draft, summary, embedder)?;
        self.entries.insert(l1_id.to_string(), updated);
        self.version += 1;
        Ok(())
    }

    /// Adds a new entry. Level-3 entries are rejected because nothing can
    /// reference them yet.
    pub fn insert_entry(&mut self, draft: EntryDraft, embedder: &dyn Embedder) -> Result<(), StoreError> {
        if self.entries.contains_key(&draft.id) {
            return Err(StoreError::DuplicateId(draft.id));
        }
        if draft.level == Level::L3 {
            return Err(StoreError::OrphanLevel3(draft.id));
        }
        let mut drafts: Vec<EntryDraft> = self.entries.values().map(to_draft).collect();
        drafts.push(draft.clone());
        check_drafts(&drafts)?;
        let summary = draft.summary.clone().ok_or_else(|| StoreError::MissingSummary(draft.id.clone()))?;
        let entry = finish_entry(draft, summary, embedder)?;
        self.entries.insert(entry.id.clone(), entry);
        self.version += 1;
        Ok(())
    }
}

fn to_draft(e: &ContextEntry) -> EntryDraft {
    EntryDraft {
        id: e.id.clone(),
        category: e.category,
        level: e.level,
        title: e.title.clone(),
        summary: Some(e.summary.clone()),
        body: e.body.clone(),
        refs: e.refs.clone(),
    }
}

fn check_drafts(drafts: &[EntryDraft]) -> Result<(), StoreError> {
    let mut levels = BTreeMap::new();
    for d in drafts {
        if !is_kebab_id(&d.id) {
            return Err(StoreError::CorpusFormat(format!("id '{}' is not lowercase kebab-case", d.id)));
        }
        if levels.insert(d.id.as_str(), d.level).is_some() {
            return Err(StoreError::DuplicateId(d.id.clone()));
        }
        if d.title.trim().is_empty() || d.title.contains('\n') {
            return Err(StoreError::CorpusFormat(format!("entry '{}' needs a single-line title", d.id)));
        }
        if let Some(s) = &d.summary {
            if s.trim().is_empty() || s.contains('\n') {
                return Err(StoreError::CorpusFormat(format!("entry '{}' needs a single-line summary", d.id)));
            }
        }
        if d.body.trim().is_empty() {
            return Err(StoreError::EmptyBody(d.id.clone()));
        }
        if d.level != Level::L2 && !d.refs.is_empty() {
            return Err(StoreError::CorpusFormat(format!("entry '{}' has refs but is not level 2", d.id)));
        }
    }
    let mut referenced = BTreeSet::new();
    for d in drafts {
        for r in &d.refs {
            match levels.get(r.as_str()) {
                None => return Err(StoreError::DanglingRef(r.clone())),
                Some(Level::L3) => {
                    referenced.insert(r.as_str());
                }
                Some(other) => {
                    return Err(StoreError::CorpusFormat(format!(
                        "entry '{}' refs '{r}' which is level {other}, not 3",
                        d.id
                    )))
                }
            }
        }
    }
    if let Some(orphan) = drafts.iter().find(|d| d.level == Level::L3 && !referenced.contains(d.id.as_str())) {
        return Err(StoreError::OrphanLevel3(orphan.id.clone()));
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

fn entry_path(root: &Path, id: &str) -> PathBuf {
    root.join("entries").join(format!("{id}.md"))
}

/// Parses one entry file.
pub fn parse_entry_file(text: &str) -> Result<EntryDraft, String> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut lines = text.split_inclusive('\n');
    match lines.next() {
        Some(first) if first.trim_end() == "---" => {}
        _ => return Err("missing opening '---' front-matter delimiter".into()),
    }
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut consumed = text.find('\n').map_or(text.len(), |i| i + 1);
    let mut closed = false;
    for line in lines.by_ref() {
        consumed += line.len();
        let trimmed = line.trim_end();
        if trimmed == "---" {
            closed = true;
            break;
        }
        if trimmed.trim().is_empty() {
            continue;
        }
        let (key, value) = trimmed
            .split_once(':')
            .ok_or_else(|| format!("front-matter line {trimmed:?} is not 'key: value'"))?;
        let key = key.trim().to_string();
        if !["id", "level", "category", "title", "summary", "refs"].contains(&key.as_str()) {
            return Err(format!("unknown front-matter key '{key}'"));
        }
        if fields.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(format!("front-matter key '{key}' repeated"));
        }
    }
    if !closed {
        return Err("missing closing '---' front-matter delimiter".into());
    }
    let body = text[consumed..].trim_start_matches(['\n', '\r']).trim_end().to_string();
    let take = |k: &str| fields.get(k).cloned().ok_or_else(|| format!("missing front-matter key '{k}'"));
    let refs = fields
        .get("refs")
        .map(|r| r.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
        .unwrap_or_default();
    Ok(EntryDraft {
        id: take("id")?,
        level: take("level")?.parse()?,
        category: take("category")?.parse()?,
        title: take("title")?,
        summary: fields.get("summary").filter(|s| !s.is_empty()).cloned(),
        body,
        refs,
    })
}

pub fn render_entry_file(entry: &ContextEntry) -> String {
    let mut out = format!(
        "---\nid: {}\nlevel: {}\ncategory: {}\ntitle: {}\nsummary: {}\n",
        entry.id, entry.level, entry.category, entry.title, entry.summary
    );
    if !entry.refs.is_empty() {
        out.push_str(&format!("refs: {}\n", entry.refs.join(", ")));
    }
    out.push_str("---\n");
    out.push_str(&entry.body);
    out.push('\n');
    out
}

fn read_corpus(root: &Path) -> Result<(u64, Vec<EntryDraft>), StoreError> {
    let manifest_path = root.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(StoreError::CorpusFormat(format!("{} not found", manifest_path.display())));
    }
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| StoreError::CorpusFormat(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version == 0 {
        return Err(StoreError::CorpusFormat("manifest version must be at least 1".into()));
    }
    let mut seen = BTreeSet::new();
    let mut drafts = Vec::with_capacity(manifest.entries.len());
    for id in &manifest.entries {
        if !seen.insert(id.as_str()) {
            return Err(StoreError::DuplicateId(id.clone()));
        }
        if !is_kebab_id(id) {
            return Err(StoreError::CorpusFormat(format!("manifest id '{id}' is not lowercase kebab-case")));
        }
        let path = entry_path(root, id);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::CorpusFormat(format!("{} not found", path.display())),
            _ => StoreError::Io { path: path.clone(), source: e },
        })?;
        let draft = parse_entry_file(&text).map_err(|e| StoreError::CorpusFormat(format!("{}: {e}", path.display())))?;
        if &draft.id != id {
            return Err(StoreError::CorpusFormat(format!(
                "{} declares id '{}' but the manifest lists '{id}'",
                path.display(),
                draft.id
            )));
        }
        drafts.push(draft);
    }
    Ok((manifest.version, drafts))
}

/// Reads and validates a corpus directory. Level-1 entries without a summary
/// get one from `summaries`, and the generated text is written back to the
/// entry file.
pub fn ingest_corpus(
    root: &Path,
    embedder: &dyn Embedder,
    summaries: Option<SummaryGenerator<'_>>,
) -> Result<ContextStore, StoreError> {
    let (version, drafts) = read_corpus(root)?;
    let missing: Vec<String> = drafts.iter().filter(|d| d.summary.is_none()).map(|d| d.id.clone()).collect();
    let store = ContextStore::from_drafts(drafts, version, embedder, summaries)?;
    for id in missing {
        let entry = &store.entries[&id];
        let path = entry_path(root, &id);
        std::fs::write(&path, render_entry_file(entry)).map_err(io_err(&path))?;
    }
    Ok(store)
}

/// Reads a corpus that already has every summary. Embeddings are recomputed.
pub fn load_store(root: &Path, embedder: &dyn Embedder) -> Result<ContextStore, StoreError> {
    let (version, drafts) = read_corpus(root)?;
    ContextStore::from_drafts(drafts, version, embedder, None)
}

pub fn save_store(store: &ContextStore, root: &Path) -> Result<(), StoreError> {
    let dir = root.join("entries");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for entry in store.entries() {
        let path = entry_path(root, &entry.id);
        std::fs::write(&path, render_entry_file(entry)).map_err(io_err(&path))?;
    }
    let manifest = Manifest { version: store.version, entries: store.entries.keys().cloned().collect() };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedEmbedder;

    fn draft(id: &str, level: Level, refs: &[&str]) -> EntryDraft {
        EntryDraft {
            id: id.into(),
            category: Category::Operation,
            level,
            title: format!("{id} title"),
            summary: Some(format!("{id} summary.")),
            body: format!("body of {id}"),
            refs: refs.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn small() -> ContextStore {
        ContextStore::from_drafts(
            vec![
                draft("log-a", Level::L1, &[]),
                draft("rule-a", Level::L2, &["manual-a"]),
                draft("manual-a", Level::L3, &[]),
            ],
            1,
            &HashedEmbedder::default(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn kebab_ids() {
        assert!(is_kebab_id("floor3-orientation"));
        assert!(!is_kebab_id("Floor3"));
        assert!(!is_kebab_id("a--b"));
        assert!(!is_kebab_id("-a"));
        assert!(!is_kebab_id(""));
        assert!(!is_kebab_id("a_b"));
    }

    #[test]
    fn structural_errors() {
        let e = HashedEmbedder::default();
        let orphan = ContextStore::from_drafts(vec![draft("m", Level::L3, &[])], 1, &e, None);
        assert!(matches!(orphan, Err(StoreError::OrphanLevel3(id)) if id == "m"));
        let dangling = ContextStore::from_drafts(vec![draft("r", Level::L2, &["missing-doc"])], 1, &e, None);
        assert!(matches!(dangling, Err(StoreError::DanglingRef(id)) if id == "missing-doc"));
        let dup = ContextStore::from_drafts(vec![draft("r", Level::L2, &[]), draft("r", Level::L2, &[])], 1, &e, None);
        assert!(matches!(dup, Err(StoreError::DuplicateId(_))));
        let mut empty = draft("r", Level::L2, &[]);
        empty.body = "  \n ".into();
        assert!(matches!(ContextStore::from_drafts(vec![empty], 1, &e, None), Err(StoreError::EmptyBody(_))));
        let l1_refs = ContextStore::from_drafts(
            vec![draft("l", Level::L1, &["m"]), draft("m", Level::L3, &[])],
            1,
            &e,
            None,
        );
        assert!(matches!(l1_refs, Err(StoreError::CorpusFormat(_))));
        let mut nosum = draft("r", Level::L2, &[]);
        nosum.summary = None;
        assert!(matches!(ContextStore::from_drafts(vec![nosum], 1, &e, None), Err(StoreError::MissingSummary(_))));
    }

    #[test]
    fn append_observation_updates_only_target() {
        let e = HashedEmbedder::default();
        let mut store = small();
        let before = store.clone();
        store.append_observation("log-a", "2024-06-01 | x | ok", &e).unwrap();
        store.append_observation("log-a", "2024-06-02 | y | ok", &e).unwrap();
        assert_eq!(store.version(), 3);
        let log = store.get("log-a").unwrap();
        assert!(log.body.ends_with("2024-06-01 | x | ok\n2024-06-02 | y | ok"));
        assert_eq!(log.word_count, word_count(&log.body));
        assert_ne!(log.embedding, before.get("log-a").unwrap().embedding);
        assert_eq!(store.get("rule-a"), before.get("rule-a"));
        assert_eq!(store.get("manual-a"), before.get("manual-a"));
        store.validate().unwrap();
    }

    #[test]
    fn append_observation_errors() {
        let e = HashedEmbedder::default();
        let mut store = small();
        assert!(matches!(store.append_observation("manual-a", "x", &e), Err(StoreError::WrongLevel { .. })));
        assert!(matches!(store.append_observation("nope", "x", &e), Err(StoreError::UnknownEntry(_))));
        assert!(matches!(store.append_observation("log-a", "a\nb", &e), Err(StoreError::InvalidRow(_))));
        assert_eq!(store.version(), 1);
    }

    #[test]
    fn entry_file_roundtrip() {
        let store = small();
        let entry = store.get("rule-a").unwrap();
        let parsed = parse_entry_file(&render_entry_file(entry)).unwrap();
        assert_eq!(parsed.id, entry.id);
        assert_eq!(parsed.refs, entry.refs);
        assert_eq!(parsed.body, entry.body);
        assert_eq!(parsed.summary.as_deref(), Some(entry.summary.as_str()));
    }

    #[test]
    fn front_matter_errors() {
        assert!(parse_entry_file("no front matter").is_err());
        assert!(parse_entry_file("---\nid: a\n").is_err());
        assert!(parse_entry_file("---\nid: a\nlevel: 4\ncategory: operation\ntitle: t\n---\nbody").is_err());
        assert!(parse_entry_file("---\nid: a\nlevel: 2\ncategory: misc\ntitle: t\n---\nbody").is_err());
        assert!(parse_entry_file("---\nid: a\nlevel: 2\ncategory: operation\ntitle: t\ncolor: red\n---\nb").is_err());
        let ok = parse_entry_file("---\nid: a\nlevel: 1\ncategory: operation\ntitle: t\n---\n\nrow one\nrow two\n\n").unwrap();
        assert_eq!(ok.summary, None);
        assert_eq!(ok.body, "row one\nrow two");
    }

    #[test]
    fn insert_rejects_level3_and_duplicates() {
        let e = HashedEmbedder::default();
        let mut store = small();
        assert!(matches!(store.insert_entry(draft("m2", Level::L3, &[]), &e), Err(StoreError::OrphanLevel3(_))));
        assert!(matches!(store.insert_entry(draft("rule-a", Level::L2, &[]), &e), Err(StoreError::DuplicateId(_))));
        store.insert_entry(draft("rule-b", Level::L2, &["manual-a"]), &e).unwrap();
        assert_eq!(store.version(), 2);
        store.validate().unwrap();
    }
}
