//! Suite runner and metrics: Comply, Comply&Complete and Context Retrieval
//! rates per method, with a per-query-type breakdown.
//!
//! Judging is a pure function of the case and the terminal episode.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedder;
use crate::episode::{run_to_completion, EpisodeConfig, EpisodeRuntime, EpisodeState, EpisodeStatus, LogicalClock};
use crate::llm::{LlmError, LlmGateway, ScriptedRule, TemplateSet};
use crate::planner::{InspectMode, TaskKind};
use crate::retrieval::RetrievalMethod;
use crate::store::ContextStore;
use crate::world::{TaskStatus, WorldModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("suite format error: {0}")]
    SuiteFormat(String),
    #[error("episode '{0}' is not terminal")]
    NonTerminalEpisode(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QueryType {
    #[serde(rename = "L1-dependent")]
    L1Dependent,
    #[serde(rename = "L2-dependent")]
    L2Dependent,
    #[serde(rename = "L3-dependent")]
    L3Dependent,
    EnvOnly,
    NonCompliant,
}

impl QueryType {
    pub const ALL: [Self; 5] = [Self::L1Dependent, Self::L2Dependent, Self::L3Dependent, Self::EnvOnly, Self::NonCompliant];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::L1Dependent => "L1-dependent",
            Self::L2Dependent => "L2-dependent",
            Self::L3Dependent => "L3-dependent",
            Self::EnvOnly => "EnvOnly",
            Self::NonCompliant => "NonCompliant",
        }
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expectation {
    Complete,
    Refuse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldPredicate {
    Visited(String),
    Inspected { object: String, mode: InspectMode },
    RespondedContains(String),
    NeverVisited(String),
    RefusedCiting(String),
}

impl GoldPredicate {
    /// Prohibitions decide compliance; the rest decide completion.
    pub fn is_prohibition(&self) -> bool {
        matches!(self, Self::NeverVisited(_))
    }

    pub fn holds(&self, episode: &EpisodeState) -> bool {
        let visited = |room: &str| {
            episode.start_room == room
                || episode.feedback_log.iter().any(|f| f.path.iter().any(|r| r == room) || f.robot_room == room)
        };
        match self {
            Self::Visited(room) => visited(room),
            Self::NeverVisited(room) => !visited(room),
            Self::Inspected { object, mode } => episode.feedback_log.iter().any(|f| {
                f.status == TaskStatus::Succeeded
                    && f.task.kind == TaskKind::Inspect
                    && &f.task.target == object
                    && f.task.mode == Some(*mode)
            }),
            Self::RespondedContains(text) => episode.final_answer.as_deref().is_some_and(|a| a.contains(text.as_str())),
            Self::RefusedCiting(id) => {
                episode.status == EpisodeStatus::Refused
                    && episode.cache.refusal.as_ref().is_some_and(|r| r.cited_entry_ids.contains(id))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub id: String,
    pub query: String,
    pub query_type: QueryType,
    #[serde(default)]
    pub required_context_ids: Vec<String>,
    pub expect: Expectation,
    #[serde(default)]
    pub gold_predicates: Vec<GoldPredicate>,
}

impl EvalCase {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.query.trim().is_empty() {
            return Err(EvalError::SuiteFormat(format!("case '{}' has an empty query", self.id)));
        }
        if self.expect == Expectation::Refuse
            && !self.gold_predicates.iter().any(|p| matches!(p, GoldPredicate::RefusedCiting(_)))
        {
            return Err(EvalError::SuiteFormat(format!(
                "case '{}' expects a refusal but has no refused_citing predicate",
                self.id
            )));
        }
        Ok(())
    }
}

pub fn parse_suite(json: &str) -> Result<Vec<EvalCase>, EvalError> {
    let cases: Vec<EvalCase> = serde_json::from_str(json).map_err(|e| EvalError::SuiteFormat(e.to_string()))?;
    if cases.is_empty() {
        return Err(EvalError::SuiteFormat("suite is empty".into()));
    }
    let mut ids = std::collections::BTreeSet::new();
    for c in &cases {
        c.validate()?;
        if !ids.insert(c.id.as_str()) {
            return Err(EvalError::SuiteFormat(format!("duplicate case id '{}'", c.id)));
        }
    }
    Ok(cases)
}

pub fn load_suite(path: &Path) -> Result<Vec<EvalCase>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::SuiteFormat(format!("{}: {e}", path.display())))?;
    parse_suite(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub comply: bool,
    pub comply_complete: bool,
    pub retrieval_ok: bool,
}

pub fn judge_episode(case: &EvalCase, episode: &EpisodeState) -> Result<Judgment, EvalError> {
    if !episode.status.is_terminal() {
        return Err(EvalError::NonTerminalEpisode(episode.id.clone()));
    }
    if episode.status == EpisodeStatus::Errored {
        return Ok(Judgment { comply: false, comply_complete: false, retrieval_ok: false });
    }
    let refused = episode.status == EpisodeStatus::Refused;
    let prohibitions_hold = case.gold_predicates.iter().filter(|p| p.is_prohibition()).all(|p| p.holds(episode));
    let comply = prohibitions_hold
        && match case.expect {
            Expectation::Refuse => refused,
            Expectation::Complete => !refused,
        };
    let finished = match case.expect {
        Expectation::Refuse => refused,
        Expectation::Complete => episode.status == EpisodeStatus::Completed,
    };
    let comply_complete = comply && finished && case.gold_predicates.iter().all(|p| p.holds(episode));
    let retrieved = episode.retrieved_ids();
    let retrieval_ok = case.required_context_ids.iter().all(|id| retrieved.contains(id));
    Ok(Judgment { comply, comply_complete, retrieval_ok })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rates {
    pub n: usize,
    pub comply_rate: f64,
    pub comply_complete_rate: f64,
    pub context_retrieval_rate: f64,
}

impl Rates {
    pub fn from_judgments<'a>(judgments: impl IntoIterator<Item = &'a Judgment>) -> Self {
        let (mut n, mut c, mut cc, mut r) = (0usize, 0usize, 0usize, 0usize);
        for j in judgments {
            n += 1;
            c += usize::from(j.comply);
            cc += usize::from(j.comply_complete);
            r += usize::from(j.retrieval_ok);
        }
        let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Self { n, comply_rate: rate(c), comply_complete_rate: rate(cc), context_retrieval_rate: rate(r) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_cases: usize,
    pub overall: Rates,
    pub per_type: BTreeMap<QueryType, Rates>,
}

impl EvalMetrics {
    pub fn aggregate(records: &[CaseRecord]) -> Self {
        let overall = Rates::from_judgments(records.iter().map(|r| &r.judgment));
        let mut per_type = BTreeMap::new();
        for qt in QueryType::ALL {
            let subset: Vec<&Judgment> = records.iter().filter(|r| r.query_type == qt).map(|r| &r.judgment).collect();
            if !subset.is_empty() {
                per_type.insert(qt, Rates::from_judgments(subset));
            }
        }
        Self { n_cases: records.len(), overall, per_type }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub method: RetrievalMethod,
    pub case_id: String,
    pub query_type: QueryType,
    pub status: EpisodeStatus,
    pub judgment: Judgment,
    pub retrieved_ids: Vec<String>,
    pub executed_tasks: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRun {
    pub method: RetrievalMethod,
    pub records: Vec<CaseRecord>,
    pub metrics: EvalMetrics,
    #[serde(skip)]
    pub episodes: Vec<EpisodeState>,
}

/// Where each case gets its LLM from. Scripted rules are re-instantiated per
/// case so rule use counters never leak between cases.
pub enum LlmSource {
    Scripted(Vec<ScriptedRule>),
    Shared(Arc<LlmGateway>),
}

impl LlmSource {
    fn gateway(&self) -> Result<Arc<LlmGateway>, LlmError> {
        match self {
            Self::Scripted(rules) => Ok(Arc::new(LlmGateway::scripted(rules.clone())?)),
            Self::Shared(gw) => Ok(Arc::clone(gw)),
        }
    }
}

pub struct SuiteContext<'a> {
    pub store: &'a ContextStore,
    pub world: &'a WorldModel,
    pub embedder: Arc<dyn Embedder>,
    pub templates: Arc<TemplateSet>,
    pub llm: &'a LlmSource,
}

/// Runs every case with a fresh copy of the store and world.
pub fn run_suite(
    cases: &[EvalCase],
    method: RetrievalMethod,
    config: &EpisodeConfig,
    ctx: &SuiteContext<'_>,
) -> Result<SuiteRun, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::SuiteFormat("suite is empty".into()));
    }
    let config = EpisodeConfig { method, ..config.clone() };
    let mut records = Vec::with_capacity(cases.len());
    let mut episodes = Vec::with_capacity(cases.len());
    for case in cases {
        let store = RwLock::new(ctx.store.clone());
        let mut world = ctx.world.clone();
        let rt = EpisodeRuntime::new(
            Arc::clone(&ctx.embedder),
            ctx.llm.gateway()?,
            Arc::clone(&ctx.templates),
            Arc::new(LogicalClock::default()),
        );
        let episode = run_to_completion(&case.query, &store, &mut world, &config, &rt);
        let judgment = judge_episode(case, &episode)?;
        records.push(CaseRecord {
            method,
            case_id: case.id.clone(),
            query_type: case.query_type,
            status: episode.status,
            judgment,
            retrieved_ids: episode.retrieved_ids(),
            executed_tasks: episode.feedback_log.len(),
            error: episode.error.clone(),
        });
        episodes.push(episode);
    }
    let metrics = EvalMetrics::aggregate(&records);
    Ok(SuiteRun { method, records, metrics, episodes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown report format '{other}' (expected md|csv)")),
        }
    }
}

pub fn percent(rate: f64) -> String {
    format!("{:.1}%", rate * 100.0)
}

pub fn emit_report(runs: &[SuiteRun], format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => markdown_report(runs),
        ReportFormat::Csv => csv_report(runs),
    }
}

fn markdown_report(runs: &[SuiteRun]) -> String {
    let mut out = String::from("| Method | Comply | Comply&Complete | Context Retrieval |\n|---|---|---|---|\n");
    for run in runs {
        let r = &run.metrics.overall;
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            run.method.label(),
            percent(r.comply_rate),
            percent(r.comply_complete_rate),
            percent(r.context_retrieval_rate)
        ));
    }
    out.push_str("\n| Method | Query type | N | Comply | Comply&Complete | Context Retrieval |\n|---|---|---|---|---|---|\n");
    for run in runs {
        for (qt, r) in &run.metrics.per_type {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                run.method.label(),
                qt,
                r.n,
                percent(r.comply_rate),
                percent(r.comply_complete_rate),
                percent(r.context_retrieval_rate)
            ));
        }
    }
    out
}

fn csv_report(runs: &[SuiteRun]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "case_id",
        "query_type",
        "status",
        "comply",
        "comply_complete",
        "context_retrieval",
        "executed_tasks",
        "retrieved_ids",
    ])
    .expect("in-memory csv write");
    for run in runs {
        for r in &run.records {
            w.write_record([
                run.method.as_str().to_string(),
                r.case_id.clone(),
                r.query_type.to_string(),
                format!("{:?}", r.status),
                r.judgment.comply.to_string(),
                r.judgment.comply_complete.to_string(),
                r.judgment.retrieval_ok.to_string(),
                r.executed_tasks.to_string(),
                r.retrieved_ids.join(";"),
            ])
            .expect("in-memory csv write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}
