//! Compliant task planning.
//!
//! The LLM answers in a strict line grammar:
//!
//! ```text
//! PLAN:
//! 1. GOTO | boiler-room | | per floor3-orientation
//! 2. INSPECT | boiler-gauge | read | per boiler-room-instruction
//! 3. RESPOND | | gauge read complete | general
//! ```
//!
//! or a single `REFUSE | id[,id...] | reason` line, or (when replanning) a
//! bare `KEEP` that re-emits the cached plan. Output that does not parse gets
//! exactly one repair turn.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatRequest, ChatTurn, LlmError, LlmGateway, RequestTag, TemplateSet, PLAN_TEMPLATE, REPLAN_TEMPLATE};
use crate::retrieval::RetrievedContext;
use crate::world::{ExecutionFeedback, TaskStatus};

pub const PLAN_MAX_WORDS: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    GoTo,
    Search,
    Inspect,
    Respond,
}

impl TaskKind {
    pub fn keyword(self) -> &'static str {
        match self {
            Self::GoTo => "GOTO",
            Self::Search => "SEARCH",
            Self::Inspect => "INSPECT",
            Self::Respond => "RESPOND",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InspectMode {
    Read,
    Scan,
    Measure,
    Photo,
}

impl InspectMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Read => "read",
            Self::Scan => "scan",
            Self::Measure => "measure",
            Self::Photo => "photo",
        }
    }

    /// World attribute an inspection in this mode reports.
    pub fn attribute(self) -> &'static str {
        match self {
            Self::Read => "reading",
            Self::Scan => "scan",
            Self::Measure => "measurement",
            Self::Photo => "photo",
        }
    }
}

impl fmt::Display for InspectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InspectMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "read" => Ok(Self::Read),
            "scan" => Ok(Self::Scan),
            "measure" => Ok(Self::Measure),
            "photo" => Ok(Self::Photo),
            other => Err(format!("unknown inspect mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<InspectMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub justification: String,
}

impl Task {
    pub fn goto(target: &str, justification: &str) -> Self {
        Self { kind: TaskKind::GoTo, target: target.into(), mode: None, message: None, justification: justification.into() }
    }

    pub fn search(target: &str, justification: &str) -> Self {
        Self { kind: TaskKind::Search, ..Self::goto(target, justification) }
    }

    pub fn inspect(target: &str, mode: InspectMode, justification: &str) -> Self {
        Self { kind: TaskKind::Inspect, mode: Some(mode), ..Self::goto(target, justification) }
    }

    pub fn respond(message: &str, justification: &str) -> Self {
        Self {
            kind: TaskKind::Respond,
            target: String::new(),
            mode: None,
            message: Some(message.into()),
            justification: justification.into(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            TaskKind::Respond => {
                if self.message.as_deref().is_none_or(|m| m.trim().is_empty()) {
                    return Err("RESPOND requires a message".into());
                }
                if !self.target.is_empty() {
                    return Err("RESPOND takes no target".into());
                }
            }
            kind => {
                if self.target.trim().is_empty() {
                    return Err(format!("{kind} requires a target"));
                }
                if kind == TaskKind::Inspect && self.mode.is_none() {
                    return Err("Inspect requires mode".into());
                }
                if kind != TaskKind::Inspect && self.mode.is_some() {
                    return Err(format!("{kind} takes no mode"));
                }
            }
        }
        Ok(())
    }

    /// The task as a grammar line without the leading number.
    pub fn to_line(&self) -> String {
        let third = match self.kind {
            TaskKind::Inspect => self.mode.map(InspectMode::as_str).unwrap_or_default().to_string(),
            TaskKind::Respond => self.message.clone().unwrap_or_default(),
            _ => String::new(),
        };
        format!("{} | {} | {} | {}", self.kind, self.target, third, self.justification)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

/// A nonempty task list whose only `Respond` is the last task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    tasks: Vec<Task>,
}

impl Plan {
    pub fn new(tasks: Vec<Task>) -> Result<Self, String> {
        let Some(last) = tasks.last() else {
            return Err("plan is empty".into());
        };
        if last.kind != TaskKind::Respond {
            return Err("missing terminal RESPOND".into());
        }
        if tasks[..tasks.len() - 1].iter().any(|t| t.kind == TaskKind::Respond) {
            return Err("RESPOND before last".into());
        }
        for t in &tasks {
            t.validate()?;
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn into_tasks(self) -> Vec<Task> {
        self.tasks
    }

    pub fn render(tasks: &[Task]) -> String {
        let mut out = String::from("PLAN:");
        for (i, t) in tasks.iter().enumerate() {
            out.push_str(&format!("\n{}. {}", i + 1, t.to_line()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refusal {
    pub reason: String,
    pub cited_entry_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PlannerOutcome {
    Accepted { plan: Plan },
    Refused(Refusal),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanOutput {
    Outcome(PlannerOutcome),
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPlan {
    pub output: PlanOutput,
    pub trailing_prose: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("plan output unparseable after repair: {0}")]
    PlanParseFailed(ParseError),
    #[error("iteration budget of {max} exceeded at iteration {iteration}")]
    IterationBudgetExceeded { iteration: u32, max: u32 },
    #[error("episode is not terminal")]
    NotTerminal,
    #[error("invalid planner input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

fn perr(line: usize, reason: impl Into<String>) -> ParseError {
    ParseError { line, reason: reason.into() }
}

/// `N. ` prefix: returns the number and the rest of the line.
fn split_numbered(line: &str) -> Option<(usize, &str)> {
    let (num, rest) = line.split_once('.')?;
    let n = num.trim().parse().ok()?;
    Some((n, rest))
}

fn parse_task_line(line_no: usize, body: &str) -> Result<Task, ParseError> {
    let fields: Vec<&str> = body.split('|').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(perr(line_no, format!("expected 4 '|'-separated fields, found {}", fields.len())));
    }
    let kind = match fields[0].to_ascii_uppercase().as_str() {
        "GOTO" => TaskKind::GoTo,
        "SEARCH" => TaskKind::Search,
        "INSPECT" => TaskKind::Inspect,
        "RESPOND" => TaskKind::Respond,
        other => return Err(perr(line_no, format!("unknown task kind '{other}'"))),
    };
    let (target, third, justification) = (fields[1], fields[2], fields[3]);
    if justification.is_empty() {
        return Err(perr(line_no, "missing justification"));
    }
    let task = match kind {
        TaskKind::Inspect => {
            if third.is_empty() {
                return Err(perr(line_no, "Inspect requires mode"));
            }
            let mode = third.parse().map_err(|e: String| perr(line_no, e))?;
            Task::inspect(target, mode, justification)
        }
        TaskKind::Respond => Task::respond(third, justification),
        TaskKind::GoTo | TaskKind::Search => {
            if !third.is_empty() {
                return Err(perr(line_no, format!("{kind} takes no mode")));
            }
            Task { kind, ..Task::goto(target, justification) }
        }
    };
    let task = Task { target: target.to_string(), ..task };
    task.validate().map_err(|e| perr(line_no, e))?;
    Ok(task)
}

fn parse_refusal(line_no: usize, line: &str) -> Result<Refusal, ParseError> {
    let fields: Vec<&str> = line.split('|').map(str::trim).collect();
    if fields.len() != 3 {
        return Err(perr(line_no, "refusal must be 'REFUSE | ids | reason'"));
    }
    let cited: Vec<String> =
        fields[1].split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    if cited.is_empty() {
        return Err(perr(line_no, "refusal must cite at least one entry id"));
    }
    if fields[2].is_empty() {
        return Err(perr(line_no, "refusal must give a reason"));
    }
    Ok(Refusal { reason: fields[2].to_string(), cited_entry_ids: cited })
}

fn parse_output(text: &str, allow_keep: bool) -> Result<ParsedPlan, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let Some(start) = lines.iter().position(|l| !l.trim().is_empty()) else {
        return Err(perr(1, "empty output"));
    };
    let header = lines[start].trim();
    let trailing_after = |idx: usize| -> Result<Option<String>, ParseError> {
        let rest: Vec<&str> = lines[idx..].to_vec();
        for (off, l) in rest.iter().enumerate() {
            if split_numbered(l.trim()).is_some_and(|(_, r)| r.contains('|')) {
                return Err(perr(idx + off + 1, "task line after trailing prose"));
            }
        }
        let prose = rest.join("\n").trim().to_string();
        Ok((!prose.is_empty()).then_some(prose))
    };

    if header == "KEEP" {
        if !allow_keep {
            return Err(perr(start + 1, "KEEP is only valid when replanning"));
        }
        return Ok(ParsedPlan { output: PlanOutput::Keep, trailing_prose: trailing_after(start + 1)? });
    }
    if header.starts_with("REFUSE") {
        let refusal = parse_refusal(start + 1, header)?;
        return Ok(ParsedPlan {
            output: PlanOutput::Outcome(PlannerOutcome::Refused(refusal)),
            trailing_prose: trailing_after(start + 1)?,
        });
    }
    if header != "PLAN:" {
        return Err(perr(start + 1, "expected 'PLAN:', 'REFUSE | ...' or 'KEEP'"));
    }

    let mut tasks: Vec<Task> = Vec::new();
    let mut idx = start + 1;
    let mut last_line = start + 1;
    while idx < lines.len() {
        let line = lines[idx].trim();
        if line.is_empty() {
            idx += 1;
            continue;
        }
        let Some((n, body)) = split_numbered(line) else { break };
        let line_no = idx + 1;
        if n != tasks.len() + 1 {
            return Err(perr(line_no, format!("expected task number {}, found {n}", tasks.len() + 1)));
        }
        if tasks.last().is_some_and(|t| t.kind == TaskKind::Respond) {
            return Err(perr(line_no, "RESPOND before last"));
        }
        tasks.push(parse_task_line(line_no, body)?);
        last_line = line_no;
        idx += 1;
    }
    if tasks.is_empty() {
        return Err(perr(start + 1, "plan has no tasks"));
    }
    let plan = Plan::new(tasks).map_err(|e| perr(last_line, e))?;
    Ok(ParsedPlan {
        output: PlanOutput::Outcome(PlannerOutcome::Accepted { plan }),
        trailing_prose: trailing_after(idx)?,
    })
}

/// Parses a planning answer. `KEEP` is rejected here.
pub fn parse_plan_output(text: &str) -> Result<ParsedPlan, ParseError> {
    parse_output(text, false)
}

/// Parses a replanning answer, which may be `KEEP`.
pub fn parse_replan_output(text: &str) -> Result<ParsedPlan, ParseError> {
    parse_output(text, true)
}

/// Renders `[CONTEXT]`: every retrieved text under an entry-id header.
pub fn render_context(context: &RetrievedContext) -> String {
    if context.items.is_empty() {
        return "(no context retrieved)".into();
    }
    context
        .items
        .iter()
        .map(|i| {
            format!(
                "### {} (level {}, {}){}\n{}\n{}",
                i.id,
                i.level,
                i.category,
                if i.truncated { ", truncated" } else { "" },
                i.title,
                i.text
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Cached remainder of the current plan and what has run so far.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanCache {
    pub query: String,
    pub context_ids: Vec<String>,
    pub remaining: Vec<Task>,
    pub executed: Vec<(Task, TaskStatus)>,
    pub iteration: u32,
    pub revision: u32,
    pub refusal: Option<Refusal>,
}

impl PlanCache {
    pub fn new(query: &str, context: &RetrievedContext) -> Self {
        Self {
            query: query.to_string(),
            context_ids: context.ids().into_iter().map(String::from).collect(),
            ..Default::default()
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.refusal.is_some()
            || (self.remaining.is_empty() && self.executed.last().is_some_and(|(t, _)| t.kind == TaskKind::Respond))
    }
}

/// Result of one planning call together with how many LLM calls it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Planned<T> {
    pub result: T,
    pub llm_calls: usize,
    pub trailing_prose: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplanOutcome {
    /// The cached plan continues unchanged.
    Kept,
    Revised(Plan),
    /// The final RESPOND ran; nothing left to plan.
    Terminal,
}

pub struct Planner<'a> {
    pub llm: &'a LlmGateway,
    pub templates: &'a TemplateSet,
}

impl Planner<'_> {
    fn run_with_repair<T>(
        &self,
        tag: RequestTag,
        prompt: String,
        parse: impl Fn(&str) -> Result<(T, Option<String>), ParseError>,
    ) -> Result<Planned<T>, PlannerError> {
        let mut request = ChatRequest::new(tag, self.templates.system(), prompt, PLAN_MAX_WORDS);
        let first = self.llm.complete(&request)?;
        let err = match parse(&first) {
            Ok((result, trailing_prose)) => return Ok(Planned { result, llm_calls: 1, trailing_prose }),
            Err(e) => e,
        };
        request.turns.push(ChatTurn::assistant(first));
        request.turns.push(ChatTurn::user(format!(
            "Your previous output could not be parsed ({err}). Reply again using exactly the [OUTPUT FORMAT]."
        )));
        let second = self.llm.complete(&request)?;
        parse(&second)
            .map(|(result, trailing_prose)| Planned { result, llm_calls: 2, trailing_prose })
            .map_err(PlannerError::PlanParseFailed)
    }

    pub fn plan_from_query(
        &self,
        query: &str,
        state_summary: &str,
        context: &RetrievedContext,
    ) -> Result<Planned<PlannerOutcome>, PlannerError> {
        if query.trim().is_empty() {
            return Err(PlannerError::InvalidInput("query is empty".into()));
        }
        let slots = plan_slots(query, state_summary, context);
        let prompt = self
            .templates
            .render(PLAN_TEMPLATE, &slots)
            .map_err(|e| PlannerError::InvalidInput(e.to_string()))?;
        let known: BTreeSet<&str> = context.ids().into_iter().collect();
        self.run_with_repair(RequestTag::Plan, prompt, |text| {
            let parsed = parse_plan_output(text)?;
            let PlanOutput::Outcome(outcome) = parsed.output else {
                unreachable!("KEEP rejected by parse_plan_output")
            };
            Ok((check_refusal(outcome, &known)?, parsed.trailing_prose))
        })
    }

    pub fn replan_from_feedback(
        &self,
        cache: &PlanCache,
        feedback: &ExecutionFeedback,
        state_summary: &str,
        context: &RetrievedContext,
        max_iterations: u32,
    ) -> Result<(Planned<ReplanOutcome>, PlanCache), PlannerError> {
        let mut next = cache.clone();
        next.executed.push((feedback.task.clone(), feedback.status));
        next.iteration += 1;
        if feedback.task.kind == TaskKind::Respond {
            next.remaining.clear();
            return Ok((Planned { result: ReplanOutcome::Terminal, llm_calls: 0, trailing_prose: None }, next));
        }
        if next.iteration > max_iterations {
            return Err(PlannerError::IterationBudgetExceeded { iteration: next.iteration, max: max_iterations });
        }
        let mut slots = plan_slots(&cache.query, state_summary, context);
        slots.insert(
            "previous_task",
            format!("{}\nstatus: {}\nobservation: {}", feedback.task.to_line(), feedback.status, feedback.observation),
        );
        slots.insert(
            "cached_plan",
            if cache.remaining.is_empty() { "(empty)".to_string() } else { Plan::render(&cache.remaining) },
        );
        let prompt = self
            .templates
            .render(REPLAN_TEMPLATE, &slots)
            .map_err(|e| PlannerError::InvalidInput(e.to_string()))?;
        let remaining_empty = cache.remaining.is_empty();
        let planned = self.run_with_repair(RequestTag::Replan, prompt, |text| {
            let parsed = parse_replan_output(text)?;
            let outcome = match parsed.output {
                PlanOutput::Keep if remaining_empty => return Err(perr(1, "KEEP with an empty cached plan")),
                PlanOutput::Keep => ReplanOutcome::Kept,
                PlanOutput::Outcome(PlannerOutcome::Accepted { plan }) => ReplanOutcome::Revised(plan),
                PlanOutput::Outcome(PlannerOutcome::Refused(_)) => {
                    return Err(perr(1, "REFUSE is not available once execution has started"))
                }
            };
            Ok((outcome, parsed.trailing_prose))
        })?;
        if let ReplanOutcome::Revised(plan) = &planned.result {
            next.remaining = plan.tasks().to_vec();
            next.revision += 1;
        }
        Ok((planned, next))
    }
}

fn plan_slots(query: &str, state_summary: &str, context: &RetrievedContext) -> BTreeMap<&'static str, String> {
    [
        ("context", render_context(context)),
        ("state", if state_summary.trim().is_empty() { "(unknown)".into() } else { state_summary.to_string() }),
        ("query", query.trim().to_string()),
    ]
    .into_iter()
    .collect()
}

/// Keeps only cited ids that were actually retrieved; a refusal left with
/// none is a parse failure.
fn check_refusal(outcome: PlannerOutcome, known: &BTreeSet<&str>) -> Result<PlannerOutcome, ParseError> {
    match outcome {
        PlannerOutcome::Refused(Refusal { reason, cited_entry_ids }) => {
            let cited: Vec<String> = cited_entry_ids.into_iter().filter(|id| known.contains(id.as_str())).collect();
            if cited.is_empty() {
                return Err(perr(1, "refusal cites no retrieved entry id"));
            }
            Ok(PlannerOutcome::Refused(Refusal { reason, cited_entry_ids: cited }))
        }
        accepted => Ok(accepted),
    }
}

/// The final answer for a terminal episode.
pub fn compose_final_answer(cache: &PlanCache) -> Result<String, PlannerError> {
    if let Some(refusal) = &cache.refusal {
        return Ok(format!(
            "Request refused: {} (cites: {})",
            refusal.reason,
            refusal.cited_entry_ids.join(", ")
        ));
    }
    if !cache.is_terminal() {
        return Err(PlannerError::NotTerminal);
    }
    let (respond, _) = cache.executed.last().expect("terminal cache has executed tasks");
    let message = respond.message.clone().unwrap_or_default();
    let total = cache.executed.len();
    let ok = cache.executed.iter().filter(|(_, s)| *s == TaskStatus::Succeeded).count();
    let failed = total - ok;
    let mut summary = format!("{ok}/{total} tasks succeeded");
    if failed > 0 {
        summary.push_str(&format!("; {failed} failed"));
    }
    Ok(format!("{message}\n{summary}"))
}
