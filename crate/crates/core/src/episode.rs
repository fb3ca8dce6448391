//! One user query end to end: retrieve, plan, dispatch one task, collect
//! feedback, replan, and finally answer.
//!
//! Module errors never escape: they turn the episode `Errored` with a
//! diagnostic event.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::embedding::Embedder;
use crate::llm::{LlmGateway, TemplateSet};
use crate::planner::{compose_final_answer, PlanCache, Planner, PlannerError, PlannerOutcome, ReplanOutcome, Task};
use crate::retrieval::{RetrievalMethod, RetrievalTrace, RetrievedContext, Retriever, DEFAULT_BUDGET, DEFAULT_TOP_K};
use crate::store::ContextStore;
use crate::world::{writeback_observation, ExecutionFeedback, WorldModel};

pub const MAX_ITERATIONS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub method: RetrievalMethod,
    pub budget: usize,
    pub top_k: usize,
    pub max_iterations: u32,
    /// Level-1 entry that receives successful inspection results.
    pub observation_log: Option<String>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            method: RetrievalMethod::Tree,
            budget: DEFAULT_BUDGET,
            top_k: DEFAULT_TOP_K,
            max_iterations: MAX_ITERATIONS,
            observation_log: None,
        }
    }
}

impl EpisodeConfig {
    /// Reads the budget override from `SAYCOMPLY_CONTEXT_BUDGET`.
    pub fn budget_from_env() -> usize {
        std::env::var("SAYCOMPLY_CONTEXT_BUDGET")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(DEFAULT_BUDGET)
    }
}

pub trait Clock: Send + Sync {
    /// ISO-8601 UTC timestamp.
    fn now(&self) -> String;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> String {
        Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
    }
}

/// Starts at a fixed instant and advances one second per reading.
#[derive(Debug)]
pub struct LogicalClock {
    start: DateTime<Utc>,
    ticks: AtomicU64,
}

impl LogicalClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self { start, ticks: AtomicU64::new(0) }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self::new(DateTime::from_timestamp(1_717_200_000, 0).expect("valid epoch"))
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> String {
        let n = self.ticks.fetch_add(1, Ordering::Relaxed);
        (self.start + Duration::seconds(n as i64)).to_rfc3339_opts(SecondsFormat::Secs, true)
    }
}

/// Shared services an episode runs against.
#[derive(Clone)]
pub struct EpisodeRuntime {
    pub embedder: Arc<dyn Embedder>,
    pub llm: Arc<LlmGateway>,
    pub templates: Arc<TemplateSet>,
    pub clock: Arc<dyn Clock>,
    next_id: Arc<AtomicU64>,
}

impl EpisodeRuntime {
    pub fn new(embedder: Arc<dyn Embedder>, llm: Arc<LlmGateway>, templates: Arc<TemplateSet>, clock: Arc<dyn Clock>) -> Self {
        Self { embedder, llm, templates, clock, next_id: Arc::new(AtomicU64::new(1)) }
    }

    pub fn next_episode_id(&self) -> String {
        format!("ep-{:06}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn retriever(&self, config: &EpisodeConfig) -> Retriever<'_> {
        Retriever {
            embedder: self.embedder.as_ref(),
            llm: &self.llm,
            templates: &self.templates,
            budget: config.budget,
            top_k: config.top_k,
        }
    }

    fn planner(&self) -> Planner<'_> {
        Planner { llm: &self.llm, templates: &self.templates }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Retrieving,
    Planning,
    Executing,
    Replanning,
    Completed,
    Refused,
    Errored,
}

impl EpisodeStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Completed | Self::Refused | Self::Errored)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Retrieved,
    Planned,
    Refused,
    Dispatched,
    Feedback,
    Replanned,
    Completed,
    Errored,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Completed | Self::Refused | Self::Errored)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
    pub ts: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub id: String,
    pub query: String,
    pub status: EpisodeStatus,
    pub start_room: String,
    pub retrieved: Option<RetrievedContext>,
    pub trace: Option<RetrievalTrace>,
    pub cache: PlanCache,
    pub in_flight: Option<Task>,
    pub feedback_log: Vec<ExecutionFeedback>,
    pub events: Vec<EpisodeEvent>,
    pub final_answer: Option<String>,
    pub error: Option<String>,
}

impl EpisodeState {
    fn new(id: String, query: &str, start_room: &str) -> Self {
        Self {
            id,
            query: query.to_string(),
            status: EpisodeStatus::Retrieving,
            start_room: start_room.to_string(),
            retrieved: None,
            trace: None,
            cache: PlanCache { query: query.to_string(), ..Default::default() },
            in_flight: None,
            feedback_log: Vec::new(),
            events: Vec::new(),
            final_answer: None,
            error: None,
        }
    }

    fn emit(&mut self, clock: &dyn Clock, kind: EventKind, payload: Value) {
        let seq = self.events.len() as u64 + 1;
        self.events.push(EpisodeEvent { seq, kind, payload, ts: clock.now() });
    }

    fn fail(&mut self, clock: &dyn Clock, reason: String, mut payload: Value) {
        payload["reason"] = Value::String(reason.clone());
        self.status = EpisodeStatus::Errored;
        self.in_flight = None;
        self.error = Some(reason);
        self.emit(clock, EventKind::Errored, payload);
    }

    fn dispatch_head(&mut self, clock: &dyn Clock) {
        let task = self.cache.remaining.remove(0);
        let step = self.feedback_log.len() + 1;
        self.emit(clock, EventKind::Dispatched, json!({ "step": step, "task": task }));
        self.in_flight = Some(task);
        self.status = EpisodeStatus::Executing;
    }

    pub fn events_since(&self, since_seq: u64) -> &[EpisodeEvent] {
        let start = (since_seq as usize).min(self.events.len());
        &self.events[start..]
    }

    pub fn retrieved_ids(&self) -> Vec<String> {
        self.retrieved.as_ref().map(|c| c.ids().into_iter().map(String::from).collect()).unwrap_or_default()
    }

    /// Checks the lifecycle invariants that must hold at every point.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, e) in self.events.iter().enumerate() {
            if e.seq != i as u64 + 1 {
                return Err(format!("event {i} has seq {}", e.seq));
            }
        }
        let mut in_flight = false;
        for e in &self.events {
            match e.kind {
                EventKind::Dispatched if in_flight => return Err(format!("second dispatch at seq {}", e.seq)),
                EventKind::Dispatched => in_flight = true,
                EventKind::Feedback if !in_flight => return Err(format!("feedback without dispatch at seq {}", e.seq)),
                EventKind::Feedback => in_flight = false,
                _ => {}
            }
        }
        if self.events.iter().filter(|e| e.kind == EventKind::Retrieved).count() > 1 {
            return Err("more than one retrieval".into());
        }
        match self.status {
            EpisodeStatus::Completed => {
                if self.final_answer.is_none() {
                    return Err("completed without final answer".into());
                }
                let last = self.feedback_log.last().ok_or("completed with no feedback")?;
                if !last.is_terminal() || last.status != crate::world::TaskStatus::Succeeded {
                    return Err("completed episode did not end with a succeeded RESPOND".into());
                }
            }
            EpisodeStatus::Refused if self.final_answer.is_none() || !self.feedback_log.is_empty() => {
                return Err("refused episode must have an answer and no feedback".into());
            }
            _ => {}
        }
        if self.status.is_terminal() && !self.events.last().is_some_and(|e| e.kind.is_terminal()) {
            return Err("terminal episode without terminal event".into());
        }
        Ok(())
    }
}

fn read_store(store: &RwLock<ContextStore>) -> std::sync::RwLockReadGuard<'_, ContextStore> {
    store.read().unwrap_or_else(|e| e.into_inner())
}

pub fn start_episode(
    query: &str,
    store: &RwLock<ContextStore>,
    world: &WorldModel,
    config: &EpisodeConfig,
    rt: &EpisodeRuntime,
) -> EpisodeState {
    start_episode_with_id(rt.next_episode_id(), query, store, world, config, rt)
}

/// As [`start_episode`], for callers that hand out the id before the episode starts.
pub fn start_episode_with_id(
    id: String,
    query: &str,
    store: &RwLock<ContextStore>,
    world: &WorldModel,
    config: &EpisodeConfig,
    rt: &EpisodeRuntime,
) -> EpisodeState {
    let clock = rt.clock.as_ref();
    let mut state = EpisodeState::new(id, query, &world.robot_room);
    if query.trim().is_empty() {
        state.fail(clock, "validation: query is empty".into(), json!({ "stage": "validation" }));
        return state;
    }

    let retrieval = {
        let guard = read_store(store);
        rt.retriever(config).retrieve(config.method, query, &guard)
    };
    let (context, trace) = match retrieval {
        Ok(r) => r,
        Err(e) => {
            state.fail(clock, format!("retrieval: {e}"), json!({ "stage": "retrieval" }));
            return state;
        }
    };
    let items: Vec<Value> = context
        .items
        .iter()
        .map(|i| json!({ "id": i.id, "level": i.level, "category": i.category, "title": i.title,
                         "selection": i.selection, "words": i.included_words, "truncated": i.truncated }))
        .collect();
    state.emit(
        clock,
        EventKind::Retrieved,
        json!({ "method": context.method, "budget": context.budget, "total_words": context.total_words, "items": items }),
    );
    state.cache = PlanCache::new(query, &context);
    state.retrieved = Some(context);
    state.trace = Some(trace);

    state.status = EpisodeStatus::Planning;
    let context = state.retrieved.as_ref().expect("set above");
    match rt.planner().plan_from_query(query, &world.state_summary(), context) {
        Err(e) => state.fail(clock, format!("planning: {e}"), json!({ "stage": "plan" })),
        Ok(planned) => match planned.result {
            PlannerOutcome::Accepted { plan } => {
                state.emit(
                    clock,
                    EventKind::Planned,
                    json!({ "tasks": plan.tasks(), "llm_calls": planned.llm_calls, "revision": 1 }),
                );
                state.cache.remaining = plan.into_tasks();
                state.cache.revision = 1;
                state.dispatch_head(clock);
            }
            PlannerOutcome::Refused(refusal) => {
                state.emit(
                    clock,
                    EventKind::Refused,
                    json!({ "reason": refusal.reason, "cited_entry_ids": refusal.cited_entry_ids, "llm_calls": planned.llm_calls }),
                );
                state.cache.refusal = Some(refusal);
                state.final_answer = compose_final_answer(&state.cache).ok();
                state.status = EpisodeStatus::Refused;
            }
        },
    }
    state
}

/// Executes the in-flight task and replans. No-op unless `Executing`.
pub fn step_episode(
    state: &mut EpisodeState,
    store: &RwLock<ContextStore>,
    world: &mut WorldModel,
    config: &EpisodeConfig,
    rt: &EpisodeRuntime,
) {
    if state.status != EpisodeStatus::Executing {
        return;
    }
    let clock = rt.clock.as_ref();
    let Some(task) = state.in_flight.take() else {
        state.fail(clock, "internal: executing without a dispatched task".into(), json!({ "stage": "execute" }));
        return;
    };
    let feedback = match world.execute_task(&task) {
        Ok(f) => f,
        Err(e) => {
            state.fail(clock, format!("execution: {e}"), json!({ "stage": "execute", "task": task }));
            return;
        }
    };
    state.emit(
        clock,
        EventKind::Feedback,
        json!({ "task": feedback.task, "status": feedback.status, "observation": feedback.observation,
                "robot_room": feedback.robot_room }),
    );
    state.feedback_log.push(feedback.clone());

    if config.observation_log.is_some() {
        let ts = clock.now();
        let mut guard = store.write().unwrap_or_else(|e| e.into_inner());
        if let Err(e) =
            writeback_observation(&mut guard, &feedback, config.observation_log.as_deref(), &ts, rt.embedder.as_ref())
        {
            drop(guard);
            state.fail(clock, format!("writeback: {e}"), json!({ "stage": "writeback" }));
            return;
        }
    }

    state.status = EpisodeStatus::Replanning;
    let context = state.retrieved.clone().expect("executing episodes have retrieved context");
    let replanned = rt.planner().replan_from_feedback(
        &state.cache,
        &feedback,
        &world.state_summary(),
        &context,
        config.max_iterations,
    );
    match replanned {
        Err(PlannerError::IterationBudgetExceeded { iteration, max }) => {
            state.cache.executed.push((feedback.task.clone(), feedback.status));
            state.cache.iteration = iteration;
            state.fail(
                clock,
                "iteration budget".into(),
                json!({ "stage": "replan", "iteration": iteration, "max_iterations": max }),
            );
        }
        Err(e) => state.fail(clock, format!("replanning: {e}"), json!({ "stage": "replan" })),
        Ok((planned, cache)) => {
            state.cache = cache;
            match planned.result {
                ReplanOutcome::Terminal => match compose_final_answer(&state.cache) {
                    Ok(answer) => {
                        state.emit(clock, EventKind::Completed, json!({ "answer": answer }));
                        state.final_answer = Some(answer);
                        state.status = EpisodeStatus::Completed;
                    }
                    Err(e) => state.fail(clock, format!("answer: {e}"), json!({ "stage": "answer" })),
                },
                outcome => {
                    state.emit(
                        clock,
                        EventKind::Replanned,
                        json!({ "keep": outcome == ReplanOutcome::Kept, "remaining": state.cache.remaining,
                                "llm_calls": planned.llm_calls, "iteration": state.cache.iteration,
                                "revision": state.cache.revision }),
                    );
                    state.dispatch_head(clock);
                }
            }
        }
    }
}

pub fn run_to_completion(
    query: &str,
    store: &RwLock<ContextStore>,
    world: &mut WorldModel,
    config: &EpisodeConfig,
    rt: &EpisodeRuntime,
) -> EpisodeState {
    let mut state = start_episode(query, store, world, config, rt);
    while state.status == EpisodeStatus::Executing {
        step_episode(&mut state, store, world, config, rt);
    }
    state
}
