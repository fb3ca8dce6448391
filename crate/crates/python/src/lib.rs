//! Python bindings. Structured results cross the boundary as plain dicts and lists.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyAny;
use saycomply::embedding::DEFAULT_SEED;
use saycomply::episode::LogicalClock;
use saycomply::eval::{emit_report, load_suite, run_suite, LlmSource, ReportFormat, SuiteContext};
use saycomply::llm::{load_rules, RemoteBackend, RemoteLlmConfig};
use saycomply::planner::{parse_plan_output, parse_replan_output, PlanOutput};
use saycomply::retrieval::Retriever;
use saycomply::store::{load_store, save_store};
use saycomply::world::ingest_site_orientation;
use saycomply::{
    run_to_completion, Category, ContextEntry, ContextStore, Embedder, EpisodeConfig, EpisodeRuntime, HashedEmbedder,
    Level, LlmGateway, RetrievalMethod, Task, TemplateSet, WorldModel,
};
use serde::Serialize;
use serde_json::json;

create_exception!(saycomply, SayComplyError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    SayComplyError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: for<'de> serde::Deserialize<'de>>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn method(name: &str) -> PyResult<RetrievalMethod> {
    name.parse().map_err(err)
}

fn entry_dict(e: &ContextEntry) -> serde_json::Value {
    json!({ "id": e.id, "level": e.level, "category": e.category, "title": e.title, "summary": e.summary,
            "body": e.body, "refs": e.refs, "word_count": e.word_count })
}

fn gateway(rules: Option<PathBuf>) -> PyResult<LlmGateway> {
    match rules {
        Some(path) => LlmGateway::scripted(load_rules(&path).map_err(err)?).map_err(err),
        None => match RemoteLlmConfig::from_env() {
            Some(cfg) => Ok(LlmGateway::new(RemoteBackend::new(cfg))),
            None => Err(err("no LLM configured: pass rules or set SAYCOMPLY_LLM_URL")),
        },
    }
}

/// Hashed bag-of-words embedding of `text` (unit length).
#[pyfunction]
#[pyo3(signature = (text, dim = 256))]
fn embed(text: &str, dim: usize) -> PyResult<Vec<f64>> {
    let embedder = HashedEmbedder::new(dim, DEFAULT_SEED);
    Ok(embedder.embed(text).map_err(err)?.values().to_vec())
}

/// Parses planner output. Returns `{"outcome": ...}` or `{"keep": true}`.
#[pyfunction]
#[pyo3(signature = (text, replanning = false))]
fn parse_plan(py: Python<'_>, text: &str, replanning: bool) -> PyResult<Py<PyAny>> {
    let parsed = if replanning { parse_replan_output(text) } else { parse_plan_output(text) }.map_err(err)?;
    match parsed.output {
        PlanOutput::Keep => to_py(py, &json!({ "keep": true })),
        PlanOutput::Outcome(o) => to_py(py, &o),
    }
}

/// Runs a labeled suite and returns the report text.
#[pyfunction]
#[pyo3(signature = (suite, corpus, world, rules, methods = vec!["tree".to_string(), "top3".to_string(), "env".to_string()], report = "md", budget = None))]
fn evaluate(
    suite: PathBuf,
    corpus: PathBuf,
    world: PathBuf,
    rules: PathBuf,
    methods: Vec<String>,
    report: &str,
    budget: Option<usize>,
) -> PyResult<String> {
    let format = match report {
        "md" => ReportFormat::Markdown,
        "csv" => ReportFormat::Csv,
        other => return Err(err(format!("unknown report format '{other}'"))),
    };
    let cases = load_suite(&suite).map_err(err)?;
    let embedder: Arc<dyn Embedder> = Arc::new(HashedEmbedder::default());
    let store = load_store(&corpus, embedder.as_ref()).map_err(err)?;
    let world = WorldModel::load(&world).map_err(err)?;
    let llm = LlmSource::Scripted(load_rules(&rules).map_err(err)?);
    let ctx = SuiteContext { store: &store, world: &world, embedder, templates: Arc::new(TemplateSet::builtin()), llm: &llm };
    let config = EpisodeConfig { budget: budget.unwrap_or(EpisodeConfig::default().budget), ..Default::default() };
    let runs = methods
        .iter()
        .map(|m| run_suite(&cases, method(m)?, &config, &ctx).map_err(err))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(emit_report(&runs, format))
}

#[pyclass(name = "ContextStore", module = "saycomply")]
struct PyContextStore {
    inner: ContextStore,
}

#[pymethods]
impl PyContextStore {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_store(&path, &HashedEmbedder::default()).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_store(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn version(&self) -> u64 {
        self.inner.version()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn get(&self, py: Python<'_>, id: &str) -> PyResult<Option<Py<PyAny>>> {
        self.inner.get(id).map(|e| to_py(py, &entry_dict(e))).transpose()
    }

    #[pyo3(signature = (level = None, category = None))]
    fn entries(&self, py: Python<'_>, level: Option<u8>, category: Option<&str>) -> PyResult<Py<PyAny>> {
        let level = level.map(|l| l.to_string().parse::<Level>()).transpose().map_err(err)?;
        let category = category.map(str::parse::<Category>).transpose().map_err(err)?;
        let rows: Vec<_> = self.inner.entries_at(level, category).into_iter().map(entry_dict).collect();
        to_py(py, &rows)
    }

    fn ingest_orientation(&mut self, room_id: &str, text: &str) -> PyResult<String> {
        ingest_site_orientation(&mut self.inner, room_id, text, &HashedEmbedder::default()).map_err(err)
    }

    fn append_observation(&mut self, l1_id: &str, row: &str) -> PyResult<()> {
        self.inner.append_observation(l1_id, row, &HashedEmbedder::default()).map_err(err)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(name = "WorldModel", module = "saycomply")]
struct PyWorldModel {
    inner: WorldModel,
}

#[pymethods]
impl PyWorldModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: WorldModel::load(&path).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: WorldModel::from_json(text).map_err(err)? })
    }

    #[getter]
    fn robot_room(&self) -> String {
        self.inner.robot_room.clone()
    }

    fn shortest_path(&self, from_room: &str, to_room: &str) -> Option<Vec<String>> {
        self.inner.shortest_path(from_room, to_room)
    }

    fn state_summary(&self) -> String {
        self.inner.state_summary()
    }

    /// Executes a task dict such as `{"kind": "goto", "target": "hall", "justification": "..."}`.
    fn execute(&mut self, py: Python<'_>, task: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let task: Task = from_py(py, task)?;
        let feedback = self.inner.execute_task(&task).map_err(err)?;
        to_py(py, &feedback)
    }
}

/// A store, a world and an LLM backend, run with deterministic timestamps.
#[pyclass(name = "Session", module = "saycomply")]
struct PySession {
    store: RwLock<ContextStore>,
    world: Mutex<WorldModel>,
    rt: EpisodeRuntime,
    config: EpisodeConfig,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (corpus, world, rules = None, method = "tree", budget = None, top_k = 3, observation_log = None))]
    fn new(
        corpus: PathBuf,
        world: PathBuf,
        rules: Option<PathBuf>,
        method: &str,
        budget: Option<usize>,
        top_k: usize,
        observation_log: Option<String>,
    ) -> PyResult<Self> {
        let embedder: Arc<dyn Embedder> = Arc::new(HashedEmbedder::default());
        let store = load_store(&corpus, embedder.as_ref()).map_err(err)?;
        let world = WorldModel::load(&world).map_err(err)?;
        let rt = EpisodeRuntime::new(
            embedder,
            Arc::new(gateway(rules)?),
            Arc::new(TemplateSet::builtin()),
            Arc::new(LogicalClock::default()),
        );
        let config = EpisodeConfig {
            method: self::method(method)?,
            budget: budget.unwrap_or_else(EpisodeConfig::budget_from_env),
            top_k,
            observation_log,
            ..Default::default()
        };
        Ok(Self { store: RwLock::new(store), world: Mutex::new(world), rt, config })
    }

    /// Retrieved context and trace for `query`, without starting an episode.
    #[pyo3(signature = (query, method = None))]
    fn retrieve(&self, py: Python<'_>, query: &str, method: Option<&str>) -> PyResult<Py<PyAny>> {
        let method = method.map(self::method).transpose()?.unwrap_or(self.config.method);
        let store = self.store.read().map_err(err)?;
        let retriever = Retriever {
            embedder: self.rt.embedder.as_ref(),
            llm: &self.rt.llm,
            templates: &self.rt.templates,
            budget: self.config.budget,
            top_k: self.config.top_k,
        };
        let (context, trace) = retriever.retrieve(method, query, &store).map_err(err)?;
        to_py(py, &json!({ "context": context, "trace": trace }))
    }

    /// Runs an episode to a terminal state and returns it. The robot stays where the episode left it.
    fn run(&self, py: Python<'_>, query: &str) -> PyResult<Py<PyAny>> {
        let state = {
            let mut guard = self.world.lock().map_err(err)?;
            let world: &mut WorldModel = &mut guard;
            py.detach(|| run_to_completion(query, &self.store, world, &self.config, &self.rt))
        };
        to_py(py, &state)
    }

    fn orient(&self, room_id: &str, text: &str) -> PyResult<String> {
        let mut store = self.store.write().map_err(err)?;
        ingest_site_orientation(&mut store, room_id, text, self.rt.embedder.as_ref()).map_err(err)
    }

    #[getter]
    fn robot_room(&self) -> PyResult<String> {
        Ok(self.world.lock().map_err(err)?.robot_room.clone())
    }

    fn store(&self) -> PyResult<PyContextStore> {
        Ok(PyContextStore { inner: self.store.read().map_err(err)?.clone() })
    }

    fn audit_log(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.rt.llm.audit_log())
    }
}

#[pymodule]
#[pyo3(name = "saycomply")]
pub fn saycomply_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SayComplyError", m.py().get_type::<SayComplyError>())?;
    m.add_class::<PyContextStore>()?;
    m.add_class::<PyWorldModel>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(parse_plan, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
