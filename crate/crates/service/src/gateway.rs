//! HTTP surface: query submission, event long-polling, retrieval previews,
//! site-orientation intake and context browsing.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use saycomply::episode::{EpisodeEvent, EventKind};
use saycomply::retrieval::Retriever;
use saycomply::store::save_store;
use saycomply::world::ingest_site_orientation;
use saycomply::{
    start_episode_with_id, step_episode, Category, ContextStore, EpisodeConfig, EpisodeRuntime, EpisodeStatus, Level,
    RetrievalMethod, WorldModel,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{watch, Semaphore};
use tower_http::services::ServeDir;

pub const DEFAULT_BIND: &str = "127.0.0.1:8777";
pub const MAX_QUERY_CHARS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEventWire {
    pub episode_id: String,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
    pub ts: String,
}

impl EpisodeEventWire {
    pub fn new(episode_id: &str, event: &EpisodeEvent) -> Self {
        Self {
            episode_id: episode_id.to_string(),
            seq: event.seq,
            kind: event.kind,
            payload: event.payload.clone(),
            ts: event.ts.clone(),
        }
    }
}

/// Metadata row returned by `GET /api/contexts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSummary {
    pub id: String,
    pub level: Level,
    pub category: Category,
    pub title: String,
    pub summary: String,
    pub refs: Vec<String>,
    pub word_count: usize,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub episode: EpisodeConfig,
    pub max_concurrent: usize,
    pub long_poll: Duration,
    /// Corpus directory the store is saved to after each orientation.
    pub persist_dir: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            episode: EpisodeConfig::default(),
            max_concurrent: 8,
            long_poll: Duration::from_secs(25),
            persist_dir: None,
            static_dir: None,
        }
    }
}

struct Inner {
    store: RwLock<ContextStore>,
    world: WorldModel,
    rt: EpisodeRuntime,
    config: GatewayConfig,
    episodes: Mutex<HashMap<String, watch::Sender<Vec<EpisodeEventWire>>>>,
    permits: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Every episode runs against its own copy of `world`.
    pub fn new(store: ContextStore, world: WorldModel, rt: EpisodeRuntime, config: GatewayConfig) -> Self {
        let permits = Arc::new(Semaphore::new(config.max_concurrent));
        Self(Arc::new(Inner {
            store: RwLock::new(store),
            world,
            rt,
            config,
            episodes: Mutex::new(HashMap::new()),
            permits,
        }))
    }

    pub fn store_snapshot(&self) -> ContextStore {
        self.0.store.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn channel(&self, id: &str) -> Option<watch::Receiver<Vec<EpisodeEventWire>>> {
        self.0.episodes.lock().unwrap_or_else(|e| e.into_inner()).get(id).map(watch::Sender::subscribe)
    }

    fn drive(&self, id: String, query: String, tx: watch::Sender<Vec<EpisodeEventWire>>) {
        let inner = &self.0;
        let config = &inner.config.episode;
        let mut world = inner.world.clone();
        let mut state = start_episode_with_id(id, &query, &inner.store, &world, config, &inner.rt);
        let mut sent = 0;
        let mut publish = |events: &[EpisodeEvent], episode_id: &str| {
            if events.len() > sent {
                let fresh: Vec<EpisodeEventWire> =
                    events[sent..].iter().map(|e| EpisodeEventWire::new(episode_id, e)).collect();
                sent = events.len();
                tx.send_modify(|all| all.extend(fresh));
            }
        };
        publish(&state.events, &state.id);
        while state.status == EpisodeStatus::Executing {
            step_episode(&mut state, &inner.store, &mut world, config, &inner.rt);
            publish(&state.events, &state.id);
        }
        tracing::info!(episode = %state.id, status = ?state.status, "episode finished");
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn nonempty(field: &str, value: Option<String>) -> Result<String, ApiError> {
    match value {
        Some(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(ApiError::bad_request(format!("{field} is required"))),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

#[derive(Deserialize)]
struct SubmitBody {
    text: Option<String>,
}

async fn submit_query(State(app): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let body: SubmitBody = parse_body(&body)?;
    let text = nonempty("text", body.text)?;
    if text.chars().count() > MAX_QUERY_CHARS {
        return Err(ApiError::bad_request(format!("text exceeds {MAX_QUERY_CHARS} characters")));
    }
    let permit = Arc::clone(&app.0.permits)
        .try_acquire_owned()
        .map_err(|_| ApiError(StatusCode::SERVICE_UNAVAILABLE, "episode concurrency limit reached".into()))?;
    let id = app.0.rt.next_episode_id();
    let (tx, _) = watch::channel(Vec::new());
    app.0.episodes.lock().unwrap_or_else(|e| e.into_inner()).insert(id.clone(), tx.clone());
    let runner = app.clone();
    let episode_id = id.clone();
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        runner.drive(episode_id, text, tx);
    });
    Ok(Json(json!({ "episode_id": id })))
}

#[derive(Deserialize)]
struct EventsQuery {
    since: Option<u64>,
}

async fn episode_events(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Json<Vec<EpisodeEventWire>>, ApiError> {
    let since = q.since.unwrap_or(0);
    let mut rx = app.channel(&id).ok_or(ApiError(StatusCode::NOT_FOUND, format!("unknown episode '{id}'")))?;
    let deadline = tokio::time::Instant::now() + app.0.config.long_poll;
    loop {
        let fresh: Vec<EpisodeEventWire> = rx.borrow_and_update().iter().filter(|e| e.seq > since).cloned().collect();
        if !fresh.is_empty() {
            return Ok(Json(fresh));
        }
        match tokio::time::timeout_at(deadline, rx.changed()).await {
            Ok(Ok(())) => continue,
            _ => return Ok(Json(Vec::new())),
        }
    }
}

#[derive(Deserialize)]
struct PreviewQuery {
    q: Option<String>,
    method: Option<String>,
}

async fn retrieval_preview(State(app): State<AppState>, Query(q): Query<PreviewQuery>) -> Result<Json<Value>, ApiError> {
    let query = nonempty("q", q.q)?;
    let method: RetrievalMethod = match q.method.as_deref() {
        None | Some("") => RetrievalMethod::Tree,
        Some(m) => m.parse().map_err(ApiError::bad_request)?,
    };
    let result = blocking(move || {
        let inner = &app.0;
        let store = inner.store.read().unwrap_or_else(|e| e.into_inner());
        let retriever = Retriever {
            embedder: inner.rt.embedder.as_ref(),
            llm: &inner.rt.llm,
            templates: &inner.rt.templates,
            budget: inner.config.episode.budget,
            top_k: inner.config.episode.top_k,
        };
        retriever.retrieve(method, &query, &store)
    })
    .await?;
    let (context, trace) = result.map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(json!({ "context": context, "trace": trace })))
}

#[derive(Deserialize)]
struct OrientationBody {
    room_id: Option<String>,
    text: Option<String>,
}

async fn orientation(State(app): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let body: OrientationBody = parse_body(&body)?;
    let room_id = nonempty("room_id", body.room_id)?;
    let text = nonempty("text", body.text)?;
    blocking(move || {
        let inner = &app.0;
        let mut store = inner.store.write().unwrap_or_else(|e| e.into_inner());
        let id = ingest_site_orientation(&mut store, &room_id, &text, inner.rt.embedder.as_ref())
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        if let Some(dir) = &inner.config.persist_dir {
            save_store(&store, dir).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        }
        Ok(Json(json!({ "entry_id": id })))
    })
    .await?
}

#[derive(Deserialize)]
struct ContextsQuery {
    level: Option<String>,
    category: Option<String>,
}

async fn contexts(State(app): State<AppState>, Query(q): Query<ContextsQuery>) -> Result<Json<Vec<ContextSummary>>, ApiError> {
    let level = match q.level.as_deref() {
        None | Some("") => None,
        Some(l) => Some(l.parse::<Level>().map_err(ApiError::bad_request)?),
    };
    let category = match q.category.as_deref() {
        None | Some("") => None,
        Some(c) => Some(c.parse::<Category>().map_err(ApiError::bad_request)?),
    };
    let store = app.0.store.read().unwrap_or_else(|e| e.into_inner());
    let rows = store
        .entries_at(level, category)
        .into_iter()
        .map(|e| ContextSummary {
            id: e.id.clone(),
            level: e.level,
            category: e.category,
            title: e.title.clone(),
            summary: e.summary.clone(),
            refs: e.refs.clone(),
            word_count: e.word_count,
        })
        .collect();
    Ok(Json(rows))
}

pub fn router(app: AppState) -> Router {
    let static_dir = app.0.config.static_dir.clone();
    let api = Router::new()
        .route("/api/queries", post(submit_query))
        .route("/api/episodes/{id}/events", get(episode_events))
        .route("/api/retrieval/preview", get(retrieval_preview))
        .route("/api/orientation", post(orientation))
        .route("/api/contexts", get(contexts))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(app: AppState, bind: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "gateway listening");
    axum::serve(listener, router(app)).await
}
