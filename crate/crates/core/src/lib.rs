//! Compliance-grounded task planning for field robots.
//!
//! Site knowledge lives in a three-level [`store::ContextStore`]. For each
//! user query, [`retrieval`] selects a word-budgeted subset, [`planner`] turns
//! it into a task sequence (or refuses), and [`episode`] dispatches tasks one
//! at a time to the [`world`] simulator and replans from feedback.
//! [`eval`] scores whole query suites.

pub mod embedding;
pub mod episode;
pub mod eval;
pub mod llm;
pub mod planner;
pub mod retrieval;
pub mod store;
pub mod world;

pub use embedding::{cosine_similarity, EmbedError, Embedder, Embedding, HashedEmbedder, RemoteEmbedder};
pub use episode::{run_to_completion, start_episode, start_episode_with_id, step_episode, EpisodeConfig, EpisodeRuntime, EpisodeState, EpisodeStatus};
pub use llm::{LlmGateway, ScriptedBackend, ScriptedRule, TemplateSet};
pub use planner::{Plan, PlannerOutcome, Task, TaskKind};
pub use retrieval::{RetrievalMethod, RetrievalTrace, RetrievedContext};
pub use store::{Category, ContextEntry, ContextStore, Level};
pub use world::{ExecutionFeedback, TaskStatus, WorldModel};
