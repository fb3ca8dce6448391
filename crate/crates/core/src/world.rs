//! Deterministic stand-in for the robot and its environment.
//!
//! Tasks execute atomically against a room graph with objects. Feedback is
//! either `Succeeded` or `Failed` with an observation; only malformed ids are
//! errors.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedder;
use crate::planner::{Task, TaskKind};
use crate::store::{is_kebab_id, Category, ContextStore, EntryDraft, Level, StoreError};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("unknown target '{0}'")]
    UnknownTarget(String),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("no observation log configured")]
    NoObservationLog,
    #[error("orientation utterance is empty")]
    EmptyUtterance,
    #[error("invalid room id '{0}'")]
    InvalidRoom(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("reading world file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Room {
    #[serde(default)]
    pub adjacent: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldObject {
    pub room: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldModel {
    pub rooms: BTreeMap<String, Room>,
    pub objects: BTreeMap<String, WorldObject>,
    pub robot_room: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskStatus {
    Succeeded,
    Failed,
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Succeeded => "Succeeded",
            Self::Failed => "Failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionFeedback {
    pub task: Task,
    pub status: TaskStatus,
    pub observation: String,
    /// Rooms entered while executing, in order. Empty unless the robot moved.
    #[serde(default)]
    pub path: Vec<String>,
    pub robot_room: String,
}

impl ExecutionFeedback {
    pub fn is_terminal(&self) -> bool {
        self.task.kind == TaskKind::Respond
    }
}

fn well_formed_id(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl WorldModel {
    pub fn from_json(json: &str) -> Result<Self, WorldError> {
        let world: Self = serde_json::from_str(json).map_err(|e| WorldError::InvalidWorld(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WorldError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidWorld(m));
        if !self.rooms.contains_key(&self.robot_room) {
            return bad(format!("robot_room '{}' does not exist", self.robot_room));
        }
        for (id, room) in &self.rooms {
            for adj in &room.adjacent {
                match self.rooms.get(adj) {
                    None => return bad(format!("room '{id}' is adjacent to unknown room '{adj}'")),
                    Some(other) if !other.adjacent.contains(id) => {
                        return bad(format!("adjacency '{id}' -> '{adj}' is not symmetric"))
                    }
                    _ => {}
                }
            }
        }
        for (id, obj) in &self.objects {
            if !self.rooms.contains_key(&obj.room) {
                return bad(format!("object '{id}' is in unknown room '{}'", obj.room));
            }
            if self.rooms.contains_key(id) {
                return bad(format!("'{id}' is both a room and an object"));
            }
        }
        Ok(())
    }

    /// Shortest room path from `from` to `to`, excluding `from`. Neighbors are
    /// expanded in ascending id order so the path is deterministic.
    pub fn shortest_path(&self, from: &str, to: &str) -> Option<Vec<String>> {
        if from == to {
            return Some(Vec::new());
        }
        let mut parent: BTreeMap<&str, &str> = BTreeMap::new();
        let mut seen: BTreeSet<&str> = BTreeSet::from([from]);
        let mut queue = VecDeque::from([from]);
        while let Some(cur) = queue.pop_front() {
            let mut next: Vec<&str> = self.rooms.get(cur)?.adjacent.iter().map(String::as_str).collect();
            next.sort_unstable();
            for n in next {
                if !seen.insert(n) {
                    continue;
                }
                parent.insert(n, cur);
                if n == to {
                    let mut path = vec![to.to_string()];
                    let mut at = to;
                    while let Some(&p) = parent.get(at) {
                        if p == from {
                            break;
                        }
                        path.push(p.to_string());
                        at = p;
                    }
                    path.reverse();
                    return Some(path);
                }
                queue.push_back(n);
            }
        }
        None
    }

    /// One-paragraph description of robot location and the scene graph.
    pub fn state_summary(&self) -> String {
        let rooms: Vec<String> = self
            .rooms
            .iter()
            .map(|(id, r)| format!("{id} (adjacent: {})", r.adjacent.join(", ")))
            .collect();
        let objects: Vec<String> = self.objects.iter().map(|(id, o)| format!("{id} in {}", o.room)).collect();
        format!(
            "Robot location: {}\nRooms: {}\nObjects: {}",
            self.robot_room,
            rooms.join("; "),
            objects.join("; ")
        )
    }

    fn feedback(&self, task: &Task, status: TaskStatus, observation: String, path: Vec<String>) -> ExecutionFeedback {
        ExecutionFeedback { task: task.clone(), status, observation, path, robot_room: self.robot_room.clone() }
    }

    pub fn execute_task(&mut self, task: &Task) -> Result<ExecutionFeedback, WorldError> {
        task.validate().map_err(WorldError::InvalidTask)?;
        if task.kind != TaskKind::Respond && !well_formed_id(&task.target) {
            return Err(WorldError::UnknownTarget(task.target.clone()));
        }
        let fail = |w: &Self, why: String| Ok(w.feedback(task, TaskStatus::Failed, why, Vec::new()));
        match task.kind {
            TaskKind::GoTo => {
                let room = match (self.rooms.contains_key(&task.target), self.objects.get(&task.target)) {
                    (true, _) => task.target.clone(),
                    (false, Some(obj)) => obj.room.clone(),
                    (false, None) => return fail(self, format!("no room or object named '{}'", task.target)),
                };
                match self.shortest_path(&self.robot_room, &room) {
                    Some(path) => {
                        self.robot_room = room.clone();
                        let observation = if path.is_empty() {
                            format!("already in {room}")
                        } else {
                            format!("arrived at {room} via {}", path.join(" -> "))
                        };
                        Ok(self.feedback(task, TaskStatus::Succeeded, observation, path))
                    }
                    None => fail(self, format!("{room} is unreachable from {}", self.robot_room)),
                }
            }
            TaskKind::Search => match self.objects.get(&task.target) {
                Some(obj) => {
                    let observation = format!("{} is in {}", task.target, obj.room);
                    Ok(self.feedback(task, TaskStatus::Succeeded, observation, Vec::new()))
                }
                None => fail(self, format!("{} not found", task.target)),
            },
            TaskKind::Inspect => {
                let Some(obj) = self.objects.get(&task.target) else {
                    return fail(self, format!("{} not found", task.target));
                };
                if obj.room != self.robot_room {
                    return fail(self, "not co-located".into());
                }
                let mode = task.mode.expect("validated inspect has a mode");
                match obj.attributes.get(mode.attribute()) {
                    Some(value) => Ok(self.feedback(task, TaskStatus::Succeeded, value.clone(), Vec::new())),
                    None => fail(self, format!("{} has no {} to {mode}", task.target, mode.attribute())),
                }
            }
            TaskKind::Respond => {
                let message = task.message.clone().unwrap_or_default();
                Ok(self.feedback(task, TaskStatus::Succeeded, message, Vec::new()))
            }
        }
    }
}

/// Appends `<timestamp> | <object id> | <observation>` to the observation
/// log for a successful inspection. Other feedback is ignored and `Ok(false)`
/// returned.
pub fn writeback_observation(
    store: &mut ContextStore,
    feedback: &ExecutionFeedback,
    log_id: Option<&str>,
    timestamp: &str,
    embedder: &dyn Embedder,
) -> Result<bool, WorldError> {
    if feedback.task.kind != TaskKind::Inspect || feedback.status != TaskStatus::Succeeded {
        return Ok(false);
    }
    let log_id = log_id.ok_or(WorldError::NoObservationLog)?;
    let observation = feedback.observation.replace('\n', " ");
    let row = format!("{timestamp} | {} | {}", feedback.task.target, observation.trim());
    store.append_observation(log_id, &row, embedder)?;
    Ok(true)
}

/// Stores a site-orientation utterance as a new level-2 operation entry
/// `orientation-<room>-<n>` and returns its id.
pub fn ingest_site_orientation(
    store: &mut ContextStore,
    room_id: &str,
    utterance: &str,
    embedder: &dyn Embedder,
) -> Result<String, WorldError> {
    let room_id = room_id.trim();
    if !is_kebab_id(room_id) {
        return Err(WorldError::InvalidRoom(room_id.to_string()));
    }
    let body = utterance.trim();
    if body.is_empty() {
        return Err(WorldError::EmptyUtterance);
    }
    let prefix = format!("orientation-{room_id}-");
    let seq = store
        .entries()
        .filter_map(|e| e.id.strip_prefix(&prefix)?.parse::<u32>().ok())
        .max()
        .unwrap_or(0)
        + 1;
    let id = format!("{prefix}{seq}");
    store.insert_entry(
        EntryDraft {
            id: id.clone(),
            category: Category::Operation,
            level: Level::L2,
            title: format!("Site orientation: {room_id}"),
            summary: Some(first_sentence(body)),
            body: body.to_string(),
            refs: Vec::new(),
        },
        embedder,
    )?;
    Ok(id)
}

fn first_sentence(text: &str) -> String {
    let flat: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut end = flat.len();
    let chars: Vec<(usize, char)> = flat.char_indices().collect();
    for (i, &(at, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|&(_, n)| n == ' ') {
            end = at + c.len_utf8();
            break;
        }
    }
    flat[..end].to_string()
}
