//! Chat-completion gateway.
//!
//! Every pipeline stage talks to the model through [`LlmGateway`], which
//! validates requests, enforces the word budget on completions and keeps an
//! append-only audit log. Two backends exist: [`ScriptedBackend`] answers from
//! an ordered rule list and is what every offline test runs against, and
//! [`RemoteBackend`] speaks an OpenAI-style chat endpoint.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("no scripted rule matched the {tag} prompt")]
    NoRuleMatched { tag: RequestTag },
    #[error("llm provider failed after {attempts} attempts: {message}")]
    ProviderError { attempts: u32, message: String },
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("invalid scripted rules: {0}")]
    InvalidRules(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("unknown template '{0}'")]
    UnknownTemplate(String),
    #[error("missing slot '{0}'")]
    MissingSlot(String),
    #[error("unused slot '{0}'")]
    UnusedSlot(String),
    #[error("cannot read templates: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestTag {
    #[serde(rename = "plan")]
    Plan,
    #[serde(rename = "replan")]
    Replan,
    #[serde(rename = "l1-select")]
    L1Select,
    #[serde(rename = "summarize")]
    Summarize,
}

impl RequestTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Plan => "plan",
            Self::Replan => "replan",
            Self::L1Select => "l1-select",
            Self::Summarize => "summarize",
        }
    }
}

impl fmt::Display for RequestTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub turns: Vec<ChatTurn>,
    pub max_words: usize,
    pub tag: RequestTag,
}

impl ChatRequest {
    pub fn new(tag: RequestTag, system: impl Into<String>, user: impl Into<String>, max_words: usize) -> Self {
        Self { system: system.into(), turns: vec![ChatTurn::user(user)], max_words, tag }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.turns.last() {
            None => Err(LlmError::InvalidRequest("no turns".into())),
            Some(t) if t.role != Role::User => {
                Err(LlmError::InvalidRequest("last turn must be from the user".into()))
            }
            _ if self.max_words == 0 => Err(LlmError::InvalidRequest("max_words must be positive".into())),
            _ => Ok(()),
        }
    }

    /// System text followed by every turn, newline separated. Scripted
    /// matchers run against this.
    pub fn prompt_text(&self) -> String {
        let mut out = self.system.clone();
        for turn in &self.turns {
            out.push('\n');
            out.push_str(&turn.content);
        }
        out
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRule {
    pub matchers: Vec<String>,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_uses: Option<u32>,
}

/// Answers with the first rule, in file order, whose matchers all occur in
/// the prompt and whose use budget is not exhausted.
#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<ScriptedRule>,
    uses: Mutex<Vec<u32>>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptedRule>) -> Result<Self, LlmError> {
        for (i, rule) in rules.iter().enumerate() {
            if rule.matchers.is_empty() {
                return Err(LlmError::InvalidRules(format!("rule {i} has no matchers")));
            }
            if rule.max_uses == Some(0) {
                return Err(LlmError::InvalidRules(format!("rule {i} has max_uses 0")));
            }
        }
        let uses = Mutex::new(vec![0; rules.len()]);
        Ok(Self { rules, uses })
    }

    pub fn from_json(json: &str) -> Result<Self, LlmError> {
        let rules: Vec<ScriptedRule> =
            serde_json::from_str(json).map_err(|e| LlmError::InvalidRules(e.to_string()))?;
        Self::new(rules)
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        Self::new(load_rules(path)?)
    }

    pub fn rules(&self) -> &[ScriptedRule] {
        &self.rules
    }
}

pub fn load_rules(path: &Path) -> Result<Vec<ScriptedRule>, LlmError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LlmError::InvalidRules(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| LlmError::InvalidRules(format!("{}: {e}", path.display())))
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let prompt = request.prompt_text();
        let mut uses = self.uses.lock().unwrap_or_else(|e| e.into_inner());
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.max_uses.is_some_and(|max| uses[i] >= max) {
                continue;
            }
            if rule.matchers.iter().all(|m| prompt.contains(m.as_str())) {
                uses[i] += 1;
                return Ok(rule.completion.clone());
            }
        }
        Err(LlmError::NoRuleMatched { tag: request.tag })
    }
}

#[derive(Debug, Clone)]
pub struct RemoteLlmConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub temperature: f64,
    pub retries: u32,
    pub timeout: Duration,
}

impl RemoteLlmConfig {
    /// Reads `SAYCOMPLY_LLM_URL`, `SAYCOMPLY_LLM_MODEL` and
    /// `SAYCOMPLY_LLM_API_KEY`. Returns `None` when no URL is set.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("SAYCOMPLY_LLM_URL").ok()?;
        Some(Self {
            url,
            model: std::env::var("SAYCOMPLY_LLM_MODEL").unwrap_or_else(|_| "gpt-4".into()),
            api_key: std::env::var("SAYCOMPLY_LLM_API_KEY").ok(),
            temperature: 0.0,
            retries: 3,
            timeout: Duration::from_secs(120),
        })
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<WireMessage<'a>>,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChoice>,
}

/// OpenAI-compatible chat completion client.
pub struct RemoteBackend {
    config: RemoteLlmConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteLlmConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }

    fn request_once(&self, request: &ChatRequest) -> Result<String, String> {
        let mut messages = vec![WireMessage { role: "system", content: &request.system }];
        messages.extend(request.turns.iter().map(|t| WireMessage {
            role: match t.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            },
            content: &t.content,
        }));
        let body = WireChatRequest {
            model: &self.config.model,
            temperature: self.config.temperature,
            messages,
        };
        let mut req = self.agent.post(&self.config.url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let parsed: WireChatResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| "response contained no choices".to_string())
    }
}

impl LlmBackend for RemoteBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let attempts = self.config.retries.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.request_once(request) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "llm request failed");
                    last = e;
                }
            }
        }
        Err(LlmError::ProviderError { attempts, message: last })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub index: u64,
    pub tag: RequestTag,
    pub request: ChatRequest,
    pub response: Option<String>,
    pub error: Option<String>,
    pub warning: Option<String>,
}

pub struct LlmGateway {
    backend: Box<dyn LlmBackend>,
    audit: Mutex<Vec<AuditRecord>>,
}

impl LlmGateway {
    pub fn new(backend: impl LlmBackend + 'static) -> Self {
        Self { backend: Box::new(backend), audit: Mutex::new(Vec::new()) }
    }

    pub fn scripted(rules: Vec<ScriptedRule>) -> Result<Self, LlmError> {
        Ok(Self::new(ScriptedBackend::new(rules)?))
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        let result = self.backend.complete(request);
        let mut warning = None;
        let result = result.map(|text| {
            let words = text.split_whitespace().count();
            if words > request.max_words {
                warning = Some(format!(
                    "completion of {words} words truncated to {}",
                    request.max_words
                ));
                truncate_words(&text, request.max_words).to_string()
            } else {
                text
            }
        });
        let mut audit = self.audit.lock().unwrap_or_else(|e| e.into_inner());
        let index = audit.len() as u64;
        audit.push(AuditRecord {
            index,
            tag: request.tag,
            request: request.clone(),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
            warning,
        });
        result
    }

    pub fn audit_log(&self) -> Vec<AuditRecord> {
        self.audit.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn calls_tagged(&self, tag: RequestTag) -> usize {
        self.audit
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|r| r.tag == tag)
            .count()
    }
}

/// Prefix of `text` ending with its `max_words`-th whitespace token. Line
/// structure before the cut is preserved.
fn truncate_words(text: &str, max_words: usize) -> &str {
    let mut seen = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                in_word = false;
                if seen == max_words {
                    return &text[..i];
                }
            }
        } else if !in_word {
            in_word = true;
            seen += 1;
        }
    }
    text
}

pub const PLAN_TEMPLATE: &str = "plan";
pub const REPLAN_TEMPLATE: &str = "replan";
pub const L1_SELECT_TEMPLATE: &str = "l1-select";
pub const SUMMARIZE_TEMPLATE: &str = "summarize";

const OUTPUT_FORMAT_HEADER: &str = "[OUTPUT FORMAT]";

/// Prompt templates with `{{slot}}` placeholders.
///
/// The replan template is composed from the plan template: its extra
/// sections are spliced in directly before `[OUTPUT FORMAT]`, so planning and
/// replanning share one prompt.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    system: String,
    templates: BTreeMap<String, String>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self::from_parts(
            include_str!("../prompts/system.txt"),
            include_str!("../prompts/plan.txt"),
            include_str!("../prompts/replan.txt"),
            include_str!("../prompts/l1-select.txt"),
            include_str!("../prompts/summarize.txt"),
        )
    }

    /// Loads `system.txt`, `plan.txt`, `replan.txt`, `l1-select.txt` and
    /// `summarize.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| TemplateError::Io(format!("{}: {e}", dir.join(name).display())))
        };
        Ok(Self::from_parts(
            &read("system.txt")?,
            &read("plan.txt")?,
            &read("replan.txt")?,
            &read("l1-select.txt")?,
            &read("summarize.txt")?,
        ))
    }

    fn from_parts(system: &str, plan: &str, replan_sections: &str, l1: &str, summarize: &str) -> Self {
        let replan = match plan.find(OUTPUT_FORMAT_HEADER) {
            Some(at) => format!("{}{}{}", &plan[..at], replan_sections, &plan[at..]),
            None => format!("{plan}\n{replan_sections}"),
        };
        let templates = [
            (PLAN_TEMPLATE, plan.to_string()),
            (REPLAN_TEMPLATE, replan),
            (L1_SELECT_TEMPLATE, l1.to_string()),
            (SUMMARIZE_TEMPLATE, summarize.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self { system: system.trim().to_string(), templates }
    }

    pub fn system(&self) -> &str {
        &self.system
    }

    pub fn raw(&self, name: &str) -> Option<&str> {
        self.templates.get(name).map(String::as_str)
    }

    pub fn render(&self, name: &str, slots: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let template = self
            .templates
            .get(name)
            .ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))?;
        let pieces = split_placeholders(template);
        let required: BTreeSet<&str> = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(*s),
                Piece::Text(_) => None,
            })
            .collect();
        for piece in &pieces {
            if let Piece::Slot(s) = piece {
                if !slots.contains_key(s) {
                    return Err(TemplateError::MissingSlot((*s).to_string()));
                }
            }
        }
        if let Some(extra) = slots.keys().find(|k| !required.contains(*k)) {
            return Err(TemplateError::UnusedSlot((*extra).to_string()));
        }
        let mut out = String::with_capacity(template.len());
        for piece in pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(&slots[s]),
            }
        }
        Ok(out)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn split_placeholders(template: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        let Some(close) = rest[open + 2..].find("}}") else { break };
        pieces.push(Piece::Text(&rest[..open]));
        pieces.push(Piece::Slot(rest[open + 2..open + 2 + close].trim()));
        rest = &rest[open + 2 + close + 2..];
    }
    pieces.push(Piece::Text(rest));
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(matchers: &[&str], completion: &str) -> ScriptedRule {
        ScriptedRule {
            matchers: matchers.iter().map(|s| s.to_string()).collect(),
            completion: completion.into(),
            max_uses: None,
        }
    }

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new(RequestTag::L1Select, "sys", text, 100)
    }

    #[test]
    fn scripted_rule_matches_all_substrings() {
        let gw = LlmGateway::scripted(vec![rule(
            &["fire extinguisher", "[L1 CATALOG]"],
            "fire-extinguisher-log",
        )])
        .unwrap();
        let out = gw
            .complete(&req("[QUERY]\ncheck the fire extinguisher\n[L1 CATALOG]\n..."))
            .unwrap();
        assert_eq!(out, "fire-extinguisher-log");
    }

    #[test]
    fn unmatched_prompt_is_an_error() {
        let gw = LlmGateway::scripted(vec![rule(&["boiler"], "x")]).unwrap();
        assert_eq!(
            gw.complete(&req("nothing relevant")),
            Err(LlmError::NoRuleMatched { tag: RequestTag::L1Select })
        );
        assert_eq!(gw.audit_log().len(), 1);
        assert!(gw.audit_log()[0].error.is_some());
    }

    #[test]
    fn first_rule_wins() {
        let gw = LlmGateway::scripted(vec![rule(&["a"], "first"), rule(&["a"], "second")]).unwrap();
        assert_eq!(gw.complete(&req("a")).unwrap(), "first");
    }

    #[test]
    fn max_uses_falls_through_to_next_rule() {
        let mut limited = rule(&["a"], "first");
        limited.max_uses = Some(1);
        let gw = LlmGateway::scripted(vec![limited, rule(&["a"], "second")]).unwrap();
        assert_eq!(gw.complete(&req("a")).unwrap(), "first");
        assert_eq!(gw.complete(&req("a")).unwrap(), "second");
    }

    #[test]
    fn matchers_are_case_sensitive() {
        let gw = LlmGateway::scripted(vec![rule(&["Boiler"], "x")]).unwrap();
        assert!(gw.complete(&req("boiler")).is_err());
    }

    #[test]
    fn rules_without_matchers_are_rejected() {
        assert!(matches!(
            ScriptedBackend::new(vec![rule(&[], "x")]),
            Err(LlmError::InvalidRules(_))
        ));
    }

    #[test]
    fn long_completion_is_truncated_with_warning() {
        let gw = LlmGateway::scripted(vec![rule(&["a"], "one two\nthree four five")]).unwrap();
        let mut r = req("a");
        r.max_words = 3;
        assert_eq!(gw.complete(&r).unwrap(), "one two\nthree");
        let log = gw.audit_log();
        assert!(log[0].warning.is_some());
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let gw = LlmGateway::scripted(vec![rule(&["a"], "x")]).unwrap();
        let mut r = req("a");
        r.turns.push(ChatTurn::assistant("hi"));
        assert!(matches!(gw.complete(&r), Err(LlmError::InvalidRequest(_))));
        r.turns.clear();
        assert!(matches!(gw.complete(&r), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn audit_replay_reproduces_completions() {
        let rules = vec![
            ScriptedRule { max_uses: Some(1), ..rule(&["x"], "once") },
            rule(&["x"], "after"),
            rule(&["y"], "why"),
        ];
        let gw = LlmGateway::scripted(rules.clone()).unwrap();
        for text in ["x", "y", "x", "x"] {
            gw.complete(&req(text)).unwrap();
        }
        let replay = LlmGateway::scripted(rules).unwrap();
        for record in gw.audit_log() {
            assert_eq!(replay.complete(&record.request).ok(), record.response);
        }
        let indices: Vec<u64> = gw.audit_log().iter().map(|r| r.index).collect();
        assert_eq!(indices, vec![0, 1, 2, 3]);
    }

    fn plan_slots() -> BTreeMap<&'static str, String> {
        [("context", "c"), ("state", "s"), ("query", "q")]
            .into_iter()
            .map(|(k, v)| (k, v.to_string()))
            .collect()
    }

    #[test]
    fn plan_template_has_section_headers() {
        let t = TemplateSet::builtin();
        let text = t.render(PLAN_TEMPLATE, &plan_slots()).unwrap();
        for header in ["[TASK TYPES]", "[CONTEXT]", "[QUERY]", "[OUTPUT FORMAT]"] {
            assert!(text.contains(header), "missing {header}");
        }
    }

    #[test]
    fn missing_and_unused_slots() {
        let t = TemplateSet::builtin();
        let mut slots = plan_slots();
        slots.remove("query");
        assert_eq!(
            t.render(PLAN_TEMPLATE, &slots),
            Err(TemplateError::MissingSlot("query".into()))
        );
        let mut slots = plan_slots();
        slots.insert("bogus", "x".into());
        assert_eq!(
            t.render(PLAN_TEMPLATE, &slots),
            Err(TemplateError::UnusedSlot("bogus".into()))
        );
        assert_eq!(
            t.render("nope", &slots),
            Err(TemplateError::UnknownTemplate("nope".into()))
        );
    }

    #[test]
    fn replan_template_extends_plan_template() {
        let t = TemplateSet::builtin();
        let replan = t.raw(REPLAN_TEMPLATE).unwrap();
        let plan = t.raw(PLAN_TEMPLATE).unwrap();
        let head = &plan[..plan.find(OUTPUT_FORMAT_HEADER).unwrap()];
        assert!(replan.starts_with(head));
        assert!(replan.ends_with(&plan[plan.find(OUTPUT_FORMAT_HEADER).unwrap()..]));
        let prev = replan.find("[PREVIOUS TASK]").unwrap();
        assert!(prev < replan.find(OUTPUT_FORMAT_HEADER).unwrap());
        assert!(prev < replan.find("[CACHED PLAN]").unwrap());
    }

    #[test]
    fn compliance_check_precedes_task_generation() {
        let t = TemplateSet::builtin();
        for name in [PLAN_TEMPLATE, REPLAN_TEMPLATE] {
            let text = t.raw(name).unwrap();
            let check = text.find("Compliance check").unwrap();
            let gen = text.find("Task generation").unwrap();
            assert!(check < gen, "{name}");
        }
    }

    #[test]
    fn slot_values_are_not_reexpanded() {
        let t = TemplateSet::builtin();
        let mut slots = plan_slots();
        slots.insert("query", "{{state}}".into());
        let text = t.render(PLAN_TEMPLATE, &slots).unwrap();
        assert!(text.contains("[QUERY]\n{{state}}"));
    }
}
