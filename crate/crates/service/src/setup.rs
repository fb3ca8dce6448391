//! Backend selection shared by the CLI verbs.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use saycomply::embedding::RemoteEmbedConfig;
use saycomply::llm::{load_rules, RemoteBackend, RemoteLlmConfig};
use saycomply::{Embedder, HashedEmbedder, LlmGateway, RemoteEmbedder, ScriptedRule, TemplateSet};

pub enum LlmChoice {
    Scripted(Vec<ScriptedRule>),
    Remote(RemoteLlmConfig),
}

impl LlmChoice {
    /// Scripted when `rules` is given, otherwise the remote backend from the environment.
    pub fn resolve(rules: Option<&Path>) -> Result<Self> {
        if let Some(path) = rules {
            let rules = load_rules(path).with_context(|| format!("loading rules {}", path.display()))?;
            return Ok(Self::Scripted(rules));
        }
        match RemoteLlmConfig::from_env() {
            Some(cfg) => Ok(Self::Remote(cfg)),
            None => bail!("no LLM configured: pass --rules <file> or set SAYCOMPLY_LLM_URL"),
        }
    }

    pub fn gateway(&self) -> Result<LlmGateway> {
        Ok(match self {
            Self::Scripted(rules) => LlmGateway::scripted(rules.clone())?,
            Self::Remote(cfg) => LlmGateway::new(RemoteBackend::new(cfg.clone())),
        })
    }
}

/// The remote embedder when `SAYCOMPLY_EMBED_URL` is set, else the hashed one.
pub fn embedder() -> Arc<dyn Embedder> {
    match RemoteEmbedConfig::from_env() {
        Some(cfg) => Arc::new(RemoteEmbedder::new(cfg)),
        None => Arc::new(HashedEmbedder::default()),
    }
}

pub fn templates(dir: Option<&Path>) -> Result<TemplateSet> {
    match dir {
        Some(d) => TemplateSet::from_dir(d).with_context(|| format!("loading prompts from {}", d.display())),
        None => Ok(TemplateSet::builtin()),
    }
}
