use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use saycomply::episode::SystemClock;
use saycomply::eval::{emit_report, load_suite, run_suite, LlmSource, ReportFormat, SuiteContext};
use saycomply::retrieval::Retriever;
use saycomply::store::{ingest_corpus, load_store, save_store, Level, SummaryGenerator};
use saycomply::{run_to_completion, EpisodeConfig, EpisodeRuntime, RetrievalMethod, WorldModel};
use saycomply_service::gateway::{self, AppState, EpisodeEventWire, GatewayConfig, DEFAULT_BIND};
use saycomply_service::setup::{embedder, templates, LlmChoice};

#[derive(Parser)]
#[command(name = "saycomply", version, about = "Compliance-grounded task planning for field robots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    Md,
    Csv,
}

#[derive(clap::Args)]
struct Backends {
    /// Scripted LLM rules file; without it the remote backend is read from SAYCOMPLY_LLM_*.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(clap::Args)]
struct Retrieval {
    #[arg(long, default_value = "tree")]
    method: RetrievalMethod,
    /// Context budget in words (default: SAYCOMPLY_CONTEXT_BUDGET or 4000).
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
}

impl Retrieval {
    fn config(&self) -> EpisodeConfig {
        EpisodeConfig {
            method: self.method,
            budget: self.budget.unwrap_or_else(EpisodeConfig::budget_from_env),
            top_k: self.top_k,
            ..Default::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus, generating missing level-1 summaries.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        backends: Backends,
    },
    /// Print the retrieved context and trace for a query as JSON.
    Retrieve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        query: String,
        #[command(flatten)]
        retrieval: Retrieval,
        #[command(flatten)]
        backends: Backends,
    },
    /// Run one episode and print its event log as JSON lines.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        query: String,
        #[command(flatten)]
        retrieval: Retrieval,
        #[command(flatten)]
        backends: Backends,
        /// Level-1 entry receiving inspection results.
        #[arg(long)]
        observation_log: Option<String>,
        /// Save the corpus after the episode.
        #[arg(long)]
        save: bool,
    },
    /// Score a labeled suite under one or more retrieval methods.
    Eval {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        world: PathBuf,
        /// Comma-separated list of tree, top3, env.
        #[arg(long, default_value = "tree,top3,env", value_delimiter = ',')]
        method: Vec<RetrievalMethod>,
        #[arg(long, value_enum, default_value = "md")]
        report: Report,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        backends: Backends,
    },
    /// Start the HTTP gateway.
    Serve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long, env = "SAYCOMPLY_BIND", default_value = DEFAULT_BIND)]
        bind: SocketAddr,
        /// Directory of static console assets served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        max_concurrent: usize,
        #[arg(long, default_value_t = 25)]
        long_poll_secs: u64,
        #[arg(long)]
        observation_log: Option<String>,
        /// Save the corpus after each orientation.
        #[arg(long)]
        persist: bool,
        #[command(flatten)]
        retrieval: Retrieval,
        #[command(flatten)]
        backends: Backends,
    },
}

fn load(corpus: &Path, embedder: &dyn saycomply::Embedder) -> Result<saycomply::ContextStore> {
    load_store(corpus, embedder).with_context(|| format!("loading corpus {}", corpus.display()))
}

fn load_world(path: &Path) -> Result<WorldModel> {
    WorldModel::load(path).with_context(|| format!("loading world {}", path.display()))
}

fn runtime(backends: &Backends) -> Result<EpisodeRuntime> {
    let llm = LlmChoice::resolve(backends.rules.as_deref())?.gateway()?;
    Ok(EpisodeRuntime::new(
        embedder(),
        Arc::new(llm),
        Arc::new(templates(backends.prompts.as_deref())?),
        Arc::new(SystemClock),
    ))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Ingest { corpus, backends } => {
            let embedder = embedder();
            let templates = templates(backends.prompts.as_deref())?;
            let llm = match LlmChoice::resolve(backends.rules.as_deref()) {
                Ok(choice) => Some(choice.gateway()?),
                Err(_) => None,
            };
            let summaries = llm.as_ref().map(|llm| SummaryGenerator { llm, templates: &templates });
            let store = ingest_corpus(&corpus, embedder.as_ref(), summaries)
                .with_context(|| format!("ingesting {}", corpus.display()))?;
            let count = |l| store.entries_at(Some(l), None).len();
            println!(
                "ingested {} entries (version {}): L1 {}, L2 {}, L3 {}",
                store.len(),
                store.version(),
                count(Level::L1),
                count(Level::L2),
                count(Level::L3)
            );
        }
        Command::Retrieve { corpus, query, retrieval, backends } => {
            let rt = runtime(&backends)?;
            let store = load(&corpus, rt.embedder.as_ref())?;
            let config = retrieval.config();
            let retriever = Retriever {
                embedder: rt.embedder.as_ref(),
                llm: &rt.llm,
                templates: &rt.templates,
                budget: config.budget,
                top_k: config.top_k,
            };
            let (context, trace) = retriever.retrieve(config.method, &query, &store)?;
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "context": context, "trace": trace }))?);
        }
        Command::Run { corpus, world, query, retrieval, backends, observation_log, save } => {
            let rt = runtime(&backends)?;
            let store = RwLock::new(load(&corpus, rt.embedder.as_ref())?);
            let mut world = load_world(&world)?;
            let config = EpisodeConfig { observation_log, ..retrieval.config() };
            let state = run_to_completion(&query, &store, &mut world, &config, &rt);
            for event in &state.events {
                println!("{}", serde_json::to_string(&EpisodeEventWire::new(&state.id, event))?);
            }
            if save {
                save_store(&store.read().unwrap_or_else(|e| e.into_inner()), &corpus)?;
            }
            if let Some(err) = &state.error {
                bail!("episode {} errored: {err}", state.id);
            }
        }
        Command::Eval { suite, corpus, world, method, report, budget, out, backends } => {
            if method.is_empty() {
                bail!("--method needs at least one of tree, top3, env");
            }
            let cases = load_suite(&suite).with_context(|| format!("loading suite {}", suite.display()))?;
            let embedder = embedder();
            let store = load(&corpus, embedder.as_ref())?;
            let world = load_world(&world)?;
            let llm = match LlmChoice::resolve(backends.rules.as_deref())? {
                LlmChoice::Scripted(rules) => LlmSource::Scripted(rules),
                remote => LlmSource::Shared(Arc::new(remote.gateway()?)),
            };
            let ctx = SuiteContext {
                store: &store,
                world: &world,
                embedder,
                templates: Arc::new(templates(backends.prompts.as_deref())?),
                llm: &llm,
            };
            let config = EpisodeConfig {
                budget: budget.unwrap_or_else(EpisodeConfig::budget_from_env),
                ..Default::default()
            };
            let runs = method
                .iter()
                .map(|m| run_suite(&cases, *m, &config, &ctx))
                .collect::<Result<Vec<_>, _>>()?;
            let format = match report {
                Report::Md => ReportFormat::Markdown,
                Report::Csv => ReportFormat::Csv,
            };
            let text = emit_report(&runs, format);
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Serve {
            corpus,
            world,
            bind,
            static_dir,
            max_concurrent,
            long_poll_secs,
            observation_log,
            persist,
            retrieval,
            backends,
        } => {
            let rt = runtime(&backends)?;
            let store = load(&corpus, rt.embedder.as_ref())?;
            let world = load_world(&world)?;
            let config = GatewayConfig {
                episode: EpisodeConfig { observation_log, ..retrieval.config() },
                max_concurrent,
                long_poll: Duration::from_secs(long_poll_secs),
                persist_dir: persist.then_some(corpus),
                static_dir,
            };
            let app = AppState::new(store, world, rt, config);
            tokio::runtime::Runtime::new()?.block_on(gateway::serve(app, bind))?;
        }
    }
    Ok(())
}
