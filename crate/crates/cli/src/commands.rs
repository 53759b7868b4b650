use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use toolforge::bench::{self, DatasetItem, ExportRow, FilterVerdict, SampleScope};
use toolforge::build::{BuildConfig, BuildTicket, Builder};
use toolforge::consolidation::{run_consolidation, ConsolidationPolicy};
use toolforge::core_tools::{CoreToolbox, FixtureCorpus, LiveWeb};
use toolforge::embed::{Embedder, NgramEmbedder, RemoteEmbedder};
use toolforge::policy::{digest, ChatMessage, Mode, PolicyAdapter};
use toolforge::registry::{FsStorage, Registry, RegistryError, ToolMemory};
use toolforge::sandbox::ProcessSandbox;
use toolforge::task::{Agent, TaskConfig, TaskStatus};

use crate::config::Settings;
use crate::CliError;

#[derive(Debug, Args)]
pub struct RunArgs {
    pub query: String,
    /// Defaults to `task-` plus the first 12 hex digits of the query digest.
    #[arg(long)]
    pub task_id: Option<String>,
    /// Fixture corpus directory for the core tools.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Id of a fixture image attached to the task.
    #[arg(long)]
    pub image: Option<String>,
    /// Write the structured run log (one JSON record per line) here.
    #[arg(long)]
    pub run_log: Option<PathBuf>,
    /// Print the full task result as JSON.
    #[arg(long)]
    pub json: bool,
    /// Disable tool creation; calls to missing tools fail.
    #[arg(long)]
    pub no_build: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub transcript: PathBuf,
    pub query: String,
    #[arg(long)]
    pub task_id: Option<String>,
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<String>,
    #[arg(long)]
    pub run_log: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub no_build: bool,
}

impl ReplayArgs {
    pub fn into_run(self) -> RunArgs {
        RunArgs {
            query: self.query,
            task_id: self.task_id,
            fixtures: self.fixtures,
            image: self.image,
            run_log: self.run_log,
            json: self.json,
            no_build: self.no_build,
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// JSON build ticket.
    pub ticket: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConsolidateArgs {
    /// TOML file overriding consolidation policy keys.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Print the report without committing a new generation.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum CurateCommand {
    /// Drop questions the policy answers correctly without tools.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Consult the policy as a judge when the rule-based check fails.
        #[arg(long)]
        policy_judge: bool,
    },
    /// Diversity sampling: random seeds, then min-max selection.
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Number of random seed questions per group.
        #[arg(long)]
        seeds: usize,
        /// Min-max steps per group; defaults by question type.
        #[arg(long)]
        iterations: Option<usize>,
        /// Sample the whole pool at once instead of per category.
        #[arg(long)]
        global: bool,
    },
    /// Compare predicted answers with references.
    Judge {
        #[arg(long, requires = "reference", conflicts_with = "input")]
        predicted: Option<String>,
        #[arg(long, requires = "predicted")]
        reference: Option<String>,
        /// Records with `predicted` and `reference` fields (and optional `id`).
        #[arg(long, required_unless_present = "predicted")]
        input: Option<PathBuf>,
        #[arg(long)]
        policy_judge: bool,
    },
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Thresholds for reuse@k.
    #[arg(long, num_args = 1.., default_values_t = [1u64, 5, 10],
          value_parser = clap::value_parser!(u64).range(1..))]
    pub reuse: Vec<u64>,
    /// Report on a stored generation instead of the live one.
    #[arg(long)]
    pub generation: Option<u64>,
    #[arg(long)]
    pub json: bool,
}

fn registry_err(e: RegistryError) -> CliError {
    match e {
        RegistryError::ConsolidationBusy => CliError::runtime("busy", e),
        other => CliError::runtime("registry", other),
    }
}

fn embedder(settings: &Settings) -> Arc<dyn Embedder> {
    match &settings.embedding_endpoint {
        Some(url) => Arc::new(RemoteEmbedder::new(
            url.clone(),
            settings.embedding_model.clone(),
            settings.policy.api_key.clone(),
            Duration::from_millis(settings.policy.request_timeout_ms),
        )),
        None => Arc::new(NgramEmbedder::default()),
    }
}

fn open_registry(settings: &Settings) -> Result<Registry, CliError> {
    Registry::open_with(&settings.registry, Arc::new(FsStorage), embedder(settings)).map_err(registry_err)
}

fn adapter(settings: &Settings) -> Result<Arc<PolicyAdapter>, CliError> {
    PolicyAdapter::from_config(settings.policy.clone())
        .map(Arc::new)
        .map_err(|e| CliError::runtime("policy", e))
}

fn builder(settings: &Settings, policy: &Arc<PolicyAdapter>) -> Result<Builder, CliError> {
    let sandbox = ProcessSandbox::new(settings.sandbox.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut config = BuildConfig::default();
    if let Some(n) = settings.max_build_iterations {
        config.max_iterations = n;
    }
    Ok(Builder::new(policy.clone(), critic_adapter(settings, policy)?, Arc::new(sandbox), config))
}

/// A separate reviewer endpoint is only used live; recorded and replayed runs
/// keep every exchange in the one transcript.
fn critic_adapter(settings: &Settings, policy: &Arc<PolicyAdapter>) -> Result<Arc<PolicyAdapter>, CliError> {
    let overridden = settings.critic_endpoint.is_some() || settings.critic_model.is_some();
    if !overridden || settings.policy.mode != Mode::Live {
        if overridden {
            tracing::warn!("critic endpoint override ignored outside live mode");
        }
        return Ok(policy.clone());
    }
    let mut config = settings.policy.clone();
    if let Some(url) = &settings.critic_endpoint {
        config.endpoint_url = url.clone();
    }
    if let Some(model) = &settings.critic_model {
        config.model_name = model.clone();
    }
    PolicyAdapter::from_config(config)
        .map(Arc::new)
        .map_err(|e| CliError::runtime("policy", e))
}

fn default_task_id(query: &str) -> String {
    let d = digest(&[ChatMessage::user(query)]);
    format!("task-{}", &d[..12])
}

pub fn run(settings: &Settings, args: RunArgs) -> Result<(), CliError> {
    let policy = adapter(settings)?;
    let registry = Arc::new(open_registry(settings)?);
    let fixtures_dir = args.fixtures.as_ref().or(settings.fixtures.as_ref());
    let corpus = match fixtures_dir {
        Some(dir) => FixtureCorpus::load(dir)
            .map_err(|e| CliError::Usage(format!("cannot load fixtures {}: {e}", dir.display())))?,
        None => FixtureCorpus::default(),
    };
    let image = match &args.image {
        Some(id) => Some(
            corpus
                .images
                .get(id)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("image {id:?} is not in the fixture corpus")))?,
        ),
        None => None,
    };
    let mut toolbox = CoreToolbox::new(corpus).with_summarizer(Box::new(policy.clone()));
    if settings.live_web {
        toolbox = toolbox.with_live(LiveWeb::new(
            settings.web_search_url.clone(),
            Duration::from_millis(settings.policy.request_timeout_ms),
        ));
    }
    let builder = builder(settings, &policy)?;
    let sandbox = builder.sandbox().clone();
    let mut agent = Agent::new(policy, registry, Arc::new(toolbox), sandbox);
    if !args.no_build {
        agent = agent.with_builder(Arc::new(builder));
    }
    let cfg = TaskConfig {
        task_id: args.task_id.unwrap_or_else(|| default_task_id(&args.query)),
        max_rounds: settings.max_rounds,
        image,
        ..TaskConfig::default()
    };
    let outcome = agent.run_task(&args.query, &cfg);
    if let Some(path) = &args.run_log {
        fs::write(path, outcome.log_jsonl()).map_err(|e| CliError::runtime("io", e))?;
    }
    let result = &outcome.result;
    if args.json {
        println!("{}", serde_json::to_string_pretty(result).expect("result serializes"));
    } else {
        println!("answer: {}", result.answer.as_deref().unwrap_or("<none>"));
        let tools: Vec<String> = result
            .tools_invoked
            .iter()
            .map(|t| format!("{}:{}", t.name, if t.ok { "ok" } else { "failed" }))
            .collect();
        println!(
            "task: {} status: {} rounds: {} tools: [{}] tickets: [{}]",
            cfg.task_id,
            serde_json::to_value(result.status).expect("status serializes").as_str().unwrap_or("?"),
            result.rounds_used,
            tools.join(", "),
            result.tickets_raised.join(", "),
        );
    }
    if result.status == TaskStatus::Aborted {
        return Err(CliError::runtime(
            "aborted",
            result.abort_reason.as_deref().unwrap_or("task aborted"),
        ));
    }
    Ok(())
}

pub fn build(settings: &Settings, args: BuildArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.ticket)
        .map_err(|e| CliError::Usage(format!("cannot read ticket {}: {e}", args.ticket.display())))?;
    let ticket: BuildTicket = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid ticket: {e}")))?;
    let policy = adapter(settings)?;
    let registry = open_registry(settings)?;
    let builder = builder(settings, &policy)?;
    let outcome = builder.run_build(&ticket).map_err(|e| CliError::runtime("build", e))?;
    let name = registry.register(&outcome.package).map_err(registry_err)?;
    println!(
        "{}",
        json!({
            "ticket": ticket.id,
            "registered": name,
            "version": outcome.package.version,
            "iterations": outcome.candidate.iteration,
        })
    );
    Ok(())
}

/// Consolidation policy keys; any omitted key keeps its default.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    dup_similarity_threshold: Option<f64>,
    min_uses_window: Option<u64>,
    max_failure_rate: Option<f64>,
    min_uses_for_rate: Option<u64>,
    category_labels: Option<Vec<String>>,
}

fn load_policy(path: Option<&Path>) -> Result<ConsolidationPolicy, CliError> {
    let mut policy = ConsolidationPolicy::default();
    if let Some(path) = path {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read policy {}: {e}", path.display())))?;
        let file: PolicyFile = toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid policy: {e}")))?;
        if let Some(v) = file.dup_similarity_threshold {
            policy.dup_similarity_threshold = v;
        }
        if let Some(v) = file.min_uses_window {
            policy.min_uses_window = v;
        }
        if let Some(v) = file.max_failure_rate {
            policy.max_failure_rate = v;
        }
        if let Some(v) = file.min_uses_for_rate {
            policy.min_uses_for_rate = v;
        }
        if let Some(v) = file.category_labels {
            policy.category_labels = v;
        }
    }
    policy.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(policy)
}

pub fn consolidate(settings: &Settings, args: ConsolidateArgs) -> Result<(), CliError> {
    let policy = load_policy(args.policy.as_deref())?;
    let registry = open_registry(settings)?;
    let report = run_consolidation(&registry, &policy, args.dry_run).map_err(registry_err)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReuseLine {
    k: u64,
    ratio: Option<f64>,
    numerator: u64,
    denominator: u64,
}

fn reuse_lines(memory: &ToolMemory, ks: &[u64]) -> Result<Vec<ReuseLine>, CliError> {
    ks.iter()
        .map(|&k| match memory.reuse_at_k(k) {
            Ok(r) => Ok(ReuseLine {
                k,
                ratio: Some(r.as_f64()),
                numerator: r.numerator,
                denominator: r.denominator,
            }),
            Err(RegistryError::EmptyLibrary) => Ok(ReuseLine {
                k,
                ratio: None,
                numerator: 0,
                denominator: 0,
            }),
            Err(e) => Err(registry_err(e)),
        })
        .collect()
}

pub fn stats(settings: &Settings, args: StatsArgs) -> Result<(), CliError> {
    let registry = open_registry(settings)?;
    let memory = match args.generation {
        Some(g) => registry.load_generation(g).map_err(registry_err)?,
        None => (*registry.snapshot()).clone(),
    };
    let lines = reuse_lines(&memory, &args.reuse)?;
    if args.json {
        let value = json!({
            "generation": memory.generation,
            "core_tools": memory.core.len(),
            "created_tools": memory.created.len(),
            "library_size": memory.size(),
            "reuse": lines,
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("stats serialize"));
        return Ok(());
    }
    println!("generation: {}", memory.generation);
    println!("library size: {} created tools, {} core", memory.size(), memory.core.len());
    for line in lines {
        match line.ratio {
            Some(r) => println!("reuse@{}: {r:.3} ({}/{})", line.k, line.numerator, line.denominator),
            None => println!("reuse@{}: n/a (no created tools)", line.k),
        }
    }
    Ok(())
}

fn bench_err(e: bench::BenchError) -> CliError {
    CliError::runtime("bench", e)
}

fn write_rows(path: &Path, rows: &[ExportRow]) -> Result<(), CliError> {
    bench::write_rows(path, rows).map_err(bench_err)
}

#[derive(Debug, Deserialize)]
struct JudgeRecord {
    #[serde(default)]
    id: Option<String>,
    predicted: String,
    reference: String,
}

pub fn curate(settings: &Settings, cmd: CurateCommand) -> Result<(), CliError> {
    match cmd {
        CurateCommand::Filter {
            input,
            output,
            policy_judge,
        } => {
            let items = bench::read_dataset(&input).map_err(bench_err)?;
            let policy = adapter(settings)?;
            let judge = policy_judge.then_some(policy.as_ref());
            let filtered = bench::knowledge_filter(&items, &policy, judge);
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            let mut rows = Vec::new();
            for f in &filtered {
                let label = match f.verdict {
                    FilterVerdict::Solved => "solved",
                    FilterVerdict::Unsolved => "retained",
                    FilterVerdict::Undetermined => "undetermined",
                };
                *counts.entry(label).or_default() += 1;
                if f.verdict != FilterVerdict::Solved {
                    rows.push(ExportRow::new(&f.item, label, None));
                }
            }
            write_rows(&output, &rows)?;
            println!(
                "{}",
                json!({ "input": items.len(), "retained": rows.len(), "verdicts": counts })
            );
            Ok(())
        }
        CurateCommand::Sample {
            input,
            output,
            seeds,
            iterations,
            global,
        } => {
            let items = bench::read_dataset(&input).map_err(bench_err)?;
            let by_id: BTreeMap<String, DatasetItem> = items.iter().map(|i| (i.id.clone(), i.clone())).collect();
            let pool = bench::embed_items(items, embedder(settings).as_ref()).map_err(bench_err)?;
            let scope = if global {
                SampleScope::Global
            } else {
                SampleScope::PerCategory
            };
            let groups = bench::curate_sample(&pool, seeds, iterations, settings.seed, scope).map_err(bench_err)?;
            let mut rows = Vec::new();
            let mut summary = BTreeMap::new();
            for (group, state) in &groups {
                for (rank, id) in state.selected.iter().enumerate() {
                    let selection = if rank < seeds { "seed" } else { "minmax" };
                    rows.push(ExportRow::new(&by_id[id], selection, Some(rank)));
                }
                summary.insert(group.clone(), state.selected.len());
            }
            write_rows(&output, &rows)?;
            println!("{}", json!({ "selected": rows.len(), "groups": summary, "seed": settings.seed }));
            Ok(())
        }
        CurateCommand::Judge {
            predicted,
            reference,
            input,
            policy_judge,
        } => {
            let policy = if policy_judge { Some(adapter(settings)?) } else { None };
            let judge = policy.as_deref();
            if let (Some(p), Some(r)) = (predicted, reference) {
                println!("{}", bench::judge_answer(&p, &r, judge));
                return Ok(());
            }
            let path = input.expect("clap requires --input without --predicted");
            let records: Vec<JudgeRecord> = bench::read_records(&path).map_err(bench_err)?;
            let mut correct = 0;
            for (n, rec) in records.iter().enumerate() {
                let ok = bench::judge_answer(&rec.predicted, &rec.reference, judge);
                correct += usize::from(ok);
                let id = rec.id.clone().unwrap_or_else(|| (n + 1).to_string());
                println!("{id}\t{ok}");
            }
            println!("correct: {correct}/{}", records.len());
            Ok(())
        }
    }
}
