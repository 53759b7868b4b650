mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;
use toolforge::policy::Mode;

use crate::config::{FileConfig, Overrides, Settings};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{message}")]
    Runtime { kind: &'static str, message: String },
}

impl CliError {
    pub fn runtime(kind: &'static str, err: impl std::fmt::Display) -> Self {
        CliError::Runtime {
            kind,
            message: err.to_string(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime { kind, .. } => kind,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime { .. } => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "toolforge", version, about = "Tool-creating ReAct agent runtime")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML config file; flags and environment variables override its keys.
    #[arg(long, global = true, env = "TOOLFORGE_CONFIG")]
    config: Option<PathBuf>,
    /// Registry root directory.
    #[arg(long, global = true, env = "TOOLFORGE_REGISTRY")]
    registry: Option<PathBuf>,
    /// Chat-completion endpoint URL.
    #[arg(long, global = true, env = "TOOLFORGE_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, global = true, env = "TOOLFORGE_MODEL")]
    model: Option<String>,
    /// live, record or replay.
    #[arg(long, global = true, env = "TOOLFORGE_MODE")]
    mode: Option<Mode>,
    /// Transcript file read in replay mode and appended to in record mode.
    #[arg(long, global = true, env = "TOOLFORGE_TRANSCRIPT")]
    transcript: Option<PathBuf>,
    #[arg(long, global = true, env = "TOOLFORGE_MAX_ROUNDS")]
    max_rounds: Option<u32>,
    /// Wall-clock limit for each sandbox run, in milliseconds.
    #[arg(long, global = true, env = "TOOLFORGE_TIMEOUT_MS")]
    timeout_ms: Option<u64>,
    /// Seed for sampling.
    #[arg(long, global = true, env = "TOOLFORGE_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "TOOLFORGE_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    /// Log to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one query with the agent loop.
    Run(commands::RunArgs),
    /// Run the build loop on a ticket file and register the result.
    Build(commands::BuildArgs),
    /// Merge, prune and label the tool library into a new generation.
    Consolidate(commands::ConsolidateArgs),
    /// Dataset curation.
    #[command(subcommand)]
    Curate(commands::CurateCommand),
    /// Library size and reuse@k.
    Stats(commands::StatsArgs),
    /// Run a query against a recorded transcript.
    Replay(commands::ReplayArgs),
}

fn init_logging(verbose: u8) {
    use tracing_subscriber::filter::LevelFilter;
    let level = match verbose {
        0 => return,
        1 => LevelFilter::INFO,
        2 => LevelFilter::DEBUG,
        _ => LevelFilter::TRACE,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
}

fn settings(global: &GlobalArgs) -> Result<Settings, CliError> {
    let file = match &global.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let flags = Overrides {
        registry: global.registry.clone(),
        endpoint: global.endpoint.clone(),
        model: global.model.clone(),
        mode: global.mode,
        transcript: global.transcript.clone(),
        max_rounds: global.max_rounds,
        timeout_ms: global.timeout_ms,
        seed: global.seed,
        api_key: global.api_key.clone(),
    };
    Settings::resolve(flags, file)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_logging(cli.global.verbose);
    let mut settings = settings(&cli.global)?;
    match cli.command {
        Command::Run(args) => commands::run(&settings, args),
        Command::Build(args) => commands::build(&settings, args),
        Command::Consolidate(args) => commands::consolidate(&settings, args),
        Command::Curate(cmd) => commands::curate(&settings, cmd),
        Command::Stats(args) => commands::stats(&settings, args),
        Command::Replay(args) => {
            settings.policy.mode = Mode::Replay;
            settings.policy.transcript_path = Some(args.transcript.clone());
            commands::run(&settings, args.into_run())
        }
    }
}

fn report(err: &CliError) {
    let record = json!({ "error": { "kind": err.kind(), "message": err.to_string() } });
    eprintln!("{record}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            report(&err);
            return ExitCode::from(err.exit_code());
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            report(&err);
            ExitCode::from(err.exit_code())
        }
    }
}
