//! Settings resolution: command-line flags win over `TOOLFORGE_*` environment
//! variables (both handled by clap), which win over the TOML config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toolforge::policy::{Mode, PolicyConfig};
use toolforge::sandbox::SandboxSpec;

use crate::CliError;

pub const DEFAULT_REGISTRY: &str = "toolforge-registry";
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxSection {
    pub interpreter: Option<Vec<String>>,
    pub harness: Option<Vec<String>>,
    pub memory_cap_bytes: Option<u64>,
    pub network: Option<bool>,
    pub workdir: Option<PathBuf>,
}

/// Documented keys of the config file.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub registry: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub mode: Option<Mode>,
    pub transcript: Option<PathBuf>,
    pub max_rounds: Option<u32>,
    pub timeout_ms: Option<u64>,
    pub seed: Option<u64>,
    pub api_key: Option<String>,
    pub temperature: Option<f64>,
    pub request_timeout_ms: Option<u64>,
    pub fixtures: Option<PathBuf>,
    pub embedding_endpoint: Option<String>,
    pub embedding_model: Option<String>,
    pub live_web: Option<bool>,
    pub web_search_url: Option<String>,
    pub max_build_iterations: Option<u32>,
    /// Reviewer endpoint and model; both default to the policy's.
    pub critic_endpoint: Option<String>,
    pub critic_model: Option<String>,
    #[serde(default)]
    pub sandbox: SandboxSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Values given on the command line or through the environment.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub registry: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub mode: Option<Mode>,
    pub transcript: Option<PathBuf>,
    pub max_rounds: Option<u32>,
    pub timeout_ms: Option<u64>,
    pub seed: Option<u64>,
    pub api_key: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub registry: PathBuf,
    pub policy: PolicyConfig,
    pub max_rounds: u32,
    pub seed: u64,
    pub sandbox: SandboxSpec,
    pub fixtures: Option<PathBuf>,
    pub embedding_endpoint: Option<String>,
    pub embedding_model: String,
    pub live_web: bool,
    pub web_search_url: Option<String>,
    pub max_build_iterations: Option<u32>,
    pub critic_endpoint: Option<String>,
    pub critic_model: Option<String>,
}

impl Settings {
    pub fn resolve(flags: Overrides, file: FileConfig) -> Result<Self, CliError> {
        let defaults = PolicyConfig::default();
        let policy = PolicyConfig {
            endpoint_url: flags.endpoint.or(file.endpoint).unwrap_or(defaults.endpoint_url),
            model_name: flags.model.or(file.model).unwrap_or(defaults.model_name),
            temperature: file.temperature.unwrap_or(defaults.temperature),
            max_rounds_hint: 0,
            mode: flags.mode.or(file.mode).unwrap_or_default(),
            transcript_path: flags.transcript.or(file.transcript),
            api_key: flags.api_key.or(file.api_key),
            request_timeout_ms: file.request_timeout_ms.unwrap_or(defaults.request_timeout_ms),
        };
        let max_rounds = flags.max_rounds.or(file.max_rounds).unwrap_or(toolforge::task::DEFAULT_MAX_ROUNDS);
        if max_rounds == 0 {
            return Err(CliError::Usage("max-rounds must be at least 1".into()));
        }
        let policy = PolicyConfig {
            max_rounds_hint: max_rounds,
            ..policy
        };
        policy.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        let mut sandbox = SandboxSpec::default();
        if let Some(t) = flags.timeout_ms.or(file.timeout_ms) {
            sandbox.timeout_ms = t;
        }
        let s = file.sandbox;
        if let Some(v) = s.interpreter {
            sandbox.interpreter_command = v;
        }
        if let Some(v) = s.harness {
            sandbox.harness_command = v;
        }
        if let Some(v) = s.memory_cap_bytes {
            sandbox.memory_cap_bytes = v;
        }
        if let Some(v) = s.network {
            sandbox.network_allowed = v;
        }
        if let Some(v) = s.workdir {
            sandbox.workdir = v;
        }
        sandbox.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        Ok(Self {
            registry: flags
                .registry
                .or(file.registry)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_REGISTRY)),
            policy,
            max_rounds,
            seed: flags.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            sandbox,
            fixtures: file.fixtures,
            embedding_endpoint: file.embedding_endpoint,
            embedding_model: file.embedding_model.unwrap_or_else(|| "embedding".into()),
            live_web: file.live_web.unwrap_or(false),
            web_search_url: file.web_search_url,
            max_build_iterations: file.max_build_iterations,
            critic_endpoint: file.critic_endpoint,
            critic_model: file.critic_model,
        })
    }
}
