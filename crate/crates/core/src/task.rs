//! The task loop: ask the policy for one action per round, route it to a core
//! tool, a created tool, or the build loop, and feed the observation back
//! until the policy answers or the round budget runs out.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, warn};

use crate::build::{BuildError, Builder, TicketIssuer, TicketSource};
use crate::clock::{Clock, SystemClock};
use crate::core_tools::{CoreToolbox, ImageRef};
use crate::parser::{
    parse_turn, render_observation, AgentAction, Observation, ToolInvocation, CREATE_TOOL_NAME,
    DEFAULT_OBSERVATION_CAP,
};
use crate::policy::{assemble_task_prompt, ChatMessage, PolicyAdapter};
use crate::prompts;
use crate::registry::{HitSource, Registry, ToolMemory, UsageEvent};
use crate::sandbox::{Sandbox, SandboxError};

pub const DEFAULT_MAX_ROUNDS: u32 = 12;
pub const DEFAULT_RETRIEVAL_K: usize = 8;
pub const MAX_CONSECUTIVE_PARSE_FAILURES: u32 = 3;
pub const TOOL_CREATION_FAILED: &str = "tool creation failed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task_id: String,
    pub max_rounds: u32,
    pub observation_cap: usize,
    /// How many created tools retrieval may offer in the prompt.
    pub retrieval_k: usize,
    #[serde(default)]
    pub image: Option<ImageRef>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            task_id: "task".into(),
            max_rounds: DEFAULT_MAX_ROUNDS,
            observation_cap: DEFAULT_OBSERVATION_CAP,
            retrieval_k: DEFAULT_RETRIEVAL_K,
            image: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Running,
    Answered,
    Exhausted,
    Aborted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskState {
    pub history: Vec<ChatMessage>,
    pub round: u32,
    pub last_observation: Option<Observation>,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolUse {
    pub name: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub answer: Option<String>,
    pub status: TaskStatus,
    pub rounds_used: u32,
    pub tools_invoked: Vec<ToolUse>,
    pub tickets_raised: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

/// One line of the structured run log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLogRecord {
    pub task_id: String,
    pub round: u32,
    pub action: String,
    pub tool: Option<String>,
    pub ok: Option<bool>,
    pub duration_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub result: TaskResult,
    pub state: TaskState,
    pub log: Vec<RunLogRecord>,
}

impl TaskOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolSource {
    Core,
    Created,
    Missing,
}

/// Core tools shadow created ones of the same name.
pub fn identify_tool_source(name: &str, memory: &ToolMemory) -> ToolSource {
    if memory.core.contains_key(name) {
        ToolSource::Core
    } else if memory.resolve(name).is_some() {
        ToolSource::Created
    } else {
        ToolSource::Missing
    }
}

pub struct Agent {
    policy: Arc<PolicyAdapter>,
    registry: Arc<Registry>,
    toolbox: Arc<CoreToolbox>,
    sandbox: Arc<dyn Sandbox>,
    builder: Option<Arc<Builder>>,
    clock: Arc<dyn Clock>,
}

struct Dispatch {
    observation: Observation,
    ticket: Option<String>,
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

impl Agent {
    pub fn new(
        policy: Arc<PolicyAdapter>,
        registry: Arc<Registry>,
        toolbox: Arc<CoreToolbox>,
        sandbox: Arc<dyn Sandbox>,
    ) -> Self {
        Self {
            policy,
            registry,
            toolbox,
            sandbox,
            builder: None,
            clock: Arc::new(SystemClock),
        }
    }

    /// Enable tool creation. Without a builder, missing tools yield a failed observation.
    pub fn with_builder(mut self, builder: Arc<Builder>) -> Self {
        self.builder = Some(builder);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    /// Initial history: core tools plus the created tools retrieved for `query`.
    pub fn initial_history(&self, query: &str, cfg: &TaskConfig) -> Vec<ChatMessage> {
        let memory = self.registry.snapshot();
        let created: Vec<_> = self
            .registry
            .search(query, cfg.retrieval_k.max(1) + memory.core.len())
            .into_iter()
            .filter(|h| h.source == HitSource::Created)
            .take(cfg.retrieval_k)
            .filter_map(|h| memory.created.get(&h.name).map(|r| r.package.descriptor()))
            .collect();
        assemble_task_prompt(query, self.toolbox.descriptors(), &created)
    }

    pub fn run_task(&self, query: &str, cfg: &TaskConfig) -> TaskOutcome {
        let mut state = TaskState {
            history: self.initial_history(query, cfg),
            round: 0,
            last_observation: None,
            status: TaskStatus::Running,
        };
        let mut result = TaskResult {
            answer: None,
            status: TaskStatus::Running,
            rounds_used: 0,
            tools_invoked: Vec::new(),
            tickets_raised: Vec::new(),
            abort_reason: None,
        };
        let mut log = Vec::new();
        let issuer = TicketIssuer::new(cfg.task_id.clone());
        let mut parse_failures = 0u32;
        let mut recent_thought = String::new();
        let max_rounds = cfg.max_rounds.max(1);

        while state.status == TaskStatus::Running {
            if state.round >= max_rounds {
                self.handle_round_exhaustion(&mut state, &mut result, &mut log, cfg);
                break;
            }
            state.round += 1;
            let started = Instant::now();
            let response = match self.policy.complete(&state.history) {
                Ok(r) => r,
                Err(e) => {
                    warn!(task = %cfg.task_id, error = %e, "policy failure");
                    state.status = TaskStatus::Aborted;
                    result.abort_reason = Some(e.to_string());
                    break;
                }
            };
            state.history.push(ChatMessage::assistant(response.clone()));
            let turn = match parse_turn(&response) {
                Ok(turn) => {
                    parse_failures = 0;
                    turn
                }
                Err(e) => {
                    parse_failures += 1;
                    log.push(record(cfg, state.round, "parse_error", None, None, elapsed_ms(started)));
                    if parse_failures >= MAX_CONSECUTIVE_PARSE_FAILURES {
                        state.status = TaskStatus::Aborted;
                        result.abort_reason = Some(format!("{parse_failures} consecutive unparseable turns: {e}"));
                    } else {
                        state.history.push(ChatMessage::user(prompts::format_error_prompt(&e.to_string())));
                    }
                    continue;
                }
            };
            if !turn.think_blocks.is_empty() {
                recent_thought = turn.think_blocks.join("\n");
            }
            match turn.payload {
                AgentAction::FinalAnswer(answer) => {
                    log.push(record(cfg, state.round, "answer", None, None, elapsed_ms(started)));
                    result.answer = Some(answer);
                    state.status = TaskStatus::Answered;
                }
                AgentAction::Thought(_) => {
                    log.push(record(cfg, state.round, "thought", None, None, elapsed_ms(started)));
                    state.history.push(ChatMessage::user(prompts::CONTINUE_PROMPT));
                }
                AgentAction::ToolCall(call) => {
                    let context = ticket_context(query, &recent_thought);
                    let d = self.dispatch(&call, cfg, &issuer, &context);
                    result.tools_invoked.push(ToolUse {
                        name: d.observation.tool_name.clone(),
                        ok: d.observation.ok,
                    });
                    result.tickets_raised.extend(d.ticket);
                    log.push(record(
                        cfg,
                        state.round,
                        "tool_call",
                        Some(d.observation.tool_name.clone()),
                        Some(d.observation.ok),
                        elapsed_ms(started),
                    ));
                    self.observe(&mut state, d.observation, cfg);
                }
                AgentAction::CreateRequest(text) => {
                    let context = ticket_context(query, &recent_thought);
                    let ticket = issuer.issue(&context, TicketSource::Request(&text), &cfg.task_id);
                    result.tickets_raised.push(ticket.id.clone());
                    let observation = match self.build_and_register(&ticket) {
                        Ok(name) => {
                            let memory = self.registry.snapshot();
                            let pkg = &memory.created[&name].package;
                            Observation::success(
                                CREATE_TOOL_NAME,
                                format!(
                                    "Created tool `{name}`: {}\nArguments: {}",
                                    pkg.invocation_schema.description,
                                    serde_json::to_string(&pkg.invocation_schema.arguments)
                                        .expect("schema serializes")
                                ),
                                0,
                            )
                        }
                        Err(detail) => creation_failed(CREATE_TOOL_NAME, &detail),
                    };
                    log.push(record(
                        cfg,
                        state.round,
                        "create_request",
                        Some(CREATE_TOOL_NAME.into()),
                        Some(observation.ok),
                        elapsed_ms(started),
                    ));
                    self.observe(&mut state, observation, cfg);
                }
            }
        }

        result.status = state.status;
        result.rounds_used = state.round;
        if result.status != TaskStatus::Answered {
            result.answer = None;
        }
        TaskOutcome { result, state, log }
    }

    fn observe(&self, state: &mut TaskState, observation: Observation, cfg: &TaskConfig) {
        let observation = observation.capped(cfg.observation_cap);
        state
            .history
            .push(ChatMessage::user(render_observation(&observation, cfg.observation_cap)));
        state.last_observation = Some(observation);
    }

    /// Forced-answer prompt after the last regular round.
    fn handle_round_exhaustion(
        &self,
        state: &mut TaskState,
        result: &mut TaskResult,
        log: &mut Vec<RunLogRecord>,
        cfg: &TaskConfig,
    ) {
        state.history.push(ChatMessage::user(prompts::FORCED_ANSWER_PROMPT));
        state.round += 1;
        let started = Instant::now();
        match self.policy.complete(&state.history) {
            Ok(response) => {
                state.history.push(ChatMessage::assistant(response.clone()));
                match parse_turn(&response).map(|t| t.payload) {
                    Ok(AgentAction::FinalAnswer(answer)) => {
                        result.answer = Some(answer);
                        state.status = TaskStatus::Answered;
                        log.push(record(cfg, state.round, "answer", None, None, elapsed_ms(started)));
                    }
                    other => {
                        let kind = other.as_ref().map_or("parse_error", |a| a.kind());
                        log.push(record(cfg, state.round, kind, None, None, elapsed_ms(started)));
                        state.status = TaskStatus::Exhausted;
                    }
                }
            }
            Err(e) => {
                state.status = TaskStatus::Aborted;
                result.abort_reason = Some(e.to_string());
            }
        }
    }

    fn dispatch(&self, call: &ToolInvocation, cfg: &TaskConfig, issuer: &TicketIssuer, context: &str) -> Dispatch {
        let memory = self.registry.snapshot();
        match identify_tool_source(&call.name, &memory) {
            ToolSource::Core => {
                let started = Instant::now();
                let observation = match self.toolbox.invoke(call, cfg.image.as_ref()) {
                    Ok(out) => Observation::success(&call.name, out, elapsed_ms(started)),
                    Err(e) => Observation::failure(&call.name, e.kind(), e.to_string(), elapsed_ms(started)),
                };
                Dispatch {
                    observation,
                    ticket: None,
                }
            }
            ToolSource::Created => {
                let name = memory.resolve(&call.name).expect("created tool resolves").to_string();
                Dispatch {
                    observation: self.execute_created(&memory, &name, &call.arguments_value(), cfg),
                    ticket: None,
                }
            }
            ToolSource::Missing => {
                let ticket = issuer.issue(context, TicketSource::MissingCall(call), &cfg.task_id);
                debug!(ticket = %ticket.id, tool = %call.name, "missing tool; building");
                let observation = match self.build_and_register(&ticket) {
                    Ok(name) => {
                        let memory = self.registry.snapshot();
                        self.execute_created(&memory, &name, &call.arguments_value(), cfg)
                    }
                    Err(detail) => creation_failed(&call.name, &detail),
                };
                Dispatch {
                    observation,
                    ticket: Some(ticket.id),
                }
            }
        }
    }

    fn build_and_register(&self, ticket: &crate::build::BuildTicket) -> Result<String, String> {
        let builder = self.builder.as_ref().ok_or_else(|| "no builder configured".to_string())?;
        let outcome = builder.run_build(ticket).map_err(|e| match e {
            BuildError::BuildExhausted { iterations, .. } => {
                format!("no candidate passed tests and review in {iterations} attempts")
            }
            other => other.to_string(),
        })?;
        self.registry.register(&outcome.package).map_err(|e| e.to_string())
    }

    /// Run a created tool in the sandbox and record the execution.
    fn execute_created(&self, memory: &ToolMemory, name: &str, args: &Value, cfg: &TaskConfig) -> Observation {
        let Some(record) = memory.created.get(name) else {
            return Observation::failure(name, "unknown_tool", format!("no created tool named {name}"), 0);
        };
        let observation = match self.sandbox.execute_tool(&record.package, args) {
            Err(SandboxError::SchemaViolation(v)) => {
                return Observation::failure(name, "invalid_arguments", v.to_string(), 0);
            }
            Err(e) => Observation::failure(name, "sandbox_unavailable", e.to_string(), 0),
            Ok(r) if r.timed_out => Observation::failure(name, "timeout", r.stderr.trim().to_string(), r.duration_ms),
            Ok(r) if r.success() => Observation::success(name, r.stdout.trim().to_string(), r.duration_ms),
            Ok(r) => {
                let detail = if r.stderr.trim().is_empty() { r.stdout.trim() } else { r.stderr.trim() };
                Observation::failure(name, "runtime_error", format!("exit code {}: {detail}", r.exit_code), r.duration_ms)
            }
        };
        let event = UsageEvent {
            tool: name.to_string(),
            task_id: cfg.task_id.clone(),
            ok: observation.ok,
            duration_ms: observation.duration_ms,
            at_ms: self.clock.now_ms(),
        };
        if let Err(e) = self.registry.log_usage(&event) {
            warn!(tool = name, error = %e, "failed to record tool usage");
        }
        observation
    }
}

fn creation_failed(tool: &str, detail: &str) -> Observation {
    Observation::failure(tool, "tool_creation_failed", format!("{TOOL_CREATION_FAILED}: {detail}"), 0)
}

fn ticket_context(query: &str, recent_thought: &str) -> String {
    if recent_thought.trim().is_empty() {
        format!("Task: {}", query.trim())
    } else {
        format!("Task: {}\nRecent reasoning: {}", query.trim(), recent_thought.trim())
    }
}

fn record(
    cfg: &TaskConfig,
    round: u32,
    action: &str,
    tool: Option<String>,
    ok: Option<bool>,
    duration_ms: u64,
) -> RunLogRecord {
    RunLogRecord {
        task_id: cfg.task_id.clone(),
        round,
        action: action.into(),
        tool,
        ok,
        duration_ms,
    }
}
