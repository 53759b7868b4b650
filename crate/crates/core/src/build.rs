//! The build loop: from a ticket to a verified tool package.
//!
//! Generation `k = 0` produces tool code and its test script in one response.
//! Each generation is tested in the sandbox and reviewed; a package is only
//! produced once the tests all pass and the reviewer approves. Otherwise the
//! sandbox report (first) and the critique (second) are fed back as one
//! observation and the next generation is requested, up to
//! [`BuildConfig::max_iterations`] generations. The loop keeps its own
//! message history, separate from the task that raised the ticket.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::clock::{Clock, SystemClock};
use crate::core_tools::ToolDescriptor;
use crate::critic::{Critic, CritiqueResult};
use crate::parser::{normalize_tool_name, truncate_chars, ToolInvocation};
use crate::policy::{ChatMessage, PolicyAdapter, PolicyError};
use crate::prompts;
use crate::sandbox::{CaseStatus, Sandbox, SandboxError, TestReport};
use crate::schema::{ArgSchema, ArgSpec, ArgType};

pub const MAX_CONTEXT_SUMMARY: usize = 1024;
pub const DEFAULT_MAX_ITERATIONS: u32 = 5;
pub const DEPENDENCY_POLICY_CASE: &str = "dependency_policy";
pub const ARTIFACT_PROTOCOL_CASE: &str = "artifact_protocol";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildTicket {
    pub id: String,
    pub context_summary: String,
    pub requirement: String,
    pub proposed_name: String,
    #[serde(default)]
    pub io_schema_hint: Option<String>,
    pub origin_task: String,
}

/// What prompted a ticket.
#[derive(Debug, Clone, Copy)]
pub enum TicketSource<'a> {
    /// The policy called a tool that does not exist.
    MissingCall(&'a ToolInvocation),
    /// The policy asked for a tool in free text.
    Request(&'a str),
}

const SLUG_STOPWORDS: &[&str] = &[
    "a", "an", "the", "need", "needs", "want", "please", "create", "build", "make", "write", "i",
    "we", "me", "us", "tool", "new", "some", "that", "which", "can", "to", "for",
];

/// Slug a free-text request into a tool name: drop filler words, keep the
/// first four remaining words.
pub fn slug_name(text: &str) -> String {
    let words: Vec<String> = text
        .split(|c: char| !c.is_ascii_alphanumeric())
        .map(str::to_ascii_lowercase)
        .filter(|w| !w.is_empty() && !SLUG_STOPWORDS.contains(&w.as_str()))
        .take(4)
        .collect();
    normalize_tool_name(&words.join("_")).unwrap_or_else(|| "custom_tool".into())
}

fn summarize_context(context: &str) -> String {
    let context = context.trim();
    if context.chars().count() <= MAX_CONTEXT_SUMMARY {
        return context.to_string();
    }
    const MARKER: &str = " [...]";
    let head: String = context.chars().take(MAX_CONTEXT_SUMMARY - MARKER.len()).collect();
    format!("{head}{MARKER}")
}

fn json_kind(value: &serde_json::Value) -> &'static str {
    use serde_json::Value;
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Build a ticket with an explicit id.
pub fn make_ticket(id: String, task_context: &str, source: TicketSource<'_>, origin_task: &str) -> BuildTicket {
    let (proposed_name, requirement, io_schema_hint) = match source {
        TicketSource::MissingCall(call) => {
            let hint = (!call.arguments.is_empty()).then(|| {
                call.arguments
                    .iter()
                    .map(|(k, v)| format!("{k}: {} (example {v})", json_kind(v)))
                    .collect::<Vec<_>>()
                    .join("; ")
            });
            let requirement = format!(
                "Implement `{}` so that the call {} returns the result the task needs.",
                call.name,
                serde_json::Value::Object(call.arguments.clone())
            );
            (call.name.clone(), requirement, hint)
        }
        TicketSource::Request(text) => (slug_name(text), text.trim().to_string(), None),
    };
    BuildTicket {
        id,
        context_summary: summarize_context(task_context),
        requirement,
        proposed_name,
        io_schema_hint,
        origin_task: origin_task.to_string(),
    }
}

/// Issues tickets with sequential ids, `<prefix>-ticket-<n>`.
#[derive(Debug)]
pub struct TicketIssuer {
    prefix: String,
    next: AtomicU64,
}

impl TicketIssuer {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            next: AtomicU64::new(1),
        }
    }

    pub fn issue(&self, task_context: &str, source: TicketSource<'_>, origin_task: &str) -> BuildTicket {
        let n = self.next.fetch_add(1, Ordering::SeqCst);
        make_ticket(format!("{}-ticket-{n}", self.prefix), task_context, source, origin_task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationSchema {
    pub description: String,
    pub arguments: ArgSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolPackage {
    pub name: String,
    pub version: u32,
    pub code: String,
    pub test_script: String,
    pub invocation_schema: InvocationSchema,
    pub dependencies: Vec<String>,
    pub test_results: TestReport,
    pub review: CritiqueResult,
    pub created_from: String,
    pub created_at_ms: u64,
}

impl ToolPackage {
    /// An unreviewed package, e.g. for direct sandbox execution. Registries refuse it.
    pub fn draft(name: &str, code: &str, arguments: ArgSchema) -> Self {
        Self {
            name: name.to_string(),
            version: 1,
            code: code.to_string(),
            test_script: String::new(),
            invocation_schema: InvocationSchema {
                description: format!("draft tool {name}"),
                arguments,
            },
            dependencies: Vec::new(),
            test_results: TestReport::from_cases(Vec::new()),
            review: CritiqueResult::unparseable(),
            created_from: String::new(),
            created_at_ms: 0,
        }
    }

    /// Dual verification: an all-pass test report and an approving review.
    pub fn is_verified(&self) -> bool {
        self.test_results.all_pass && self.review.approved
    }

    pub fn descriptor(&self) -> ToolDescriptor {
        ToolDescriptor {
            name: self.name.clone(),
            description: self.invocation_schema.description.clone(),
            schema: self.invocation_schema.arguments.clone(),
        }
    }
}

/// Parsed `# key: value` header at the top of generated tool code.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolManifest {
    pub name: Option<String>,
    pub description: String,
    pub arguments: ArgSchema,
    pub dependencies: Vec<String>,
}

static ARG_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^arg\s+([A-Za-z_][A-Za-z0-9_]*)\s*:\s*([A-Za-z]+)\s*(?:\((required|optional)\))?\s*(.*)$")
        .expect("valid regex")
});

pub fn parse_manifest(code: &str) -> Result<ToolManifest, String> {
    let mut manifest = ToolManifest {
        name: None,
        description: String::new(),
        arguments: ArgSchema::new(),
        dependencies: Vec::new(),
    };
    for line in code.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("#!") {
            continue;
        }
        let Some(body) = line.strip_prefix('#') else { break };
        let body = body.trim();
        if let Some(caps) = ARG_LINE.captures(body) {
            let ty = ArgType::parse_loose(&caps[2])
                .ok_or_else(|| format!("unknown argument type {:?}", &caps[2]))?;
            let required = caps.get(3).map_or(true, |m| m.as_str() == "required");
            let mut spec = if required { ArgSpec::required(ty) } else { ArgSpec::optional(ty) };
            spec.description = caps[4].trim().to_string();
            manifest.arguments.insert(caps[1].to_string(), spec);
        } else if let Some(v) = body.strip_prefix("tool:") {
            manifest.name = normalize_tool_name(v);
        } else if let Some(v) = body.strip_prefix("description:") {
            manifest.description = v.trim().to_string();
        } else if let Some(v) = body.strip_prefix("dependencies:") {
            manifest.dependencies = v
                .split(',')
                .map(|d| d.trim().to_ascii_lowercase())
                .filter(|d| !d.is_empty() && d != "none")
                .collect();
        }
    }
    if manifest.description.is_empty() {
        return Err("manifest header lacks a `# description:` line".into());
    }
    if manifest.arguments.is_empty() {
        return Err("manifest header declares no `# arg` lines".into());
    }
    Ok(manifest)
}

const PY_STDLIB: &[&str] = &[
    "__future__", "abc", "argparse", "array", "ast", "base64", "bisect", "calendar", "cmath",
    "collections", "contextlib", "copy", "csv", "dataclasses", "datetime", "decimal", "enum",
    "fractions", "functools", "hashlib", "heapq", "importlib", "inspect", "io", "itertools", "json",
    "math", "numbers", "operator", "os", "pathlib", "random", "re", "statistics", "string",
    "struct", "sys", "textwrap", "time", "traceback", "types", "typing", "unicodedata", "unittest",
    "warnings",
];

static IMPORT_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^\s*(?:from\s+([A-Za-z_][A-Za-z0-9_]*)[A-Za-z0-9_.]*\s+import\b|import[ \t]+([A-Za-z_][A-Za-z0-9_., \t]*))")
        .expect("valid regex")
});

/// Top-level modules imported by `source` that are neither stdlib, declared,
/// nor the tool module itself.
pub fn undeclared_imports(source: &str, declared: &[String]) -> BTreeSet<String> {
    let mut found = BTreeSet::new();
    for caps in IMPORT_LINE.captures_iter(source) {
        if let Some(m) = caps.get(1) {
            found.insert(m.as_str().to_string());
        } else if let Some(m) = caps.get(2) {
            for part in m.as_str().split(',') {
                let first = part.split_whitespace().next().unwrap_or("");
                if let Some(root) = first.split('.').next().filter(|r| !r.is_empty()) {
                    found.insert(root.to_string());
                }
            }
        }
    }
    found
        .into_iter()
        .filter(|m| m != "tool" && !PY_STDLIB.contains(&m.as_str()))
        .filter(|m| !declared.iter().any(|d| d.eq_ignore_ascii_case(m)))
        .collect()
}

static ARTIFACT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?s)<artifact\b([^>]*)>(.*?)</artifact>"#).expect("valid regex")
});
static ATTR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(\w+)\s*=\s*"([^"]*)""#).expect("valid regex"));
static FENCED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)^\s*```[A-Za-z0-9_+-]*[ \t]*\n(.*?)\n?```\s*$").expect("valid regex"));

fn strip_fence(content: &str) -> String {
    match FENCED.captures(content) {
        Some(c) => c[1].to_string(),
        None => content.trim_matches('\n').to_string(),
    }
}

/// Extract `(code, tests)` from the builder's artifact blocks.
pub fn parse_artifacts(response: &str) -> Result<(String, String), String> {
    let mut code = None;
    let mut tests = None;
    for caps in ARTIFACT.captures_iter(response) {
        let attrs: Vec<(String, String)> = ATTR
            .captures_iter(&caps[1])
            .map(|a| (a[1].to_string(), a[2].to_string()))
            .collect();
        let attr = |key: &str| attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).unwrap_or("");
        let path = attr("path");
        let file = path.rsplit('/').next().unwrap_or(path);
        let is_test = file.starts_with("test_") || attr("identifier").contains("test");
        let body = strip_fence(&caps[2]);
        if is_test {
            tests.get_or_insert(body);
        } else {
            code.get_or_insert(body);
        }
    }
    match (code, tests) {
        (Some(c), Some(t)) if !c.trim().is_empty() && !t.trim().is_empty() => Ok((c, t)),
        (None, _) => Err("no tool artifact found".into()),
        (_, None) => Err("no test artifact found".into()),
        _ => Err("empty artifact".into()),
    }
}

/// Render a builder response in the artifact protocol; used by scripted builders.
pub fn artifact_response(code: &str, tests: &str) -> String {
    format!(
        "<think>\nRequirement Analysis: derived from the ticket.\nExecution Plan: tool, then tests.\n</think>\n\
<artifact identifier=\"tool\" type=\"text/x-python\" path=\"tool.py\" action=\"create\">\n{code}\n</artifact>\n\
<artifact identifier=\"tool-tests\" type=\"text/x-python\" path=\"test_tool.py\" action=\"create\">\n{tests}\n</artifact>"
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCandidate {
    pub iteration: u32,
    pub code: String,
    pub test_script: String,
    pub last_sandbox: Option<TestReport>,
    pub last_critique: Option<CritiqueResult>,
}

/// Where the sandbox output goes relative to the critique in regeneration feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeedbackOrder {
    SandboxFirst,
    CritiqueFirst,
}

pub const FEEDBACK_ORDER: FeedbackOrder = FeedbackOrder::SandboxFirst;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub max_iterations: u32,
    pub feedback_order: FeedbackOrder,
    /// Cap on sandbox diagnostics copied into feedback, in characters.
    pub feedback_cap: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            feedback_order: FEEDBACK_ORDER,
            feedback_cap: 4096,
        }
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("no candidate passed tests and review within {iterations} generations")]
    BuildExhausted {
        iterations: u32,
        last: Option<Box<ToolCandidate>>,
    },
    #[error("sandbox unavailable: {0}")]
    SandboxUnavailable(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub package: ToolPackage,
    pub candidate: ToolCandidate,
    /// The build loop's private conversation.
    pub messages: Vec<ChatMessage>,
}

pub struct Builder {
    adapter: Arc<PolicyAdapter>,
    critic: Critic,
    sandbox: Arc<dyn Sandbox>,
    config: BuildConfig,
    clock: Arc<dyn Clock>,
}

fn ticket_prompt(ticket: &BuildTicket) -> String {
    let mut out = format!(
        "Build ticket {}\nTool name: {}\nRequirement: {}\n",
        ticket.id, ticket.proposed_name, ticket.requirement
    );
    if let Some(hint) = &ticket.io_schema_hint {
        out.push_str(&format!("Arguments seen in the failed call: {hint}\n"));
    }
    out.push_str(&format!("Task context: {}\n", ticket.context_summary));
    out
}

impl Builder {
    pub fn new(
        adapter: Arc<PolicyAdapter>,
        critic_adapter: Arc<PolicyAdapter>,
        sandbox: Arc<dyn Sandbox>,
        config: BuildConfig,
    ) -> Self {
        Self {
            adapter,
            critic: Critic::new(critic_adapter),
            sandbox,
            config,
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn sandbox(&self) -> &Arc<dyn Sandbox> {
        &self.sandbox
    }

    fn test_candidate(&self, code: &str, tests: &str, deps: &[String]) -> Result<TestReport, BuildError> {
        let mut undeclared = undeclared_imports(code, deps);
        undeclared.extend(undeclared_imports(tests, deps));
        if !undeclared.is_empty() {
            let list = undeclared.into_iter().collect::<Vec<_>>().join(", ");
            return Ok(TestReport::single(
                DEPENDENCY_POLICY_CASE,
                CaseStatus::Fail,
                format!("undeclared imports: {list}; declare them in `# dependencies:`"),
            ));
        }
        self.sandbox.run_tests(code, tests).map_err(|e| match e {
            SandboxError::SchemaViolation(v) => BuildError::SandboxUnavailable(v.to_string()),
            other => BuildError::SandboxUnavailable(other.to_string()),
        })
    }

    fn feedback(&self, report: &TestReport, critique: &CritiqueResult) -> String {
        let mut sandbox = report.clone();
        sandbox.diagnostics = truncate_chars(&sandbox.diagnostics, self.config.feedback_cap);
        let (first, second) = match self.config.feedback_order {
            FeedbackOrder::SandboxFirst => (sandbox.render(), critique.render()),
            FeedbackOrder::CritiqueFirst => (critique.render(), sandbox.render()),
        };
        format!(
            "Execution feedback and code review for your last candidate:\n\n{first}\n{second}\nRevise the tool and its tests. Respond with both artifacts again."
        )
    }

    pub fn run_build(&self, ticket: &BuildTicket) -> Result<BuildOutcome, BuildError> {
        let cap = self.config.max_iterations.max(1);
        let mut messages = vec![
            ChatMessage::system(prompts::BUILDER_SYSTEM_PROMPT),
            ChatMessage::user(ticket_prompt(ticket)),
        ];
        let mut last: Option<ToolCandidate>;
        let mut iteration = 0u32;
        let mut response = self.adapter.complete(&messages)?;
        loop {
            messages.push(ChatMessage::assistant(response.clone()));
            let feedback = match parse_artifacts(&response).and_then(|(code, tests)| {
                parse_manifest(&code).map(|m| (code, tests, m))
            }) {
                Err(reason) => {
                    debug!(ticket = %ticket.id, iteration, %reason, "unusable builder response");
                    let report = TestReport::single(ARTIFACT_PROTOCOL_CASE, CaseStatus::Error, reason.clone());
                    last = Some(ToolCandidate {
                        iteration,
                        code: String::new(),
                        test_script: String::new(),
                        last_sandbox: Some(report.clone()),
                        last_critique: None,
                    });
                    format!(
                        "Your response could not be used: {reason}.\n{}Follow the tool package contract and respond with both artifacts.",
                        report.render()
                    )
                }
                Ok((code, tests, manifest)) => {
                    let report = self.test_candidate(&code, &tests, &manifest.dependencies)?;
                    // Reviewed on both branches: after passing tests as the
                    // acceptance gate, after failing ones to produce a critique.
                    let critique = self.critic.review(&code, &report, ticket)?;
                    let candidate = ToolCandidate {
                        iteration,
                        code: code.clone(),
                        test_script: tests.clone(),
                        last_sandbox: Some(report.clone()),
                        last_critique: Some(critique.clone()),
                    };
                    if report.all_pass && critique.approved {
                        let package = ToolPackage {
                            name: ticket.proposed_name.clone(),
                            version: 1,
                            code,
                            test_script: tests,
                            invocation_schema: InvocationSchema {
                                description: manifest.description,
                                arguments: manifest.arguments,
                            },
                            dependencies: manifest.dependencies,
                            test_results: report,
                            review: critique,
                            created_from: ticket.id.clone(),
                            created_at_ms: self.clock.now_ms(),
                        };
                        info!(ticket = %ticket.id, tool = %package.name, iteration, "tool approved");
                        return Ok(BuildOutcome {
                            package,
                            candidate,
                            messages,
                        });
                    }
                    last = Some(candidate);
                    self.feedback(&report, &critique)
                }
            };
            if iteration + 1 >= cap {
                return Err(BuildError::BuildExhausted {
                    iterations: iteration + 1,
                    last: last.map(Box::new),
                });
            }
            iteration += 1;
            messages.push(ChatMessage::user(feedback));
            response = self.adapter.complete(&messages)?;
        }
    }
}

#[cfg(test)]
pub(crate) fn make_ticket_for_tests() -> BuildTicket {
    make_ticket(
        "t-1".into(),
        "factor 84",
        TicketSource::Request("need a prime factorizer"),
        "task-1",
    )
}
