//! Isolated execution of tool code and builder test scripts.
//!
//! [`ProcessSandbox`] runs each execution in its own child process and
//! private working directory with a wall-clock timeout and an address-space
//! cap. [`ScriptedSandbox`] is a deterministic stand-in used by replay tests
//! and by any caller that wants the build loop without an interpreter.
//!
//! Test scripts are run through an external harness that speaks the report
//! protocol parsed by [`parse_report`]: every record is one line starting
//! with [`REPORT_PREFIX`] followed by a JSON object, either a case record
//! `{"test", "status", "duration_ms", "message"}` or a final summary
//! `{"summary": {"all_pass", "cases"}}`. The harness exits 0 iff all cases
//! pass, 1 on test failures and 2 on internal errors.

mod process;
mod scripted;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::build::ToolPackage;
use crate::schema::{validate, SchemaViolation};

pub use process::{ProcessSandbox, TOOL_ARGS_ENV};
pub use scripted::{ScriptedSandbox, FAIL_MARKER};

pub const REPORT_PREFIX: &str = "@@toolforge-report@@ ";

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_MEMORY_CAP: u64 = 512 * 1024 * 1024;
pub const DEFAULT_STREAM_CAP: usize = 1 << 20;

/// Exit code reported for runs killed at the timeout.
pub const TIMEOUT_EXIT_CODE: i32 = 124;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxSpec {
    /// Command that runs a tool file, e.g. `["python3", "-I"]`; the file path is appended.
    pub interpreter_command: Vec<String>,
    /// Harness entrypoint; the code and test file paths are appended.
    pub harness_command: Vec<String>,
    pub timeout_ms: u64,
    /// Address-space limit for the child; 0 disables it.
    pub memory_cap_bytes: u64,
    /// Parent directory under which each execution gets a fresh private directory.
    pub workdir: PathBuf,
    pub network_allowed: bool,
    /// Keep per-execution directories for debugging.
    #[serde(default)]
    pub keep_workdir: bool,
    #[serde(default = "default_stream_cap")]
    pub stream_cap: usize,
}

fn default_stream_cap() -> usize {
    DEFAULT_STREAM_CAP
}

impl Default for SandboxSpec {
    fn default() -> Self {
        Self {
            interpreter_command: vec!["python3".into()],
            harness_command: vec!["toolforge-harness".into()],
            timeout_ms: DEFAULT_TIMEOUT_MS,
            memory_cap_bytes: DEFAULT_MEMORY_CAP,
            workdir: std::env::temp_dir(),
            network_allowed: false,
            keep_workdir: false,
            stream_cap: DEFAULT_STREAM_CAP,
        }
    }
}

impl SandboxSpec {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.timeout_ms == 0 {
            return Err(SandboxError::InvalidSpec("timeout_ms must be > 0".into()));
        }
        if self.interpreter_command.is_empty() || self.harness_command.is_empty() {
            return Err(SandboxError::InvalidSpec("commands must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
    pub duration_ms: u64,
}

impl SandboxResult {
    pub fn success(&self) -> bool {
        self.exit_code == 0 && !self.timed_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    Pass,
    Fail,
    Error,
    Timeout,
}

impl fmt::Display for CaseStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CaseStatus::Pass => "pass",
            CaseStatus::Fail => "fail",
            CaseStatus::Error => "error",
            CaseStatus::Timeout => "timeout",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub name: String,
    pub status: CaseStatus,
    pub message: String,
    pub duration_ms: u64,
}

impl TestCase {
    pub fn new(name: impl Into<String>, status: CaseStatus, message: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status,
            message: message.into(),
            duration_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestReport {
    pub cases: Vec<TestCase>,
    pub all_pass: bool,
    /// Non-record output from the test run.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub diagnostics: String,
}

impl TestReport {
    /// `all_pass` is derived: true iff there is at least one case and every case passed.
    pub fn from_cases(cases: Vec<TestCase>) -> Self {
        let all_pass = !cases.is_empty() && cases.iter().all(|c| c.status == CaseStatus::Pass);
        Self {
            cases,
            all_pass,
            diagnostics: String::new(),
        }
    }

    pub fn single(name: &str, status: CaseStatus, message: impl Into<String>) -> Self {
        Self::from_cases(vec![TestCase::new(name, status, message)])
    }

    pub fn failing_cases(&self) -> impl Iterator<Item = &TestCase> {
        self.cases.iter().filter(|c| c.status != CaseStatus::Pass)
    }

    /// Multi-line summary used as execution feedback.
    pub fn render(&self) -> String {
        let mut out = format!(
            "Test report: {} of {} passed\n",
            self.cases.iter().filter(|c| c.status == CaseStatus::Pass).count(),
            self.cases.len()
        );
        for case in &self.cases {
            out.push_str(&format!("- {} [{}]", case.name, case.status));
            if !case.message.is_empty() {
                out.push_str(&format!(": {}", case.message));
            }
            out.push('\n');
        }
        if !self.diagnostics.trim().is_empty() {
            out.push_str("Output:\n");
            out.push_str(self.diagnostics.trim_end());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("arguments violate the tool schema: {0}")]
    SchemaViolation(#[from] SchemaViolation),
    #[error("failed to launch sandbox process: {0}")]
    SpawnFailure(String),
    #[error("invalid sandbox spec: {0}")]
    InvalidSpec(String),
    #[error("sandbox i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Executes tool code and test scripts in isolation.
pub trait Sandbox: Send + Sync {
    fn execute_tool(&self, pkg: &ToolPackage, args: &Value) -> Result<SandboxResult, SandboxError>;
    fn run_tests(&self, code: &str, test_script: &str) -> Result<TestReport, SandboxError>;
}

/// Schema gate applied before any launch.
pub fn check_args(pkg: &ToolPackage, args: &Value) -> Result<(), SandboxError> {
    validate(&pkg.invocation_schema.arguments, args)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CaseRecord {
    test: String,
    status: CaseStatus,
    #[serde(default)]
    duration_ms: u64,
    #[serde(default)]
    message: String,
}

#[derive(Debug, Deserialize)]
struct SummaryBody {
    all_pass: bool,
    cases: usize,
}

#[derive(Debug, Deserialize)]
struct SummaryRecord {
    summary: SummaryBody,
}

pub const PROTOCOL_CASE: &str = "harness_protocol";

fn protocol_error(message: impl Into<String>, diagnostics: String) -> TestReport {
    let mut report = TestReport::single(PROTOCOL_CASE, CaseStatus::Error, message);
    report.diagnostics = diagnostics;
    report
}

/// Turn a harness run into a [`TestReport`]. Total: any stream that does not
/// follow the protocol becomes a report with a single synthetic error case.
pub fn parse_report(run: &SandboxResult) -> TestReport {
    if run.timed_out {
        let mut report = TestReport::single(
            "test_run",
            CaseStatus::Timeout,
            format!("test run exceeded the time limit after {} ms", run.duration_ms),
        );
        report.diagnostics = run.stdout.clone();
        return report;
    }
    let mut cases = Vec::new();
    let mut summary = None;
    let mut diagnostics = String::new();
    for line in run.stdout.lines() {
        let Some(body) = line.strip_prefix(REPORT_PREFIX) else {
            diagnostics.push_str(line);
            diagnostics.push('\n');
            continue;
        };
        if summary.is_some() {
            return protocol_error("record after summary", diagnostics);
        }
        if let Ok(record) = serde_json::from_str::<SummaryRecord>(body) {
            summary = Some(record.summary);
        } else if let Ok(record) = serde_json::from_str::<CaseRecord>(body) {
            cases.push(TestCase {
                name: record.test,
                status: record.status,
                message: record.message,
                duration_ms: record.duration_ms,
            });
        } else {
            return protocol_error(format!("unparseable record: {body}"), diagnostics);
        }
    }
    if run.exit_code == 2 {
        let detail = if run.stderr.trim().is_empty() { "no details" } else { run.stderr.trim() };
        return protocol_error(format!("harness internal failure: {detail}"), diagnostics);
    }
    let Some(summary) = summary else {
        let detail = run.stderr.trim();
        return protocol_error(format!("missing summary record (exit {}) {detail}", run.exit_code), diagnostics);
    };
    let report = TestReport::from_cases(cases);
    let consistent = summary.cases == report.cases.len()
        && summary.all_pass == report.all_pass
        && (run.exit_code == 0) == report.all_pass;
    if report.cases.is_empty() {
        return protocol_error("no test cases were run", diagnostics);
    }
    if !consistent {
        return protocol_error(
            format!(
                "summary (all_pass={}, cases={}) and exit code {} disagree with {} case records",
                summary.all_pass,
                summary.cases,
                run.exit_code,
                report.cases.len()
            ),
            diagnostics,
        );
    }
    TestReport {
        diagnostics,
        ..report
    }
}
