//! Shared fixtures, generators and reference oracles for the integration
//! suites. Every `check_*` function evaluates one acceptance criterion and
//! reports a [`Check`]; the test targets decide how to present it.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use toolforge::bench::{judge_answer, minmax_sample, CandidateItem, DatasetItem};
use toolforge::build::{artifact_response, make_ticket, BuildConfig, BuildError, Builder, TicketSource, ToolPackage};
use toolforge::clock::FixedClock;
use toolforge::consolidation::{
    consolidate, organize, run_consolidation, window_counts, ConsolidationPolicy, DiscardReason,
};
use toolforge::core_tools::{CoreToolbox, FixtureCorpus};
use toolforge::critic::{verdict_text, CritiqueResult};
use toolforge::embed::{EmbeddingVector, NgramEmbedder};
use toolforge::parser::{parse_turn, serialize_turn, AgentAction, ToolInvocation, CREATE_TOOL_NAME};
use toolforge::policy::{PolicyAdapter, PolicyConfig, ScriptedBackend, Transcript};
use toolforge::registry::{reuse_at_k, FaultyStorage, FsStorage, Registry, ToolMemory, ToolRecord, UsageEvent};
use toolforge::sandbox::{CaseStatus, SandboxResult, ScriptedSandbox, TestReport, FAIL_MARKER};
use toolforge::schema::{ArgSchema, ArgSpec, ArgType};
use toolforge::task::{Agent, TaskConfig};

#[derive(Debug, Clone)]
pub struct Check {
    pub criterion: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(criterion: &'static str, failures: Vec<String>, summary: String) -> Self {
        let passed = failures.is_empty();
        let detail = if passed {
            summary
        } else {
            let shown: Vec<_> = failures.iter().take(3).cloned().collect();
            format!("{summary}; {} failure(s), first: {}", failures.len(), shown.join(" | "))
        };
        Self {
            criterion,
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.criterion, self.detail)
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A package that satisfies both registration gates.
pub fn verified_package(name: &str, description: &str, code: &str, args: &[(&str, ArgType)]) -> ToolPackage {
    let schema: ArgSchema = args
        .iter()
        .map(|(n, t)| (n.to_string(), ArgSpec::required(*t)))
        .collect();
    let mut pkg = ToolPackage::draft(name, code, schema);
    pkg.invocation_schema.description = description.into();
    pkg.test_script = "from tool import run\n\ndef test_basic():\n    assert run is not None\n".into();
    pkg.test_results = TestReport::single("test_basic", CaseStatus::Pass, "");
    pkg.review = CritiqueResult {
        score: 9,
        approved: true,
        suggestions: vec![],
        blocking_issues: vec![],
    };
    pkg.created_from = "seed".into();
    pkg
}

// ---------------------------------------------------------------------------
// End-to-end replay scenarios

pub fn call(name: &str, args: Value) -> String {
    let Value::Object(arguments) = args else {
        panic!("arguments must be an object")
    };
    serialize_turn(
        &[format!("I should call {name}.")],
        &AgentAction::ToolCall(ToolInvocation::new(name, arguments)),
    )
}

pub fn answer(text: &str) -> String {
    serialize_turn(&["I have what I need.".into()], &AgentAction::FinalAnswer(text.into()))
}

const PRIME_CODE: &str = "# tool: prime_factorize\n# description: Prime factorization of a positive integer\n# arg n: integer (required) the number to factor\n# dependencies: none\nimport json, os\n\n\ndef run(n):\n    out, p = [], 2\n    while n > 1:\n        while n % p == 0:\n            out.append(p)\n            n //= p\n        p += 1\n    return out\n\n\nif __name__ == '__main__':\n    args = json.load(open(os.environ['TOOL_ARGS_FILE']))\n    print(run(args['n']))\n";
const PRIME_TESTS: &str = "from tool import run\n\n\ndef test_basic():\n    assert run(84) == [2, 2, 3, 7]\n\n\ndef test_edge_cases():\n    assert run(1) == []\n";
const TRIANGLE_CODE: &str = "# tool: triangle_area\n# description: Area of a triangle from base and height\n# arg base: number (required)\n# arg height: number (required)\n# dependencies: none\nimport json, os\n\n\ndef run(base, height):\n    return 0.5 * base * height\n\n\nif __name__ == '__main__':\n    args = json.load(open(os.environ['TOOL_ARGS_FILE']))\n    print(run(args['base'], args['height']))\n";
const TRIANGLE_TESTS: &str = "from tool import run\n\n\ndef test_basic():\n    assert run(4, 6) == 12\n\n\ndef test_edge_cases():\n    assert run(4, 0) == 0\n";

pub struct Scenario {
    pub name: &'static str,
    pub task_id: &'static str,
    pub query: &'static str,
    pub max_rounds: u32,
    pub preload: Vec<ToolPackage>,
    /// Every policy, builder and reviewer response, in call order.
    pub responses: Vec<String>,
    pub golden_result: &'static str,
    pub golden_diff: &'static str,
}

pub fn scenarios() -> Vec<Scenario> {
    let capital = json!({"query": "capital of France"});
    vec![
        Scenario {
            name: "immediate answer",
            task_id: "scenario-1",
            query: "What is 2 + 2?",
            max_rounds: 4,
            preload: vec![],
            responses: vec![answer("4")],
            golden_result: r#"{"answer":"4","status":"answered","rounds_used":1,"tools_invoked":[],"tickets_raised":[]}"#,
            golden_diff: "",
        },
        Scenario {
            name: "core tool",
            task_id: "scenario-2",
            query: "What is the capital of France?",
            max_rounds: 4,
            preload: vec![],
            responses: vec![call("external_text_retrieval", capital.clone()), answer("Paris")],
            golden_result: r#"{"answer":"Paris","status":"answered","rounds_used":2,"tools_invoked":[{"name":"external_text_retrieval","ok":true}],"tickets_raised":[]}"#,
            golden_diff: "",
        },
        Scenario {
            name: "created tool reuse",
            task_id: "scenario-3",
            query: "Convert 180 degrees to radians.",
            max_rounds: 4,
            preload: vec![verified_package(
                "degrees_to_radians",
                "Convert an angle from degrees to radians",
                "import math\n\ndef run(x):\n    return math.radians(x)\n",
                &[("x", ArgType::Number)],
            )],
            responses: vec![call("degrees_to_radians", json!({"x": 180})), answer("3.141592653589793")],
            golden_result: r#"{"answer":"3.141592653589793","status":"answered","rounds_used":2,"tools_invoked":[{"name":"degrees_to_radians","ok":true}],"tickets_raised":[]}"#,
            golden_diff: "~ degrees_to_radians uses 0->1 failures 0->0\nevent degrees_to_radians task=scenario-3 ok=true duration=7 at=1000",
        },
        Scenario {
            name: "missing tool built then executed",
            task_id: "scenario-4",
            query: "Factor 84 into primes.",
            max_rounds: 4,
            preload: vec![],
            responses: vec![
                call("prime_factorize", json!({"n": 84})),
                artifact_response(PRIME_CODE, PRIME_TESTS),
                verdict_text(9, true, &["document the return type"], &[]),
                answer("2, 2, 3, 7"),
            ],
            golden_result: r#"{"answer":"2, 2, 3, 7","status":"answered","rounds_used":2,"tools_invoked":[{"name":"prime_factorize","ok":true}],"tickets_raised":["scenario-4-ticket-1"]}"#,
            golden_diff: "+ prime_factorize v1 args=n review=9 tests=2/2 from=scenario-4-ticket-1 at=1000 uses=1 failures=0\nevent prime_factorize task=scenario-4 ok=true duration=7 at=1010",
        },
        Scenario {
            name: "build with one refinement",
            task_id: "scenario-5",
            query: "What is the area of a triangle with base 4 and height 6?",
            max_rounds: 4,
            preload: vec![],
            responses: vec![
                call("triangle_area", json!({"base": 4, "height": 6})),
                artifact_response(&format!("{TRIANGLE_CODE}{FAIL_MARKER}\n"), TRIANGLE_TESTS),
                verdict_text(5, false, &["cover a zero height"], &["edge case test fails"]),
                artifact_response(TRIANGLE_CODE, TRIANGLE_TESTS),
                verdict_text(9, true, &[], &[]),
                answer("12"),
            ],
            golden_result: r#"{"answer":"12","status":"answered","rounds_used":2,"tools_invoked":[{"name":"triangle_area","ok":true}],"tickets_raised":["scenario-5-ticket-1"]}"#,
            golden_diff: "+ triangle_area v1 args=base,height review=9 tests=2/2 from=scenario-5-ticket-1 at=1000 uses=1 failures=0\nevent triangle_area task=scenario-5 ok=true duration=7 at=1010",
        },
        Scenario {
            name: "round exhaustion forced answer",
            task_id: "scenario-6",
            query: "Which city is the capital of France?",
            max_rounds: 2,
            preload: vec![],
            responses: vec![
                call("external_text_retrieval", capital.clone()),
                call("external_text_retrieval", json!({"query": "France capital city"})),
                answer("Paris"),
            ],
            golden_result: r#"{"answer":"Paris","status":"answered","rounds_used":3,"tools_invoked":[{"name":"external_text_retrieval","ok":true},{"name":"external_text_retrieval","ok":false}],"tickets_raised":[]}"#,
            golden_diff: "",
        },
        Scenario {
            name: "round exhaustion without answer",
            task_id: "scenario-7",
            query: "Name the capital of France.",
            max_rounds: 1,
            preload: vec![],
            responses: vec![
                call("external_text_retrieval", capital.clone()),
                call("external_text_retrieval", capital),
            ],
            golden_result: r#"{"answer":null,"status":"exhausted","rounds_used":2,"tools_invoked":[{"name":"external_text_retrieval","ok":true}],"tickets_raised":[]}"#,
            golden_diff: "",
        },
    ]
}

fn scripted_execution(pkg: &ToolPackage, args: &Value) -> SandboxResult {
    let stdout = match pkg.name.as_str() {
        "prime_factorize" => "[2, 2, 3, 7]".to_string(),
        "triangle_area" => "12.0".to_string(),
        "degrees_to_radians" => "3.141592653589793".to_string(),
        _ => args.to_string(),
    };
    SandboxResult {
        exit_code: 0,
        stdout,
        stderr: String::new(),
        timed_out: false,
        duration_ms: 7,
    }
}

/// Human-readable difference between two registry states plus the new log lines.
pub fn registry_diff(before: &ToolMemory, after: &ToolMemory, events: &[UsageEvent]) -> String {
    let mut lines = Vec::new();
    for (name, rec) in &after.created {
        match before.created.get(name) {
            None => {
                let pkg = &rec.package;
                let passed = pkg
                    .test_results
                    .cases
                    .iter()
                    .filter(|c| c.status == CaseStatus::Pass)
                    .count();
                lines.push(format!(
                    "+ {name} v{} args={} review={} tests={passed}/{} from={} at={} uses={} failures={}",
                    pkg.version,
                    pkg.invocation_schema.arguments.keys().cloned().collect::<Vec<_>>().join(","),
                    pkg.review.score,
                    pkg.test_results.cases.len(),
                    pkg.created_from,
                    pkg.created_at_ms,
                    rec.uses,
                    rec.failures,
                ));
            }
            Some(old) if old.uses != rec.uses || old.failures != rec.failures => lines.push(format!(
                "~ {name} uses {}->{} failures {}->{}",
                old.uses, rec.uses, old.failures, rec.failures
            )),
            Some(_) => {}
        }
    }
    for name in before.created.keys().filter(|n| !after.created.contains_key(*n)) {
        lines.push(format!("- {name}"));
    }
    for e in events {
        lines.push(format!(
            "event {} task={} ok={} duration={} at={}",
            e.tool, e.task_id, e.ok, e.duration_ms, e.at_ms
        ));
    }
    lines.join("\n")
}

pub struct ScenarioRun {
    pub result_json: String,
    pub diff: String,
}

fn execute_scenario(s: &Scenario, policy: Arc<PolicyAdapter>, root: &Path) -> ScenarioRun {
    let registry = Arc::new(Registry::open(root).expect("registry opens"));
    for pkg in &s.preload {
        registry.register(pkg).expect("preload registers");
    }
    let before = (*registry.snapshot()).clone();
    let events_before = registry.events().expect("events readable").len();
    let clock = Arc::new(FixedClock::new(1_000, 10));
    let sandbox = Arc::new(ScriptedSandbox::new().on_execute(scripted_execution));
    let builder = Builder::new(policy.clone(), policy.clone(), sandbox.clone(), BuildConfig::default())
        .with_clock(clock.clone());
    let toolbox = CoreToolbox::new(FixtureCorpus::default().with_text("capital of France", "Paris"));
    let agent = Agent::new(policy, registry, Arc::new(toolbox), sandbox)
        .with_builder(Arc::new(builder))
        .with_clock(clock);
    let cfg = TaskConfig {
        task_id: s.task_id.into(),
        max_rounds: s.max_rounds,
        ..TaskConfig::default()
    };
    let outcome = agent.run_task(s.query, &cfg);
    // Read back from disk so the diff covers what was persisted.
    let reopened = Registry::open(root).expect("registry reopens");
    let after = (*reopened.snapshot()).clone();
    let events = reopened.events().expect("events readable");
    ScenarioRun {
        result_json: serde_json::to_string(&outcome.result).expect("result serializes"),
        diff: registry_diff(&before, &after, &events[events_before..]),
    }
}

/// Record a scenario against its scripted responses.
pub fn record_scenario(s: &Scenario) -> (ScenarioRun, Transcript) {
    let dir = tempfile::tempdir().expect("tempdir");
    let backend = Arc::new(ScriptedBackend::new(s.responses.clone()));
    let policy = Arc::new(PolicyAdapter::recording(PolicyConfig::default(), backend));
    let run = execute_scenario(s, policy.clone(), dir.path());
    (run, policy.transcript())
}

/// Re-run a scenario from a transcript alone.
pub fn replay_scenario(s: &Scenario, transcript: Transcript) -> ScenarioRun {
    let dir = tempfile::tempdir().expect("tempdir");
    execute_scenario(s, Arc::new(PolicyAdapter::replay(transcript)), dir.path())
}

/// Failures for one scenario: record and replay must both match the goldens.
pub fn scenario_failures(s: &Scenario) -> Vec<String> {
    let mut failures = Vec::new();
    let (recorded, transcript) = record_scenario(s);
    if transcript.len() != s.responses.len() {
        failures.push(format!(
            "{}: {} of {} scripted responses consumed",
            s.name,
            transcript.len(),
            s.responses.len()
        ));
    }
    let replayed = replay_scenario(s, transcript);
    for (label, run) in [("record", &recorded), ("replay", &replayed)] {
        if run.result_json != s.golden_result {
            failures.push(format!("{} ({label}): result {}", s.name, run.result_json));
        }
        if run.diff != s.golden_diff {
            failures.push(format!("{} ({label}): registry diff {:?}", s.name, run.diff));
        }
    }
    failures
}

pub fn check_replay_scenarios() -> Check {
    let started = Instant::now();
    let all = scenarios();
    let mut failures: Vec<String> = all.iter().flat_map(scenario_failures).collect();
    let elapsed = started.elapsed();
    if elapsed >= Duration::from_secs(5) {
        failures.push(format!("took {elapsed:?}, limit 5s"));
    }
    Check::new(
        "end-to-end replay",
        failures,
        format!("{} scenarios recorded and replayed in {} ms", all.len(), elapsed.as_millis()),
    )
}

// ---------------------------------------------------------------------------
// Dual-gate build fuzz

#[derive(Debug, Clone)]
enum Step {
    /// A response without usable artifacts.
    Garbage(&'static str),
    Code {
        failing_tests: bool,
        undeclared_import: bool,
        /// Reviewer responses consumed for this step (a retry follows an unreadable one).
        reviews: Vec<String>,
        /// The first readable verdict approves with a passing score and no blockers.
        verdict_approves: bool,
    },
}

const GARBAGE: &[&str] = &[
    "I am not able to write this tool.",
    "<artifact identifier=\"tool\" path=\"tool.py\">\nprint(1)\n</artifact>",
    "<artifact identifier=\"tool\" path=\"tool.py\">\n# description: x\n# arg a: matrix (required)\nprint(1)\n</artifact>\n<artifact identifier=\"tool-tests\" path=\"test_tool.py\">\ndef test_a():\n    pass\n</artifact>",
];

fn random_review(rng: &mut ChaCha8Rng) -> (String, Option<bool>) {
    match rng.random_range(0..6) {
        0 => ("looks fine to me".into(), None),
        1 => ("```json\n{\"score\": 42, \"approved\": true}\n```".into(), None),
        _ => {
            let score = rng.random_range(0..=10u8);
            let approved = rng.random_bool(0.7);
            let blocking: &[&str] = if rng.random_bool(0.2) { &["unsafe file access"] } else { &[] };
            let text = verdict_text(score, approved, &["add a docstring"], blocking);
            (text, Some(approved && score >= 8 && blocking.is_empty()))
        }
    }
}

fn random_step(rng: &mut ChaCha8Rng) -> Step {
    if rng.random_bool(0.15) {
        return Step::Garbage(GARBAGE.choose(rng).expect("non-empty"));
    }
    let mut reviews = Vec::new();
    let (first, verdict) = random_review(rng);
    reviews.push(first);
    let verdict_approves = match verdict {
        Some(v) => v,
        None => {
            let (second, verdict) = random_review(rng);
            reviews.push(second);
            verdict.unwrap_or(false)
        }
    };
    Step::Code {
        failing_tests: rng.random_bool(0.35),
        undeclared_import: rng.random_bool(0.1),
        reviews,
        verdict_approves,
    }
}

fn step_code(step_no: usize, failing: bool, undeclared: bool) -> String {
    let mut code = format!(
        "# tool: fuzz_tool\n# description: Fuzz candidate number {step_no}\n# arg x: number (required)\n# dependencies: none\nimport math\n"
    );
    if undeclared {
        code.push_str("import numpy\n");
    }
    code.push_str("\ndef run(x):\n    return math.sqrt(abs(x))\n");
    if failing {
        code.push_str(FAIL_MARKER);
        code.push('\n');
    }
    code
}

/// Outcome the gates must produce: the first step with passing tests and an
/// approving verdict, if any within the budget.
fn expected_success(steps: &[Step]) -> Option<usize> {
    steps.iter().position(|s| match s {
        Step::Garbage(_) => false,
        Step::Code {
            failing_tests,
            undeclared_import,
            verdict_approves,
            ..
        } => !failing_tests && !undeclared_import && *verdict_approves,
    })
}

pub fn check_dual_gate(sessions: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let dir = tempfile::tempdir().expect("tempdir");
    let registry = Registry::open(dir.path()).expect("registry opens");
    let mut failures = Vec::new();
    let mut registered = 0usize;
    for session in 0..sessions {
        let budget = rng.random_range(1..=5usize);
        let steps: Vec<Step> = (0..budget).map(|_| random_step(&mut rng)).collect();
        let expected = expected_success(&steps);
        let used = expected.map_or(budget, |i| i + 1);
        let mut builder_responses = Vec::new();
        let mut reviewer_responses = Vec::new();
        for (i, step) in steps.iter().take(used).enumerate() {
            match step {
                Step::Garbage(text) => builder_responses.push(text.to_string()),
                Step::Code {
                    failing_tests,
                    undeclared_import,
                    reviews,
                    ..
                } => {
                    builder_responses.push(artifact_response(
                        &step_code(i, *failing_tests, *undeclared_import),
                        "from tool import run\n\ndef test_basic():\n    assert run(4) == 2\n",
                    ));
                    reviewer_responses.extend(reviews.iter().cloned());
                }
            }
        }
        let builder = Builder::new(
            Arc::new(PolicyAdapter::live(
                PolicyConfig::default(),
                Arc::new(ScriptedBackend::new(builder_responses)),
            )),
            Arc::new(PolicyAdapter::live(
                PolicyConfig::default(),
                Arc::new(ScriptedBackend::new(reviewer_responses)),
            )),
            Arc::new(ScriptedSandbox::new()),
            BuildConfig {
                max_iterations: budget as u32,
                ..BuildConfig::default()
            },
        );
        let ticket = make_ticket(
            format!("fuzz-ticket-{session}"),
            "fuzz task",
            TicketSource::Request(&format!("fuzz tool {session}")),
            "fuzz",
        );
        match (builder.run_build(&ticket), expected) {
            (Ok(outcome), Some(i)) => {
                if outcome.candidate.iteration as usize != i {
                    failures.push(format!(
                        "session {session}: accepted at iteration {} instead of {i}",
                        outcome.candidate.iteration
                    ));
                }
                match registry.register(&outcome.package) {
                    Ok(_) => registered += 1,
                    Err(e) => failures.push(format!("session {session}: verified package rejected: {e}")),
                }
            }
            (Ok(outcome), None) => {
                failures.push(format!("session {session}: accepted a package the gates should refuse"));
                // Still offer it to the registry; it must refuse on its own.
                if registry.register(&outcome.package).is_ok() {
                    registered += 1;
                }
            }
            (Err(BuildError::BuildExhausted { iterations, .. }), None) => {
                if iterations as usize != budget {
                    failures.push(format!("session {session}: exhausted after {iterations} of {budget}"));
                }
            }
            (Err(e), _) => failures.push(format!("session {session}: unexpected error {e}")),
        }
    }
    let reopened = Registry::open(dir.path()).expect("registry reopens");
    let snapshot = reopened.snapshot();
    let mut unverified = 0;
    for (name, rec) in &snapshot.created {
        let pkg = &rec.package;
        let all_pass = pkg.test_results.all_pass
            && !pkg.test_results.cases.is_empty()
            && pkg.test_results.cases.iter().all(|c| c.status == CaseStatus::Pass);
        let approving = pkg.review.approved && pkg.review.score >= 8 && pkg.review.blocking_issues.is_empty();
        if !(all_pass && approving) {
            unverified += 1;
            failures.push(format!("{name} registered without both gates"));
        }
    }
    if snapshot.created.len() != registered {
        failures.push(format!("{} on disk, {registered} registered", snapshot.created.len()));
    }
    Check::new(
        "dual-gate safety",
        failures,
        format!("{sessions} build sessions, {registered} registered, {unverified} unverified"),
    )
}

// ---------------------------------------------------------------------------
// Min-max sampler oracle

fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Exhaustive reference: recompute every candidate's highest similarity to
/// the whole selected set at every step; lowest id wins exact ties.
pub fn oracle_minmax(pool: &[(String, Vec<f64>)], seeds: usize, iterations: usize, rng_seed: u64) -> Vec<String> {
    let mut sorted = pool.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let seed_idx = rand::seq::index::sample(&mut rng, sorted.len(), seeds).into_vec();
    let mut selected: Vec<usize> = seed_idx;
    for _ in 0..iterations {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..sorted.len() {
            if selected.contains(&c) {
                continue;
            }
            let worst = selected
                .iter()
                .map(|&s| plain_cosine(&sorted[c].1, &sorted[s].1))
                .fold(f64::NEG_INFINITY, f64::max);
            let better = match best {
                None => true,
                Some((b, bw)) => worst < bw || (worst == bw && sorted[c].0 < sorted[b].0),
            };
            if better {
                best = Some((c, worst));
            }
        }
        selected.push(best.expect("pool large enough").0);
    }
    selected.into_iter().map(|i| sorted[i].0.clone()).collect()
}

fn random_pool(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<f64>)> {
    let size = rng.random_range(1..=12usize);
    let dims = rng.random_range(1..=8usize);
    let mut pool: Vec<(String, Vec<f64>)> = Vec::with_capacity(size);
    for i in 0..size {
        let v = if i > 0 && rng.random_bool(0.25) {
            // Exact or scaled duplicates create ties.
            let base = pool[rng.random_range(0..i)].1.clone();
            let scale = [1.0, 2.0, 0.5][rng.random_range(0..3)];
            base.into_iter().map(|x| x * scale).collect()
        } else {
            loop {
                let v: Vec<f64> = (0..dims).map(|_| rng.random_range(-2..=2) as f64).collect();
                if v.iter().any(|x| *x != 0.0) {
                    break v;
                }
            }
        };
        pool.push((format!("item-{i:02}"), v));
    }
    use rand::seq::SliceRandom;
    pool.shuffle(rng);
    pool
}

pub fn check_sampler(pools: usize, seed: u64) -> Check {
    let started = Instant::now();
    let mut rng = rng(seed);
    let mut failures = Vec::new();
    let mut steps = 0usize;
    for p in 0..pools {
        let pool = random_pool(&mut rng);
        let seeds = rng.random_range(1..=pool.len().min(3));
        let iterations = rng.random_range(0..=pool.len() - seeds);
        let rng_seed = rng.random::<u64>();
        let candidates: Vec<CandidateItem> = pool
            .iter()
            .map(|(id, v)| CandidateItem {
                item: DatasetItem {
                    id: id.clone(),
                    question: format!("question {id}"),
                    answer: "0".into(),
                    source: "synthetic".into(),
                    category: None,
                },
                embedding: Some(EmbeddingVector::new(v.clone()).expect("non-zero vector")),
            })
            .collect();
        let expected = oracle_minmax(&pool, seeds, iterations, rng_seed);
        match minmax_sample(&candidates, seeds, iterations, rng_seed) {
            Ok(state) if state.selected == expected => {
                let rest: BTreeSet<_> = state.pool.iter().collect();
                if rest.len() + state.selected.len() != pool.len() || state.iteration != iterations {
                    failures.push(format!("pool {p}: inconsistent sampler state"));
                }
            }
            Ok(state) => failures.push(format!("pool {p}: got {:?}, oracle {expected:?}", state.selected)),
            Err(e) => failures.push(format!("pool {p}: {e}")),
        }
        steps += iterations;
    }
    let elapsed = started.elapsed();
    if elapsed >= Duration::from_secs(10) {
        failures.push(format!("took {elapsed:?}, limit 10s"));
    }
    Check::new(
        "min-max sampler oracle",
        failures,
        format!("{pools} pools, {steps} selection steps, {} ms", elapsed.as_millis()),
    )
}

// ---------------------------------------------------------------------------
// Consolidation invariants

const DESCRIPTIONS: &[&str] = &[
    "Compute the mean of a list of numbers",
    "Compute the average of a list of numbers",
    "Prime factorization of a positive integer",
    "Area of a triangle from base and height",
    "Convert an angle from degrees to radians",
    "Solve a quadratic equation",
    "Greatest common divisor of two integers",
];

const CODES: &[&str] = &[
    "def run(xs):\n    return sum(xs) / len(xs)\n",
    "def run(n):\n    return n * 2\n",
    "def run(a, b):\n    return a + b\n",
    "def run(x):\n    return x ** 0.5\n",
];

pub struct Library {
    pub packages: Vec<ToolPackage>,
    pub memory: ToolMemory,
    pub log: Vec<UsageEvent>,
    pub policy: ConsolidationPolicy,
}

pub fn random_library(rng: &mut ChaCha8Rng) -> Library {
    let n = rng.random_range(0..=8usize);
    let mut memory = ToolMemory::default();
    let mut packages = Vec::new();
    for i in 0..n {
        let name = format!("tool_{i}");
        let description = if rng.random_bool(0.6) {
            DESCRIPTIONS[rng.random_range(0..DESCRIPTIONS.len())].to_string()
        } else {
            format!("Unique helper {i} for {}", ["graphs", "strings", "dates", "units"][rng.random_range(0..4)])
        };
        let mut code = if rng.random_bool(0.5) {
            CODES[rng.random_range(0..CODES.len())].to_string()
        } else {
            format!("def run(x):\n    return x + {i}\n")
        };
        if rng.random_bool(0.3) {
            code = format!("# variant {i}\n{}", code.replace("    ", "  "));
        }
        let pkg = verified_package(&name, &description, &code, &[("x", ArgType::Any)]);
        let mut rec = ToolRecord::new(pkg.clone());
        rec.uses = rng.random_range(0..20);
        rec.failures = rng.random_range(0..=rec.uses);
        memory.created.insert(name, rec);
        packages.push(pkg);
    }
    let events = rng.random_range(0..30usize);
    let log = (0..events)
        .map(|j| {
            let tool = if n == 0 || rng.random_bool(0.1) {
                "unknown_tool".to_string()
            } else {
                format!("tool_{}", rng.random_range(0..n))
            };
            UsageEvent {
                tool,
                task_id: format!("t{j}"),
                ok: rng.random_bool(0.7),
                duration_ms: 1,
                at_ms: j as u64,
            }
        })
        .collect();
    let policy = ConsolidationPolicy {
        dup_similarity_threshold: [0.8, 0.92, 1.0][rng.random_range(0..3)],
        min_uses_window: rng.random_range(0..=3),
        max_failure_rate: [0.25, 0.5, 0.75][rng.random_range(0..3)],
        min_uses_for_rate: rng.random_range(1..=6),
        ..ConsolidationPolicy::default()
    };
    Library {
        packages,
        memory,
        log,
        policy,
    }
}

/// Discard predicate written out from the policy definition.
fn should_discard(uses: u64, failures: u64, p: &ConsolidationPolicy) -> Option<DiscardReason> {
    if uses < p.min_uses_window {
        Some(DiscardReason::RarelyUsed)
    } else if uses >= p.min_uses_for_rate && uses > 0 && (failures as f64) > p.max_failure_rate * uses as f64 {
        Some(DiscardReason::HighFailure)
    } else {
        None
    }
}

pub fn library_failures(lib: &Library, tag: &str) -> Vec<String> {
    let mut failures = Vec::new();
    let embedder = NgramEmbedder::default();
    let snapshot = &lib.memory;

    let organized = organize(snapshot, &lib.log, &lib.policy, &embedder);
    let sum = |m: &ToolMemory| {
        m.created
            .values()
            .fold((0u64, 0u64), |(u, f), r| (u + r.uses, f + r.failures))
    };
    if sum(&organized.memory) != sum(snapshot) {
        failures.push(format!("{tag}: lifetime usage not conserved by organize"));
    }
    let attributable = lib.log.iter().filter(|e| snapshot.resolve(&e.tool).is_some()).count() as u64;
    let window_total: u64 = organized.window.values().map(|c| c.uses).sum();
    let direct_total: u64 = window_counts(snapshot, &lib.log).values().map(|c| c.uses).sum();
    if window_total != attributable || direct_total != attributable {
        failures.push(format!("{tag}: window usage not conserved ({window_total} vs {attributable})"));
    }
    // Merged tools stay reachable through their survivor.
    for name in snapshot.created.keys() {
        if organized.memory.resolve(name).is_none() {
            failures.push(format!("{tag}: {name} unreachable after organize"));
        }
    }

    let (next, report) = consolidate(snapshot, &lib.log, &lib.policy, &embedder);
    if next.size() > snapshot.size() || report.after_size != next.size() || report.before_size != snapshot.size() {
        failures.push(format!("{tag}: library grew {} -> {}", snapshot.size(), next.size()));
    }
    if next.generation != snapshot.generation + 1 {
        failures.push(format!("{tag}: generation not advanced"));
    }
    for d in &report.discarded {
        let w = organized.window.get(&d.name).copied().unwrap_or_default();
        if (w.uses, w.failures) != (d.window_uses, d.window_failures) {
            failures.push(format!("{tag}: {} reported with wrong window counts", d.name));
        }
        if should_discard(d.window_uses, d.window_failures, &lib.policy) != Some(d.reason) {
            failures.push(format!("{tag}: {} discarded without a matching predicate", d.name));
        }
        if next.created.contains_key(&d.name) {
            failures.push(format!("{tag}: {} discarded but still present", d.name));
        }
    }
    for name in next.created.keys() {
        let w = organized.window.get(name).copied().unwrap_or_default();
        if should_discard(w.uses, w.failures, &lib.policy).is_some() {
            failures.push(format!("{tag}: {name} kept although a predicate holds"));
        }
    }
    failures
}

/// Persist `lib`, crash a consolidation after `crash_after` storage
/// operations, and compare the reloaded state with the expected one.
pub fn crash_failures(lib: &Library, crash_after: usize, tag: &str) -> (Vec<String>, bool) {
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    {
        let registry = Registry::open(root).expect("registry opens");
        for pkg in &lib.packages {
            registry.register(pkg).expect("package registers");
        }
        for e in &lib.log {
            registry.log_usage(e).expect("event logs");
        }
    }
    let pre = (*Registry::open(root).expect("reopen").snapshot()).clone();

    let counting = Arc::new(FaultyStorage::default());
    let probe = Registry::open_with(root, counting.clone(), Arc::new(NgramEmbedder::default())).expect("probe opens");
    drop(probe);
    let open_ops = counting.operations();

    let faulty = Arc::new(FaultyStorage::fail_from(open_ops + crash_after));
    let registry = Registry::open_with(root, faulty, Arc::new(NgramEmbedder::default())).expect("faulty opens");
    let outcome = run_consolidation(&registry, &lib.policy, false);
    let reloaded = Registry::open_with(root, Arc::new(FsStorage), Arc::new(NgramEmbedder::default())).expect("reload");
    let after = (*reloaded.snapshot()).clone();
    let crashed = outcome.is_err();
    match outcome {
        Err(_) if after != pre => failures.push(format!("{tag}: crash after {crash_after} ops changed the live state")),
        Ok(_) if after != *registry.snapshot() => failures.push(format!("{tag}: committed state not reloaded")),
        _ => {}
    }
    (failures, crashed)
}

pub fn check_consolidation(libraries: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut failures = Vec::new();
    let mut crashes = 0;
    let mut merged = 0;
    let mut discarded = 0;
    for i in 0..libraries {
        let lib = random_library(&mut rng);
        let tag = format!("library {i}");
        failures.extend(library_failures(&lib, &tag));
        let (_, report) = consolidate(&lib.memory, &lib.log, &lib.policy, &NgramEmbedder::default());
        merged += report.merged_groups.len();
        discarded += report.discarded.len();
        let crash_after = rng.random_range(0..24usize);
        let (f, crashed) = crash_failures(&lib, crash_after, &tag);
        failures.extend(f);
        crashes += usize::from(crashed);
    }
    if crashes == 0 || crashes == libraries {
        failures.push(format!("{crashes} of {libraries} commits crashed; both outcomes must be exercised"));
    }
    Check::new(
        "consolidation invariants",
        failures,
        format!("{libraries} libraries, {merged} merged groups, {discarded} discards, {crashes} crashed commits"),
    )
}

// ---------------------------------------------------------------------------
// reuse@k

pub fn three_tool_registry(root: &Path) -> Registry {
    let registry = Registry::open(root).expect("registry opens");
    for (name, desc) in [
        ("a", "convert degrees to radians"),
        ("b", "count prime factors"),
        ("c", "area of a triangle"),
    ] {
        registry
            .register(&verified_package(name, desc, &format!("def run(x):\n    return '{name}'\n"), &[("x", ArgType::Number)]))
            .expect("fixture registers");
    }
    let mut at = 0;
    for (tool, n) in [("a", 5), ("b", 1)] {
        for _ in 0..n {
            at += 1;
            registry
                .log_usage(&UsageEvent {
                    tool: tool.into(),
                    task_id: "fixture".into(),
                    ok: true,
                    duration_ms: 1,
                    at_ms: at,
                })
                .expect("event logs");
        }
    }
    registry
}

pub fn check_reuse(logs: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut failures = Vec::new();
    for l in 0..logs {
        let n = rng.random_range(1..=8usize);
        let tools: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let events: Vec<UsageEvent> = (0..rng.random_range(0..60))
            .map(|j| UsageEvent {
                tool: if rng.random_bool(0.1) {
                    "stray".into()
                } else {
                    tools[rng.random_range(0..n)].clone()
                },
                task_id: "t".into(),
                ok: true,
                duration_ms: 0,
                at_ms: j,
            })
            .collect();
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for e in &events {
            *counts.entry(e.tool.as_str()).or_default() += 1;
        }
        let max = counts.values().copied().max().unwrap_or(0);
        let mut previous: Option<u64> = None;
        for k in 1..=max + 2 {
            let expected = tools.iter().filter(|t| counts.get(t.as_str()).copied().unwrap_or(0) >= k).count() as u64;
            match reuse_at_k(&tools, &events, k) {
                Ok(r) => {
                    if r.numerator != expected || r.denominator != n as u64 {
                        failures.push(format!("log {l}: reuse@{k} = {r}, expected {expected}/{n}"));
                    }
                    if previous.is_some_and(|p| r.numerator > p) {
                        failures.push(format!("log {l}: reuse@{k} increased"));
                    }
                    previous = Some(r.numerator);
                }
                Err(e) => failures.push(format!("log {l}: {e}")),
            }
        }
    }

    let dir = tempfile::tempdir().expect("tempdir");
    let registry = three_tool_registry(dir.path());
    let memory = registry.snapshot();
    let expected = [(1, 2), (5, 1), (5, 1), (6, 0)];
    let mut fixture = Vec::new();
    for (k, num) in expected {
        match memory.reuse_at_k(k) {
            Ok(r) => {
                fixture.push(r.to_string());
                if (r.numerator, r.denominator) != (num, 3) {
                    failures.push(format!("fixture reuse@{k} = {r}, expected {num}/3"));
                }
            }
            Err(e) => failures.push(format!("fixture reuse@{k}: {e}")),
        }
    }
    Check::new(
        "reuse@k",
        failures,
        format!("{logs} random logs monotone; fixture k=1,5,5,6 -> {}", fixture.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// Judge tolerance

/// Independent comparison: same length, every |a - b| <= 1e-6.
fn oracle_close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6)
}

fn render_list(v: &[f64]) -> String {
    if v.len() == 1 {
        format!("{}", v[0])
    } else {
        format!("[{}]", v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(", "))
    }
}

pub fn check_judge(pairs: usize, seed: u64) -> Check {
    let mut failures = Vec::new();
    let examples: [(&str, &str, bool); 5] = [
        ("1.0000005", "1.0", true),
        ("1.00001", "1.0", false),
        ("[1, 2, 3]", "[1, 2, 4]", false),
        ("[1, 2, 3]", "[1, 2, 3.0000001]", true),
        ("[1, 2]", "[1, 2, 3]", false),
    ];
    for (p, r, want) in examples {
        if judge_answer(p, r, None) != want {
            failures.push(format!("judge({p:?}, {r:?}) != {want}"));
        }
    }
    let mut rng = rng(seed);
    let deltas = [0.0, 1e-9, 4e-7, 9e-7, 1.5e-6, 3e-6, 1e-5, 0.01, 1.0];
    let mut agreed_true = 0;
    for i in 0..pairs {
        let len = if rng.random_bool(0.7) { 1 } else { rng.random_range(2..=4) };
        let reference: Vec<f64> = (0..len)
            .map(|_| (rng.random_range(-100_000..100_000) as f64) / 100.0)
            .collect();
        let mut predicted = reference.clone();
        let idx = rng.random_range(0..len);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        predicted[idx] += sign * deltas[rng.random_range(0..deltas.len())];
        let (p, r) = (render_list(&predicted), render_list(&reference));
        let parse = |s: &str| -> Vec<f64> {
            s.trim_matches(|c| c == '[' || c == ']')
                .split(", ")
                .map(|x| x.parse().expect("rendered number"))
                .collect()
        };
        let want = oracle_close(&parse(&p), &parse(&r));
        agreed_true += usize::from(want);
        if judge_answer(&p, &r, None) != want {
            failures.push(format!("pair {i}: judge({p:?}, {r:?}) disagrees with oracle {want}"));
        }
    }
    Check::new(
        "judge tolerance",
        failures,
        format!("{} examples and {pairs} random pairs ({agreed_true} within tolerance)", examples.len()),
    )
}

// ---------------------------------------------------------------------------
// Parser round trip and malformed turns

const WORDS: &[&str] = &[
    "compute", "the", "area", "x", "42", "3.5", "prime", "{braces}", "\"quoted\"", "a/b", "ünïcode", "tab\there",
    "new\nline", "[1, 2]", "50%", "&amp;", "back\\slash", "tool_call", "answer", "think", ">",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=8);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect();
    words.join(" ").trim().to_string()
}

fn random_value(rng: &mut ChaCha8Rng, depth: u32) -> Value {
    match rng.random_range(0..if depth > 1 { 5 } else { 7 }) {
        0 => json!(rng.random_range(-1000..1000)),
        1 => json!(rng.random_range(-64..64) as f64 / 4.0),
        2 => json!(random_text(rng)),
        3 => json!(rng.random_bool(0.5)),
        4 => Value::Null,
        5 => Value::Array((0..rng.random_range(0..4)).map(|_| random_value(rng, depth + 1)).collect()),
        _ => {
            let mut m = Map::new();
            for i in 0..rng.random_range(0..3) {
                m.insert(format!("k{i}"), random_value(rng, depth + 1));
            }
            Value::Object(m)
        }
    }
}

fn random_name(rng: &mut ChaCha8Rng) -> String {
    let parts = ["solve", "quadratic", "area", "mean", "convert", "units", "v2", "prime", "grid"];
    let n = rng.random_range(1..=3);
    let name = (0..n).map(|_| *parts.choose(rng).expect("non-empty")).collect::<Vec<_>>().join("_");
    if name == CREATE_TOOL_NAME {
        "create_tool_x".into()
    } else {
        name
    }
}

pub fn random_turn(rng: &mut ChaCha8Rng) -> (Vec<String>, AgentAction) {
    let action = match rng.random_range(0..4) {
        0 => AgentAction::Thought(random_text(rng)),
        1 => AgentAction::FinalAnswer(random_text(rng)),
        2 => AgentAction::CreateRequest(random_text(rng)),
        _ => {
            let mut args = Map::new();
            for i in 0..rng.random_range(0..4) {
                args.insert(format!("arg_{i}"), random_value(rng, 0));
            }
            AgentAction::ToolCall(ToolInvocation::new(random_name(rng), args))
        }
    };
    let thinks = if matches!(action, AgentAction::Thought(_)) {
        Vec::new()
    } else {
        (0..rng.random_range(0..3)).map(|_| random_text(rng)).collect()
    };
    (thinks, action)
}

fn is_actionable(a: &AgentAction) -> bool {
    !matches!(a, AgentAction::Thought(_))
}

/// Count top-level actionable blocks; `None` when a block is left open.
pub fn count_actionable(raw: &str) -> Option<usize> {
    let mut count = 0;
    let mut i = 0;
    while i < raw.len() {
        let rest = &raw[i..];
        let tag = ["think", "tool_call", "answer"]
            .into_iter()
            .find(|t| rest.starts_with(&format!("<{t}>")));
        match tag {
            Some(t) => {
                let open = t.len() + 2;
                let close = format!("</{t}>");
                let end = rest[open..].find(&close)?;
                if t != "think" {
                    count += 1;
                }
                i += open + end + close.len();
            }
            None => i += rest.chars().next().map_or(1, char::len_utf8),
        }
    }
    Some(count)
}

fn mutate(rng: &mut ChaCha8Rng, raw: &str) -> (String, bool) {
    let (other_thinks, other) = loop {
        let t = random_turn(rng);
        if is_actionable(&t.1) {
            break t;
        }
    };
    let second = serialize_turn(&other_thinks, &other);
    match rng.random_range(0..6) {
        // Two complete actionable blocks must never parse.
        0 => (format!("{raw}\n{second}"), true),
        1 => (format!("{second}\n{raw}"), true),
        2 => {
            let cut: Vec<char> = raw.chars().collect();
            let at = rng.random_range(0..=cut.len());
            (cut[..at].iter().collect(), false)
        }
        3 => (raw.replacen("</", "<", 1), false),
        4 => {
            let junk = ["<answer", "</think>", "<tool_call>{", "}}", "<think>", "</answer>"];
            let chars: Vec<char> = raw.chars().collect();
            let at = rng.random_range(0..=chars.len());
            let mut s: String = chars[..at].iter().collect();
            s.push_str(junk.choose(rng).expect("non-empty"));
            s.extend(&chars[at..]);
            (s, false)
        }
        _ => (raw.replacen('{', "", 1), false),
    }
}

pub fn check_parser(well_formed: usize, malformed: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut failures = Vec::new();
    for i in 0..well_formed {
        let (thinks, action) = random_turn(&mut rng);
        let raw = serialize_turn(&thinks, &action);
        match parse_turn(&raw) {
            Ok(turn) => {
                if turn.payload != action {
                    failures.push(format!("turn {i}: payload changed: {raw:?}"));
                    continue;
                }
                if is_actionable(&action) && turn.think_blocks != thinks {
                    failures.push(format!("turn {i}: think blocks changed"));
                }
                let again = serialize_turn(&turn.think_blocks, &turn.payload);
                if parse_turn(&again).map(|t| t.payload).as_ref() != Ok(&action) {
                    failures.push(format!("turn {i}: second round trip differs"));
                }
            }
            Err(e) => failures.push(format!("turn {i}: {e}: {raw:?}")),
        }
    }
    let mut rejected = 0;
    for i in 0..malformed {
        let (thinks, action) = random_turn(&mut rng);
        let (raw, doubled) = mutate(&mut rng, &serialize_turn(&thinks, &action));
        let must_reject = doubled && is_actionable(&action);
        let parsed = match catch_unwind(AssertUnwindSafe(|| parse_turn(&raw))) {
            Ok(p) => p,
            Err(_) => {
                failures.push(format!("malformed {i}: parser panicked on {raw:?}"));
                continue;
            }
        };
        match parsed {
            Err(_) => rejected += 1,
            Ok(turn) => {
                if must_reject {
                    failures.push(format!("malformed {i}: two actions accepted: {raw:?}"));
                } else if is_actionable(&turn.payload) && count_actionable(&raw) != Some(1) {
                    failures.push(format!("malformed {i}: action taken from ambiguous turn {raw:?}"));
                }
            }
        }
    }
    Check::new(
        "parser round trip",
        failures,
        format!("{well_formed} round trips, {malformed} malformed turns ({rejected} rejected)"),
    )
}

// ---------------------------------------------------------------------------
// Live smoke

/// Runs one arithmetic query against `TOOLFORGE_LIVE_ENDPOINT` when set.
/// Only the shape of the outcome is checked; answers depend on the model.
pub fn check_live_smoke() -> Option<Check> {
    let endpoint = std::env::var("TOOLFORGE_LIVE_ENDPOINT").ok()?;
    let mut config = PolicyConfig {
        endpoint_url: endpoint,
        api_key: std::env::var("TOOLFORGE_API_KEY").ok(),
        ..PolicyConfig::default()
    };
    if let Ok(model) = std::env::var("TOOLFORGE_LIVE_MODEL") {
        config.model_name = model;
    }
    let mut failures = Vec::new();
    let policy = match PolicyAdapter::from_config(config) {
        Ok(p) => Arc::new(p),
        Err(e) => return Some(Check::new("live smoke", vec![e.to_string()], "adapter".into())),
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let registry = Arc::new(Registry::open(dir.path()).expect("registry opens"));
    let toolbox = Arc::new(CoreToolbox::new(FixtureCorpus::default()));
    let agent = Agent::new(policy, registry, toolbox, Arc::new(ScriptedSandbox::new()));
    let cfg = TaskConfig {
        task_id: "live-smoke".into(),
        ..TaskConfig::default()
    };
    let outcome = agent.run_task("What is 17 * 23?", &cfg);
    let status = serde_json::to_value(&outcome.result).expect("result serializes")["status"].clone();
    if status != "answered" && status != "exhausted" {
        failures.push(format!("status {status}"));
    }
    let log = outcome.log_jsonl();
    let bad = log
        .lines()
        .filter(|l| serde_json::from_str::<Value>(l).is_err())
        .count();
    if log.trim().is_empty() || bad > 0 {
        failures.push(format!("{bad} malformed run log lines"));
    }
    Some(Check::new(
        "live smoke",
        failures,
        format!("status {status}, {} log records", log.lines().count()),
    ))
}
