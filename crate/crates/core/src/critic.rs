//! Structured code review gating tool acceptance.
//!
//! The reviewer answers with one fenced JSON verdict. Parsing is total: a
//! response that cannot be read is retried once with a reminder, and a second
//! failure maps to a rejecting verdict. A verdict can only approve when the
//! accompanying test report passed, whatever the reviewer says.

use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;

use crate::build::BuildTicket;
use crate::policy::{ChatMessage, PolicyAdapter, PolicyError};
use crate::prompts;
use crate::sandbox::TestReport;

pub const APPROVAL_THRESHOLD: u8 = 8;
pub const MAX_SCORE: u8 = 10;
pub const UNPARSEABLE_REVIEW: &str = "unparseable review";
pub const FAILING_TESTS_ISSUE: &str = "test report is not all-pass";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueResult {
    pub score: u8,
    pub approved: bool,
    pub suggestions: Vec<String>,
    pub blocking_issues: Vec<String>,
}

impl CritiqueResult {
    pub fn unparseable() -> Self {
        Self {
            score: 0,
            approved: false,
            suggestions: vec!["reply with the json verdict schema so the review can be read".into()],
            blocking_issues: vec![UNPARSEABLE_REVIEW.into()],
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "Code review: score {}/{MAX_SCORE}, {}\n",
            self.score,
            if self.approved { "approved" } else { "changes requested" }
        );
        for issue in &self.blocking_issues {
            out.push_str(&format!("- blocking: {issue}\n"));
        }
        for s in &self.suggestions {
            out.push_str(&format!("- suggestion: {s}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Deserialize)]
struct Verdict {
    score: i64,
    #[serde(default)]
    approved: bool,
    #[serde(default)]
    suggestions: Vec<String>,
    #[serde(default)]
    blocking_issues: Vec<String>,
}

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```(?:json|JSON)?[ \t]*\n(.*?)```").expect("valid regex"));

fn parse_verdict(text: &str) -> Option<Verdict> {
    let candidates = FENCE
        .captures_iter(text)
        .map(|c| c.get(1).map_or("", |m| m.as_str()).to_string())
        .chain(std::iter::once(text.trim().to_string()));
    for candidate in candidates {
        if let Ok(verdict) = serde_json::from_str::<Verdict>(candidate.trim()) {
            if (0..=MAX_SCORE as i64).contains(&verdict.score) {
                return Some(verdict);
            }
        }
    }
    None
}

/// Apply the approval rule to a reviewer verdict.
fn normalize(verdict: Verdict, report: &TestReport) -> CritiqueResult {
    let mut blocking = verdict.blocking_issues;
    if !report.all_pass && !blocking.iter().any(|b| b == FAILING_TESTS_ISSUE) {
        blocking.push(FAILING_TESTS_ISSUE.into());
    }
    let score = verdict.score as u8;
    let approved = verdict.approved && score >= APPROVAL_THRESHOLD && blocking.is_empty() && report.all_pass;
    let mut suggestions = verdict.suggestions;
    if !approved && suggestions.is_empty() {
        suggestions = if blocking.is_empty() {
            vec![format!("raise the review score to at least {APPROVAL_THRESHOLD}")]
        } else {
            blocking.clone()
        };
    }
    CritiqueResult {
        score,
        approved,
        suggestions,
        blocking_issues: blocking,
    }
}

/// Total parse of a reviewer response; `None` when no verdict could be read.
pub fn parse_review(text: &str, report: &TestReport) -> Option<CritiqueResult> {
    parse_verdict(text).map(|v| normalize(v, report))
}

pub struct Critic {
    adapter: Arc<PolicyAdapter>,
}

impl Critic {
    pub fn new(adapter: Arc<PolicyAdapter>) -> Self {
        Self { adapter }
    }

    pub fn review_messages(code: &str, report: &TestReport, ticket: &BuildTicket) -> Vec<ChatMessage> {
        let user = format!(
            "Tool request {}: {}\nContext: {}\n\nCandidate tool:\n```python\n{}\n```\n\n{}",
            ticket.proposed_name,
            ticket.requirement,
            ticket.context_summary,
            code.trim_end(),
            report.render()
        );
        vec![ChatMessage::system(prompts::reviewer_system_prompt()), ChatMessage::user(user)]
    }

    pub fn review(
        &self,
        code: &str,
        report: &TestReport,
        ticket: &BuildTicket,
    ) -> Result<CritiqueResult, PolicyError> {
        let mut messages = Self::review_messages(code, report, ticket);
        let first = self.adapter.complete(&messages)?;
        if let Some(result) = parse_review(&first, report) {
            return Ok(result);
        }
        messages.push(ChatMessage::assistant(first));
        messages.push(ChatMessage::user(prompts::REVIEW_RETRY_PROMPT));
        let second = self.adapter.complete(&messages)?;
        Ok(parse_review(&second, report).unwrap_or_else(CritiqueResult::unparseable))
    }
}

/// Render a verdict in the reviewer schema; used by scripted reviewers.
pub fn verdict_text(score: u8, approved: bool, suggestions: &[&str], blocking: &[&str]) -> String {
    format!(
        "<think>review</think>\n```json\n{}\n```",
        serde_json::json!({
            "score": score,
            "approved": approved,
            "suggestions": suggestions,
            "blocking_issues": blocking,
        })
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::build::make_ticket_for_tests;
    use crate::policy::{PolicyConfig, ScriptedBackend};
    use crate::sandbox::CaseStatus;
    use proptest::prelude::*;

    fn passing() -> TestReport {
        TestReport::single("test_ok", CaseStatus::Pass, "")
    }

    fn failing() -> TestReport {
        TestReport::single("test_bad", CaseStatus::Fail, "assert 1 == 2")
    }

    fn critic(responses: &[&str]) -> Critic {
        let backend = Arc::new(ScriptedBackend::new(responses.iter().copied()));
        Critic::new(Arc::new(PolicyAdapter::live(PolicyConfig::default(), backend)))
    }

    #[test]
    fn score_nine_without_issues_approves() {
        let c = critic(&[&verdict_text(9, true, &[], &[])]);
        let r = c.review("code", &passing(), &make_ticket_for_tests()).unwrap();
        assert!(r.approved);
        assert_eq!(r.score, 9);
    }

    #[test]
    fn score_six_rejects_and_keeps_suggestions() {
        let c = critic(&[&verdict_text(6, true, &["handle n <= 1"], &[])]);
        let r = c.review("code", &passing(), &make_ticket_for_tests()).unwrap();
        assert!(!r.approved);
        assert_eq!(r.suggestions, vec!["handle n <= 1".to_string()]);
    }

    #[test]
    fn garbage_twice_falls_back_to_rejection() {
        let c = critic(&["looks fine to me", "LGTM!!"]);
        let r = c.review("code", &passing(), &make_ticket_for_tests()).unwrap();
        assert!(!r.approved);
        assert_eq!(r.blocking_issues, vec![UNPARSEABLE_REVIEW.to_string()]);
    }

    #[test]
    fn garbage_then_valid_uses_the_retry() {
        let c = critic(&["hmm", &verdict_text(10, true, &[], &[])]);
        assert!(c.review("code", &passing(), &make_ticket_for_tests()).unwrap().approved);
    }

    #[test]
    fn failing_report_is_never_approved() {
        let r = parse_review(&verdict_text(10, true, &[], &[]), &failing()).unwrap();
        assert!(!r.approved);
        assert!(r.blocking_issues.contains(&FAILING_TESTS_ISSUE.to_string()));
    }

    #[test]
    fn out_of_range_score_is_unparseable() {
        assert!(parse_review("```json\n{\"score\": 11, \"approved\": true}\n```", &passing()).is_none());
        assert!(parse_review("{\"score\": 8, \"approved\": true}", &passing()).unwrap().approved);
    }

    proptest! {
        #[test]
        fn parsing_is_total_and_never_approves_failing_reports(text in ".{0,200}", score in 0u8..=10, approve: bool) {
            let fallback = parse_review(&text, &passing()).unwrap_or_else(CritiqueResult::unparseable);
            prop_assert!(fallback.score <= MAX_SCORE);
            let r = parse_review(&verdict_text(score, approve, &[], &[]), &failing()).unwrap();
            prop_assert!(!r.approved);
            let r = parse_review(&verdict_text(score, approve, &[], &[]), &passing()).unwrap();
            prop_assert_eq!(r.approved, approve && score >= APPROVAL_THRESHOLD);
            prop_assert!(r.approved || !r.suggestions.is_empty());
        }
    }
}
