//! Turn parsing for the ReAct tag grammar.
//!
//! A policy turn may contain any number of `<think>` blocks and at most one
//! actionable block: a `<tool_call>` carrying a `{"name", "arguments"}`
//! object, or an `<answer>`. Text outside recognized tags (including unknown
//! tags) is kept as thought text. Tool creation requests travel through the
//! same `<tool_call>` wrapper under the reserved name [`CREATE_TOOL_NAME`], so
//! the grammar the model sees never changes.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const CREATE_TOOL_NAME: &str = "create_tool";

/// Default cap on rendered observation output, in characters.
pub const DEFAULT_OBSERVATION_CAP: usize = 4096;

const THINK: &str = "think";
const TOOL_CALL: &str = "tool_call";
const ANSWER: &str = "answer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub name: String,
    pub arguments: Map<String, Value>,
}

impl ToolInvocation {
    pub fn new(name: impl Into<String>, arguments: Map<String, Value>) -> Self {
        Self {
            name: name.into(),
            arguments,
        }
    }

    pub fn arguments_value(&self) -> Value {
        Value::Object(self.arguments.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum AgentAction {
    Thought(String),
    ToolCall(ToolInvocation),
    CreateRequest(String),
    FinalAnswer(String),
}

impl AgentAction {
    pub fn kind(&self) -> &'static str {
        match self {
            AgentAction::Thought(_) => "thought",
            AgentAction::ToolCall(_) => "tool_call",
            AgentAction::CreateRequest(_) => "create_request",
            AgentAction::FinalAnswer(_) => "answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelTurn {
    pub raw_text: String,
    pub think_blocks: Vec<String>,
    pub payload: AgentAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("turn contains {0} actionable blocks; exactly one is allowed")]
    MultipleActions(usize),
    #[error("malformed block: {0}")]
    MalformedBlock(String),
    #[error("empty turn")]
    EmptyTurn,
}

enum Block<'a> {
    Prose(&'a str),
    Tagged { tag: &'static str, body: &'a str },
}

fn split_blocks(raw: &str) -> Result<Vec<Block<'_>>, ParseError> {
    let mut blocks = Vec::new();
    let mut rest = raw;
    loop {
        let next = [THINK, TOOL_CALL, ANSWER]
            .iter()
            .filter_map(|tag| rest.find(&format!("<{tag}>")).map(|pos| (pos, *tag)))
            .min_by_key(|(pos, _)| *pos);
        let Some((pos, tag)) = next else {
            blocks.push(Block::Prose(rest));
            break;
        };
        blocks.push(Block::Prose(&rest[..pos]));
        let open_len = tag.len() + 2;
        let after_open = &rest[pos + open_len..];
        let close = format!("</{tag}>");
        let end = after_open
            .find(&close)
            .ok_or_else(|| ParseError::MalformedBlock(format!("<{tag}> is never closed")))?;
        blocks.push(Block::Tagged {
            tag,
            body: &after_open[..end],
        });
        rest = &after_open[end + close.len()..];
    }
    Ok(blocks)
}

/// Lowercase, map every run of non `[a-z0-9]` characters to one `_`, trim `_`.
pub fn normalize_tool_name(raw: &str) -> Option<String> {
    let mut out = String::with_capacity(raw.len());
    for ch in raw.trim().chars().flat_map(char::to_lowercase) {
        if ch.is_ascii_lowercase() || ch.is_ascii_digit() {
            out.push(ch);
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    let trimmed = out.trim_matches('_');
    (!trimmed.is_empty()).then(|| trimmed.to_string())
}

fn parse_call_object(body: &str) -> Result<Value, ParseError> {
    let body = body.trim();
    serde_json::from_str::<Value>(body).or_else(|first| {
        // Prompt templates escape braces as `{{ }}`; models sometimes echo that.
        let collapsed = body.replace("{{", "{").replace("}}", "}");
        serde_json::from_str::<Value>(&collapsed)
            .map_err(|_| ParseError::MalformedBlock(format!("tool_call body is not an object: {first}")))
    })
}

fn parse_tool_call(body: &str) -> Result<AgentAction, ParseError> {
    let value = parse_call_object(body)?;
    let Value::Object(mut obj) = value else {
        return Err(ParseError::MalformedBlock("tool_call body is not an object".into()));
    };
    let raw_name = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| ParseError::MalformedBlock("tool_call is missing a string `name`".into()))?;
    let name = normalize_tool_name(raw_name)
        .ok_or_else(|| ParseError::MalformedBlock(format!("invalid tool name {raw_name:?}")))?;
    let arguments = match obj.remove("arguments") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(map)) => map,
        Some(Value::String(s)) => match serde_json::from_str::<Value>(&s) {
            Ok(Value::Object(map)) => map,
            _ => return Err(ParseError::MalformedBlock("`arguments` must be an object".into())),
        },
        Some(_) => return Err(ParseError::MalformedBlock("`arguments` must be an object".into())),
    };
    if name == CREATE_TOOL_NAME {
        let requirement = ["requirement", "description", "request"]
            .iter()
            .find_map(|k| arguments.get(*k).and_then(Value::as_str))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| {
                ParseError::MalformedBlock("create_tool needs a non-empty `requirement`".into())
            })?;
        return Ok(AgentAction::CreateRequest(requirement.to_string()));
    }
    Ok(AgentAction::ToolCall(ToolInvocation { name, arguments }))
}

/// Parse one complete model response.
pub fn parse_turn(raw: &str) -> Result<ModelTurn, ParseError> {
    let blocks = split_blocks(raw)?;
    let mut think_blocks = Vec::new();
    let mut prose = Vec::new();
    let mut actions = Vec::new();
    let mut actionable = 0usize;
    for block in blocks {
        match block {
            Block::Prose(text) => {
                let text = text.trim();
                if !text.is_empty() {
                    prose.push(text.to_string());
                }
            }
            Block::Tagged { tag: THINK, body } => think_blocks.push(body.trim().to_string()),
            Block::Tagged { tag: ANSWER, body } => {
                actionable += 1;
                actions.push(Ok(AgentAction::FinalAnswer(body.trim().to_string())));
            }
            Block::Tagged { body, .. } => {
                actionable += 1;
                actions.push(parse_tool_call(body));
            }
        }
    }
    if actionable > 1 {
        return Err(ParseError::MultipleActions(actionable));
    }
    let payload = match actions.pop() {
        Some(action) => action?,
        None => {
            let text = think_blocks
                .iter()
                .chain(prose.iter())
                .filter(|s| !s.is_empty())
                .cloned()
                .collect::<Vec<_>>()
                .join("\n");
            if text.is_empty() {
                return Err(ParseError::EmptyTurn);
            }
            AgentAction::Thought(text)
        }
    };
    Ok(ModelTurn {
        raw_text: raw.to_string(),
        think_blocks,
        payload,
    })
}

/// Render an action in the tag grammar. `parse_turn` inverts this for every
/// action whose text is trimmed and free of the grammar's closing tags.
pub fn serialize_action(action: &AgentAction) -> String {
    match action {
        AgentAction::Thought(text) => format!("<think>\n{text}\n</think>"),
        AgentAction::FinalAnswer(text) => format!("<answer>\n{text}\n</answer>"),
        AgentAction::ToolCall(call) => {
            let body = serde_json::json!({ "name": call.name, "arguments": call.arguments });
            format!("<tool_call>\n{}\n</tool_call>", pretty(&body))
        }
        AgentAction::CreateRequest(text) => {
            let body = serde_json::json!({
                "name": CREATE_TOOL_NAME,
                "arguments": { "requirement": text },
            });
            format!("<tool_call>\n{}\n</tool_call>", pretty(&body))
        }
    }
}

/// Serialize a full turn: think blocks first, then the payload (unless the
/// payload is the thought itself).
pub fn serialize_turn(think_blocks: &[String], action: &AgentAction) -> String {
    let mut parts: Vec<String> = think_blocks
        .iter()
        .map(|t| format!("<think>\n{t}\n</think>"))
        .collect();
    if !matches!(action, AgentAction::Thought(_)) || think_blocks.is_empty() {
        parts.push(serialize_action(action));
    }
    parts.join("\n")
}

fn pretty(value: &Value) -> String {
    serde_json::to_string_pretty(value).expect("json values always serialize")
}

/// Result of one tool execution, as fed back into the task history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub tool_name: String,
    pub ok: bool,
    pub output: String,
    pub error_kind: Option<String>,
    pub duration_ms: u64,
}

impl Observation {
    pub fn success(tool: impl Into<String>, output: impl Into<String>, duration_ms: u64) -> Self {
        Self {
            tool_name: tool.into(),
            ok: true,
            output: output.into(),
            error_kind: None,
            duration_ms,
        }
    }

    pub fn failure(
        tool: impl Into<String>,
        kind: impl Into<String>,
        detail: impl Into<String>,
        duration_ms: u64,
    ) -> Self {
        Self {
            tool_name: tool.into(),
            ok: false,
            output: detail.into(),
            error_kind: Some(kind.into()),
            duration_ms,
        }
    }

    /// Truncate `output` to `cap` characters, appending a marker when cut.
    pub fn capped(mut self, cap: usize) -> Self {
        self.output = truncate_chars(&self.output, cap);
        self
    }
}

pub fn truncate_chars(text: &str, cap: usize) -> String {
    match text.char_indices().nth(cap) {
        None => text.to_string(),
        Some((cut, _)) => {
            let dropped = text[cut..].chars().count();
            format!("{}\n[... truncated {dropped} characters]", &text[..cut])
        }
    }
}

/// Fixed-template rendering of an observation. Durations are deliberately
/// left out so that identical results always hash to identical histories.
pub fn render_observation(obs: &Observation, cap: usize) -> String {
    let output = truncate_chars(&obs.output, cap);
    if obs.ok {
        format!(
            "<tool_response>\ntool: {}\nstatus: ok\n{}\n</tool_response>",
            obs.tool_name, output
        )
    } else {
        let kind = obs.error_kind.as_deref().unwrap_or("error");
        let detail = if output.trim().is_empty() {
            "no further details".to_string()
        } else {
            output
        };
        format!(
            "<tool_response>\ntool: {}\nstatus: failed ({kind})\nTool execution failed: {detail}\n</tool_response>",
            obs.tool_name
        )
    }
}
