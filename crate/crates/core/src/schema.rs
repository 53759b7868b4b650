//! Argument schemas shared by core tool descriptors and created tool packages.
//!
//! A schema is a closed map from argument name to [`ArgSpec`]. Validation runs
//! before any backend or sandbox process is touched, so a bad call never costs
//! a process launch.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// JSON-level type of a single argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArgType {
    String,
    Integer,
    Number,
    Boolean,
    Array,
    Object,
    /// Accepts any JSON value.
    Any,
}

impl ArgType {
    pub fn accepts(self, value: &Value) -> bool {
        match self {
            ArgType::String => value.is_string(),
            ArgType::Integer => value.is_i64() || value.is_u64(),
            ArgType::Number => value.is_number(),
            ArgType::Boolean => value.is_boolean(),
            ArgType::Array => value.is_array(),
            ArgType::Object => value.is_object(),
            ArgType::Any => true,
        }
    }

    /// Lenient parse used for the builder's manifest header (`int`, `float`, `list`, ...).
    pub fn parse_loose(raw: &str) -> Option<ArgType> {
        let ty = match raw.trim().to_ascii_lowercase().as_str() {
            "string" | "str" | "text" => ArgType::String,
            "integer" | "int" => ArgType::Integer,
            "number" | "float" | "real" | "double" => ArgType::Number,
            "boolean" | "bool" => ArgType::Boolean,
            "array" | "list" | "tuple" => ArgType::Array,
            "object" | "dict" | "map" => ArgType::Object,
            "any" => ArgType::Any,
            _ => return None,
        };
        Some(ty)
    }
}

impl fmt::Display for ArgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ArgType::String => "string",
            ArgType::Integer => "integer",
            ArgType::Number => "number",
            ArgType::Boolean => "boolean",
            ArgType::Array => "array",
            ArgType::Object => "object",
            ArgType::Any => "any",
        };
        f.write_str(s)
    }
}

/// Declaration of one argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgSpec {
    #[serde(rename = "type")]
    pub ty: ArgType,
    #[serde(default)]
    pub required: bool,
    /// Closed set of allowed string values, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

impl ArgSpec {
    pub fn required(ty: ArgType) -> Self {
        Self {
            ty,
            required: true,
            enum_values: None,
            description: String::new(),
        }
    }

    pub fn optional(ty: ArgType) -> Self {
        Self {
            required: false,
            ..Self::required(ty)
        }
    }

    pub fn with_enum(mut self, values: &[&str]) -> Self {
        self.enum_values = Some(values.iter().map(|v| v.to_string()).collect());
        self
    }

    pub fn describe(mut self, text: &str) -> Self {
        self.description = text.to_string();
        self
    }
}

pub type ArgSchema = BTreeMap<String, ArgSpec>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaViolation {
    #[error("arguments must be an object")]
    NotAnObject,
    #[error("missing required argument `{0}`")]
    Missing(String),
    #[error("argument `{name}` must be of type {expected}")]
    WrongType { name: String, expected: ArgType },
    #[error("argument `{name}` must be one of {allowed:?}")]
    NotInEnum { name: String, allowed: Vec<String> },
    #[error("unexpected argument `{0}`")]
    Unexpected(String),
}

/// Check `args` against `schema`. Unknown keys are rejected.
pub fn validate(schema: &ArgSchema, args: &Value) -> Result<(), SchemaViolation> {
    let obj = args.as_object().ok_or(SchemaViolation::NotAnObject)?;
    for (name, spec) in schema {
        match obj.get(name) {
            None | Some(Value::Null) if spec.required => {
                return Err(SchemaViolation::Missing(name.clone()))
            }
            None | Some(Value::Null) => {}
            Some(value) => {
                if !spec.ty.accepts(value) {
                    return Err(SchemaViolation::WrongType {
                        name: name.clone(),
                        expected: spec.ty,
                    });
                }
                if let Some(allowed) = &spec.enum_values {
                    let ok = value.as_str().is_some_and(|s| allowed.iter().any(|a| a == s));
                    if !ok {
                        return Err(SchemaViolation::NotInEnum {
                            name: name.clone(),
                            allowed: allowed.clone(),
                        });
                    }
                }
            }
        }
    }
    if let Some(extra) = obj.keys().find(|k| !schema.contains_key(*k)) {
        return Err(SchemaViolation::Unexpected(extra.clone()));
    }
    Ok(())
}
