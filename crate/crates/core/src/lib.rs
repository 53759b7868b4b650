//! Runtime for a ReAct agent that builds the tools it is missing.

pub mod bench;
pub mod build;
pub mod clock;
pub mod consolidation;
pub mod core_tools;
pub mod critic;
pub mod embed;
pub mod parser;
pub mod policy;
pub mod prompts;
pub mod registry;
pub mod sandbox;
pub mod schema;
pub mod task;
