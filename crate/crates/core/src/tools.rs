//! Re-invocable tools for cross-execution checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::value::CanonicalValue;

pub type ToolParams = BTreeMap<String, CanonicalValue>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToolError {
    #[error("no script for tool `{tool}` with params hash {hash}")]
    Unscripted { tool: String, hash: String },
    #[error("tool `{0}` failed: {1}")]
    Failed(String, String),
}

pub trait ToolRunner: Send + Sync {
    fn run(&self, tool: &str, params: &ToolParams) -> Result<CanonicalValue, ToolError>;
}

/// First 16 hex digits of SHA-256 over the params' canonical JSON.
pub fn params_hash(params: &ToolParams) -> String {
    let bytes = serde_json::to_vec(params).expect("params serialize");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolScript {
    pub tool: String,
    #[serde(default)]
    pub params: ToolParams,
    pub outcome: CanonicalValue,
}

/// Answers `(tool, params)` lookups from a fixed table.
#[derive(Debug, Clone, Default)]
pub struct ScriptedTools {
    table: BTreeMap<(String, String), CanonicalValue>,
}

impl ScriptedTools {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, script: &ToolScript) {
        self.table.insert(
            (script.tool.clone(), params_hash(&script.params)),
            script.outcome.clone(),
        );
    }

    pub fn from_scripts<'a>(scripts: impl IntoIterator<Item = &'a ToolScript>) -> Self {
        let mut tools = Self::new();
        for s in scripts {
            tools.insert(s);
        }
        tools
    }
}

impl ToolRunner for ScriptedTools {
    fn run(&self, tool: &str, params: &ToolParams) -> Result<CanonicalValue, ToolError> {
        let hash = params_hash(params);
        self.table
            .get(&(tool.to_string(), hash.clone()))
            .cloned()
            .ok_or(ToolError::Unscripted {
                tool: tool.to_string(),
                hash,
            })
    }
}
