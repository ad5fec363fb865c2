use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{KnowledgeError, Operator, SymbolicState};

/// Operator instance with concrete arguments. `chosen[i]` marks arguments
/// picked by the grounder rather than fixed by the instruction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroundStep {
    pub operator: String,
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chosen: Vec<bool>,
}

impl GroundStep {
    pub fn new(operator: &str, args: &[&str]) -> Self {
        Self {
            operator: operator.to_string(),
            args: args.iter().map(|a| a.to_string()).collect(),
            chosen: Vec::new(),
        }
    }

    pub fn is_chosen(&self, i: usize) -> bool {
        self.chosen.get(i).copied().unwrap_or(false)
    }
}

impl fmt::Display for GroundStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.operator, self.args.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    PolicyFlip,
    ToolSchemaDrift,
    AuthSchemaDrift,
    Transient503,
    OodEntity,
    FieldValidation,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub class: String,
    pub message: String,
    #[serde(default)]
    pub evidence: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<FailureCategory>,
    #[serde(default)]
    pub retriable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureTrace {
    pub task_index: usize,
    pub states: Vec<SymbolicState>,
    pub actions: Vec<GroundStep>,
    pub failed_operator: Operator,
    pub state_at_failure: SymbolicState,
    pub error: ErrorRecord,
    #[serde(default)]
    pub tool_log: Vec<String>,
}

impl FailureTrace {
    pub fn failed_step(&self) -> &GroundStep {
        self.actions.last().expect("validated trace has actions")
    }

    /// Failure key used by metrics and the pool: `Operator:CLASS`.
    pub fn class_key(&self) -> String {
        format!("{}:{}", self.failed_operator.name, self.error.class)
    }

    pub fn validate(&self) -> Result<(), KnowledgeError> {
        let last = self
            .actions
            .last()
            .ok_or_else(|| KnowledgeError::Invalid("trace without actions".into()))?;
        if last.operator != self.failed_operator.name {
            return Err(KnowledgeError::Invalid(format!(
                "trace failed operator {} is not the last action {}",
                self.failed_operator.name, last.operator
            )));
        }
        if self.error.class.is_empty() {
            return Err(KnowledgeError::Invalid("empty error class".into()));
        }
        Ok(())
    }
}
