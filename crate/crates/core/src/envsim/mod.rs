//! Deterministic simulated environments with scripted failure injection.

mod executor;
mod scenario;

use thiserror::Error;

use crate::knowledge::KnowledgeError;

pub use executor::{
    requirement_met, Environment, ExecutionResult, ScenarioSandbox, Status, TaskContext,
    BAD_ARGUMENT, PRECONDITION_UNMET, TRANSIENT_CLASS,
};
pub use scenario::{
    builtin_domain, builtin_names, builtin_scenario, load_scenario, parse_scenario,
    resolve_scenario, AuditExpect, AuditItem, CanaryCase, Domain, ExperienceSeed, Injection, Noise,
    Persistence, PolicyFlip, Requirement, Scenario, SeedStats, SeedTrace, StateEdit, TaskSelector,
    TaskSpec,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("{origin}: line {line}, column {column}: {msg}")]
    Schema {
        origin: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("invalid scenario field {field}: {msg}")]
    Invalid { field: String, msg: String },
    #[error("unknown scenario {0}")]
    UnknownScenario(String),
    #[error("unknown domain {0}")]
    UnknownDomain(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}
