//! Failure-driven knowledge acquisition: localization, the systematic-error
//! pre-filter, constrained proposal and four-way scoring.

mod localize;
mod pool;
mod proposer;
mod scoring;

use thiserror::Error;

use crate::knowledge::KnowledgeError;

pub use localize::{jaccard, localize, softmax, tokens, ResponsibilityScore, LOCALIZATION_WEIGHTS};
pub use pool::{AttemptStats, EdcrDecision, ExperiencePool, RepairEvent};
pub use proposer::{
    parse_patch, propose, serialize_request, ErrorView, MockProposer, MockRule, OperatorRecord,
    Proposer, ProposerRequest, ProposerResponse, RemoteProposer, TraceRecord, DEFAULT_TEMPERATURE,
    MAX_TOKENS, STATE_MINIMAL_LIMIT, SYSTEM_PROMPT,
};
pub use scoring::{
    aggregate, consistency, expected_edit_type, lambda_budget, plausibility, replay_case, risk,
    score, utility, FdkaConfig, PlausibilityRubric, ReplayCase, ReplayOutcome, Sandbox,
    ScoreBreakdown, UtilityTally,
};

#[derive(Debug, Error)]
pub enum FdkaError {
    #[error("no candidate operators in trace window")]
    EmptyCandidates,
    /// Retriable; distinct from a schema rejection.
    #[error("proposer transport: {0}")]
    Transport(String),
    #[error("consistency check needs {needed} assignments, limit is {limit}")]
    Capacity { needed: u128, limit: u128 },
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

impl FdkaError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, FdkaError::Transport(_))
    }
}
