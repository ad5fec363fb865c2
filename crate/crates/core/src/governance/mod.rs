//! Guardrails, the conflict-aware ledger, the human gate, canary replay and
//! trust tracking.

mod gate;
mod guardrails;
mod ledger;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::KnowledgeError;

pub use gate::{
    canary, canary_from_counts, csr, effective_tau_conf, hitl_gate, trust, CanaryMode,
    CanaryReport, GateDecision, GateTag,
};
pub use guardrails::{causal_veto, touched_nodes, value_veto, CausalVerdict, ValueVerdict};
pub use ledger::{
    EntryStatus, Ledger, LedgerEntry, LedgerEvent, Provenance, StageOutcome, TrustCounters,
    TrustReport,
};

#[derive(Debug, Error)]
pub enum GovernanceError {
    #[error("no reviewable entry for key {0}")]
    UnknownKey(String),
    #[error("no ledger entry {0}")]
    UnknownEntry(u64),
    #[error("key {0} has no committed entry")]
    NotCommitted(String),
    #[error("entry {id} is {from:?}; cannot {op}")]
    Transition {
        id: u64,
        from: EntryStatus,
        op: &'static str,
    },
    #[error("entry {0} has incomplete provenance")]
    Provenance(u64),
    #[error("consolidation: {0}")]
    Consolidation(String),
    #[error("ledger line {line}: {msg}")]
    Corrupt { line: usize, msg: String },
    #[error("ledger storage: {0}")]
    Storage(#[from] std::io::Error),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

/// How review requests resolve when no human is attached.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanPolicy {
    #[default]
    AutoDeny,
    AutoApprove,
    /// Leave items in the queue for the `review` CLI.
    Defer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GovernanceConfig {
    pub tau_ident: f64,
    pub tau_causal_impact: f64,
    /// Gate threshold on `s_risk`.
    pub tau_risk: f64,
    pub tau_conf: f64,
    pub tau_canary: f64,
    pub n_canary: usize,
    pub tau_override: f64,
    pub trust_alpha: f64,
    pub trust_beta: f64,
    pub rollback_rho: f64,
    pub rollback_min_tasks: u64,
    pub tighten_factor: f64,
    pub tighten_half_life: f64,
    pub tighten_window: u64,
    pub k_max_history: usize,
    pub approve_bonus: u64,
    pub deny_penalty: u64,
    pub human: HumanPolicy,
}

impl Default for GovernanceConfig {
    fn default() -> Self {
        Self {
            tau_ident: 0.5,
            tau_causal_impact: 0.6,
            tau_risk: 0.6,
            tau_conf: 0.5,
            tau_canary: 0.8,
            n_canary: 8,
            tau_override: 0.8,
            trust_alpha: 2.0,
            trust_beta: 1.0,
            rollback_rho: 0.3,
            rollback_min_tasks: 10,
            tighten_factor: 1.2,
            tighten_half_life: 25.0,
            tighten_window: 50,
            k_max_history: 50,
            approve_bonus: 5,
            deny_penalty: 10,
            human: HumanPolicy::AutoDeny,
        }
    }
}
