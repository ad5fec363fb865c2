//! Episode driver, repair orchestration, baselines, metrics and reports.

mod config;
mod engine;
mod metrics;
mod suite;
mod tta;

use thiserror::Error;

use crate::envsim::EnvError;
use crate::governance::GovernanceError;
use crate::knowledge::KnowledgeError;

pub use config::{AgentConfig, Baseline, Flags, ProposerKind, NAMED_CONFIGS};
pub use engine::{
    Engine, EngineEvent, FailureEvent, FdkaDecision, FdkaRecord, PathwayCounts, TaskRecord,
    SEED_TASK_BASE,
};
pub use metrics::{
    csr, cumulative_failures, holdout_failure_rate, mean_std, rfr, success_rate, tta, Aggregates,
    RunReport, Tta, RFR_WINDOW,
};
pub use suite::{
    curve_csv, format_csv, format_table, run_audit, run_scenario, run_scenario_traced,
    run_scenario_with_ledger, run_suite, AuditRow, MeanStd, SuiteReport, SuiteSummary,
    TABLE_HEADER,
};
pub use tta::{sample_geometric, tta_bound, tta_bound_check, TtaBoundReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown agent config {0}")]
    UnknownConfig(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Governance(#[from] GovernanceError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}
