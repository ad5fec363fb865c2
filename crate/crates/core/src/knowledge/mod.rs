//! Typed symbolic substrate: predicates, states, operators, patches and the
//! three knowledge graphs (process, value, causal).

mod graphs;
mod operator;
mod patch;
mod pkg;
mod predicate;
mod state;
mod trace;

use thiserror::Error;

pub use graphs::{CausalEdge, CausalGraph, Invariant, Modality, ValueRule};
pub use operator::{Operator, Param, SchemaField, ToolSchema, TypedName};
pub use patch::{
    apply_patch, apply_rollback, edit_key, edit_key_preimage, EditAction, EditType, Patch,
    PatchBody, RollbackOp,
};
pub use pkg::{Method, ProcessKnowledgeGraph};
pub use predicate::{Binding, Predicate, Term};
pub use state::{entails, SymbolicState};
pub use trace::{ErrorRecord, FailureCategory, FailureTrace, GroundStep};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnowledgeError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("predicate {0} is not ground")]
    NotGround(String),
    #[error("variable ?{var} is not a parameter of {operator}")]
    UnboundVariable { operator: String, var: String },
    #[error("{operator} expects {expected} arguments, got {got}")]
    Arity {
        operator: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid definition: {0}")]
    Invalid(String),
    #[error("unknown operator {0}")]
    UnknownOperator(String),
    #[error("patch {patch} rejected: {reason}")]
    Patch { patch: String, reason: String },
    #[error("rollback failed: {0}")]
    Rollback(String),
}
