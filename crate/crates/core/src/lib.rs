//! Governed self-repairing planning agent.
//!
//! Failures observed while executing symbolic plans are turned into typed
//! operator patches, scored, screened by value and causal guardrails,
//! canary-tested in a sandbox and committed to a versioned ledger.

pub mod controller;
pub mod envsim;
pub mod fdka;
pub mod governance;
pub mod harness;
pub mod knowledge;
pub mod planner;
pub mod verifier;
