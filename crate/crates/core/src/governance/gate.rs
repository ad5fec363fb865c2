use serde::{Deserialize, Serialize};

use super::GovernanceConfig;
use crate::fdka::{ReplayCase, ReplayOutcome, Sandbox, ScoreBreakdown};
use crate::knowledge::ProcessKnowledgeGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GateTag {
    AutoApprove,
    QueueHuman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub tag: GateTag,
    pub reasons: Vec<String>,
}

/// Human-in-the-loop gate. `tau_conf` is passed in so callers can apply
/// post-rollback tightening.
pub fn hitl_gate(b: &ScoreBreakdown, tau_conf: f64, cfg: &GovernanceConfig) -> GateDecision {
    let mut reasons = Vec::new();
    if b.s_risk > cfg.tau_risk {
        reasons.push(format!("risk {:.3} > {}", b.s_risk, cfg.tau_risk));
    }
    if b.aggregate < tau_conf {
        reasons.push(format!("aggregate {:.4} < {:.4}", b.aggregate, tau_conf));
    }
    GateDecision {
        tag: if reasons.is_empty() {
            GateTag::AutoApprove
        } else {
            GateTag::QueueHuman
        },
        reasons,
    }
}

/// Confidence threshold `task` tasks after the latest rollback: the 1.2x
/// factor decays with the configured half-life and lapses after the window.
pub fn effective_tau_conf(cfg: &GovernanceConfig, since_rollback: Option<u64>) -> f64 {
    match since_rollback {
        Some(dt) if dt < cfg.tighten_window => {
            let extra = (cfg.tighten_factor - 1.0) * 0.5f64.powf(dt as f64 / cfg.tighten_half_life);
            cfg.tau_conf * (1.0 + extra)
        }
        _ => cfg.tau_conf,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CanaryMode {
    Strict,
    LowPower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryReport {
    pub n_canary: usize,
    pub n_pass: usize,
    pub n_mitigated: usize,
    pub csr: f64,
    pub mode: CanaryMode,
    pub passed: bool,
}

pub fn csr(n_pass: usize, n_mitigated: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (n_pass as f64 + 0.5 * n_mitigated as f64) / n as f64
    }
}

/// Sandboxed replay of up to `n_canary` cases against the patched PKG.
/// Fewer cases than that switches to low-power mode, which rejects on any
/// failure. No cases at all rejects.
pub fn canary(
    patched: &ProcessKnowledgeGraph,
    cases: &[ReplayCase],
    sandbox: &dyn Sandbox,
    cfg: &GovernanceConfig,
) -> CanaryReport {
    let cases = &cases[..cases.len().min(cfg.n_canary)];
    let (mut n_pass, mut n_mitigated, mut n_fail) = (0, 0, 0);
    for c in cases {
        match sandbox.replay(c, patched) {
            ReplayOutcome::Pass => n_pass += 1,
            ReplayOutcome::Mitigated => n_mitigated += 1,
            ReplayOutcome::Fail => n_fail += 1,
        }
    }
    canary_from_counts(n_pass, n_mitigated, n_fail, cfg)
}

pub fn canary_from_counts(
    n_pass: usize,
    n_mitigated: usize,
    n_fail: usize,
    cfg: &GovernanceConfig,
) -> CanaryReport {
    let n = n_pass + n_mitigated + n_fail;
    let value = csr(n_pass, n_mitigated, n);
    let mode = if n >= cfg.n_canary {
        CanaryMode::Strict
    } else {
        CanaryMode::LowPower
    };
    let passed = match mode {
        CanaryMode::Strict => value >= cfg.tau_canary,
        CanaryMode::LowPower => n > 0 && n_fail == 0,
    };
    CanaryReport {
        n_canary: n,
        n_pass,
        n_mitigated,
        csr: value,
        mode,
        passed,
    }
}

/// Beta-Bernoulli posterior mean.
pub fn trust(s: f64, f: f64, alpha: f64, beta: f64) -> f64 {
    (s + alpha) / (s + f + alpha + beta)
}
