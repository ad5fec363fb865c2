use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::GovernanceConfig;
use crate::knowledge::{apply_patch, CausalGraph, Modality, Operator, Patch, PatchBody, ValueRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueVerdict {
    pub veto: bool,
    pub reasons: Vec<String>,
}

/// Preconditions of `op` that match a rule conjunct by name, with the same
/// polarity (`same = true`) or the opposite one.
fn matching(op: &Operator, rule: &ValueRule, same: bool) -> BTreeSet<String> {
    op.pre
        .iter()
        .filter(|p| {
            rule.condition
                .iter()
                .any(|c| c.name == p.name && (c.negated == p.negated) == same)
        })
        .map(|p| p.to_string())
        .collect()
}

/// Deontic check. A Prohibited rule is enabled when the patch drops a guard
/// precondition (opposite polarity to the rule condition); an Obligatory rule
/// is weakened when its covered conjuncts shrink to a strict subset.
pub fn value_veto(patch: &Patch, before: &Operator, rules: &[ValueRule]) -> ValueVerdict {
    let after = match apply_patch(before, patch) {
        Ok(o) => o,
        Err(e) => {
            return ValueVerdict {
                veto: true,
                reasons: vec![format!("patch does not apply: {e}")],
            }
        }
    };
    let mut reasons = Vec::new();
    for r in rules.iter().filter(|r| r.action == patch.scope) {
        match r.modality {
            Modality::Prohibited => {
                let (b, a) = (matching(before, r, false), matching(&after, r, false));
                if a.is_subset(&b) && a.len() < b.len() {
                    reasons.push(format!("enables prohibited {} (guard removed)", r.action));
                }
            }
            Modality::Obligatory => {
                let (b, a) = (matching(before, r, true), matching(&after, r, true));
                if a.is_subset(&b) && a.len() < b.len() {
                    reasons.push(format!("weakens obligatory condition on {}", r.action));
                }
            }
            Modality::Permitted => {}
        }
    }
    ValueVerdict {
        veto: !reasons.is_empty(),
        reasons,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalVerdict {
    pub touched: BTreeSet<String>,
    pub identifiable: usize,
    pub relevant: usize,
    pub iota: f64,
    pub eta: f64,
    /// Veto here means escalation to a human, not outright rejection.
    pub veto: bool,
}

/// Graph nodes the patch touches: its operator, target slot and body symbol.
pub fn touched_nodes(patch: &Patch, graph: &CausalGraph) -> BTreeSet<String> {
    let body = match &patch.body {
        PatchBody::Predicate(p) => p.name.clone(),
        PatchBody::Field(f) => f.name.clone(),
    };
    [patch.scope.clone(), patch.target.clone(), body]
        .into_iter()
        .filter(|n| graph.nodes.contains(n))
        .collect()
}

pub fn causal_veto(patch: &Patch, graph: &CausalGraph, cfg: &GovernanceConfig) -> CausalVerdict {
    let touched = touched_nodes(patch, graph);
    let (identifiable, relevant) = if graph.nodes.contains(&patch.scope) {
        graph.identifiability_counts(&touched)
    } else {
        (0, 0)
    };
    let iota = if relevant == 0 {
        0.0
    } else {
        identifiable as f64 / relevant as f64
    };
    let eta = graph.impact(&touched);
    CausalVerdict {
        veto: iota < cfg.tau_ident || eta > cfg.tau_causal_impact,
        touched,
        identifiable,
        relevant,
        iota,
        eta,
    }
}
