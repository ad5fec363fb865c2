use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::FdkaError;
use crate::knowledge::{FailureTrace, Operator, ProcessKnowledgeGraph};

/// Weights over (symbolic delta, tool-log similarity, parser confidence).
pub const LOCALIZATION_WEIGHTS: [f64; 3] = [1.0, 1.0, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsibilityScore {
    pub operator: String,
    pub phi: [f64; 3],
    pub r: f64,
}

/// Lowercase word tokens, splitting camel case and non-alphanumerics.
pub fn tokens(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            if c.is_ascii_uppercase() && prev_lower && !cur.is_empty() {
                out.insert(std::mem::take(&mut cur));
            }
            prev_lower = c.is_ascii_lowercase() || c.is_ascii_digit();
            cur.push(c.to_ascii_lowercase());
        } else {
            if !cur.is_empty() {
                out.insert(std::mem::take(&mut cur));
            }
            prev_lower = false;
        }
    }
    if !cur.is_empty() {
        out.insert(cur);
    }
    out
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

fn features(op: &Operator, trace: &FailureTrace) -> [f64; 3] {
    let failed = &trace.failed_operator;
    let mut evidence_text = trace.error.message.clone();
    for (k, v) in &trace.error.evidence {
        evidence_text.push(' ');
        evidence_text.push_str(k);
        evidence_text.push(' ');
        evidence_text.push_str(v);
    }
    if let Some(line) = trace.tool_log.last() {
        evidence_text.push(' ');
        evidence_text.push_str(line);
    }

    let own: BTreeSet<&str> = op
        .pre
        .iter()
        .chain(&op.eff)
        .map(|p| p.name.as_str())
        .collect();
    let mut focus: BTreeSet<&str> = failed.pre.iter().map(|p| p.name.as_str()).collect();
    let ev_words: BTreeSet<&str> = trace
        .error
        .evidence
        .values()
        .map(String::as_str)
        .chain(trace.error.message.split_whitespace())
        .collect();
    focus.extend(ev_words.iter().copied());
    let delta = jaccard(&own, &focus);

    let mut op_words = tokens(&op.name);
    for f in &op.tool_schema.fields {
        op_words.extend(tokens(&f.name));
    }
    let log_sim = jaccard(&op_words, &tokens(&evidence_text));

    let names_op = trace
        .error
        .evidence
        .get("operator")
        .is_some_and(|o| o == &op.name)
        || trace
            .tool_log
            .last()
            .is_some_and(|l| l.starts_with(&op.name));
    [delta, log_sim, if names_op { 1.0 } else { 0.0 }]
}

/// Softmax responsibility over operators appearing in the trace. The top
/// entry is returned first; ties go to the failed operator.
pub fn localize(
    trace: &FailureTrace,
    pkg: &ProcessKnowledgeGraph,
) -> Result<(String, Vec<ResponsibilityScore>), FdkaError> {
    let mut seen = BTreeSet::new();
    let mut cands: Vec<&Operator> = Vec::new();
    for a in &trace.actions {
        if seen.insert(a.operator.as_str()) {
            if a.operator == trace.failed_operator.name {
                cands.push(&trace.failed_operator);
            } else if let Some(op) = pkg.operators.get(&a.operator) {
                cands.push(op);
            }
        }
    }
    if cands.is_empty() {
        return Err(FdkaError::EmptyCandidates);
    }
    let phis: Vec<[f64; 3]> = cands.iter().map(|o| features(o, trace)).collect();
    let logits: Vec<f64> = phis
        .iter()
        .map(|p| p.iter().zip(LOCALIZATION_WEIGHTS).map(|(a, w)| a * w).sum())
        .collect();
    let r = softmax(&logits);
    let mut scores: Vec<ResponsibilityScore> = cands
        .iter()
        .zip(phis)
        .zip(r)
        .map(|((o, phi), r)| ResponsibilityScore {
            operator: o.name.clone(),
            phi,
            r,
        })
        .collect();
    let failed = trace.failed_operator.name.clone();
    scores.sort_by(|a, b| {
        b.r.total_cmp(&a.r)
            .then((b.operator == failed).cmp(&(a.operator == failed)))
    });
    Ok((scores[0].operator.clone(), scores))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}
