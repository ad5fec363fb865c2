use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::FdkaError;
use crate::knowledge::{
    EditAction, EditType, FailureTrace, Operator, Patch, PatchBody, Predicate, SchemaField,
    ToolSchema,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.3;
pub const MAX_TOKENS: u32 = 512;
pub const STATE_MINIMAL_LIMIT: usize = 10;

pub const SYSTEM_PROMPT: &str =
    "You repair symbolic operator definitions. Reply with one JSON object \
and nothing else. Fields: scope (operator name), edit_type (ADD_PRECONDITION, REFINE_EFFECT or \
UPDATE_TOOL_SCHEMA), predicate (for precondition/effect edits, e.g. \"not blocked(?x)\") or field \
(for schema edits, \"name:type\"), target, action (add, replace or remove), rationale.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorRecord {
    pub name: String,
    pub params: Vec<String>,
    pub preconditions: Vec<String>,
    pub effects: Vec<String>,
    pub tool_schema: ToolSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorView {
    #[serde(rename = "type")]
    pub kind: String,
    pub message: String,
    pub evidence: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub operator: OperatorRecord,
    pub state_minimal: Vec<String>,
    pub error: ErrorView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerRequest {
    pub trace_record: TraceRecord,
    pub exemplars: Vec<String>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerResponse {
    pub raw: String,
    /// Summed log-likelihood gap against a null edit, with its token count.
    #[serde(default)]
    pub logprob_gap: Option<(f64, usize)>,
}

pub trait Proposer {
    fn name(&self) -> &str;
    fn complete(&self, req: &ProposerRequest) -> Result<ProposerResponse, FdkaError>;
}

/// Builds the minimal request: the operator, at most ten failure-relevant
/// facts, and the error record.
pub fn serialize_request(
    trace: &FailureTrace,
    target: &Operator,
    exemplars: &[String],
) -> ProposerRequest {
    let mut relevant: BTreeSet<&str> = target
        .pre
        .iter()
        .chain(&target.eff)
        .map(|p| p.name.as_str())
        .collect();
    let ev: BTreeSet<String> = trace
        .error
        .evidence
        .values()
        .chain(std::iter::once(&trace.error.message))
        .flat_map(|v| {
            v.split(|c: char| !(c.is_alphanumeric() || c == '_'))
                .map(str::to_string)
        })
        .collect();
    relevant.extend(ev.iter().map(String::as_str));
    let args: BTreeSet<&str> = trace
        .failed_step()
        .args
        .iter()
        .map(String::as_str)
        .collect();
    let mut facts: Vec<(bool, String)> = trace
        .state_at_failure
        .facts
        .iter()
        .filter(|f| relevant.contains(f.name.as_str()))
        .map(|f| {
            let touches = f.args.iter().any(|a| args.contains(a.name()));
            (!touches, f.to_string())
        })
        .collect();
    facts.sort();
    let state_minimal = facts
        .into_iter()
        .take(STATE_MINIMAL_LIMIT)
        .map(|(_, s)| s)
        .collect();
    ProposerRequest {
        trace_record: TraceRecord {
            operator: OperatorRecord {
                name: target.name.clone(),
                params: target.params.iter().map(|p| p.to_string()).collect(),
                preconditions: target.pre.iter().map(|p| p.to_string()).collect(),
                effects: target.eff.iter().map(|p| p.to_string()).collect(),
                tool_schema: target.tool_schema.clone(),
            },
            state_minimal,
            error: ErrorView {
                kind: trace.error.class.clone(),
                message: trace.error.message.clone(),
                evidence: trace.error.evidence.clone(),
            },
        },
        exemplars: exemplars.to_vec(),
        temperature: DEFAULT_TEMPERATURE,
        max_tokens: MAX_TOKENS,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchWire {
    scope: String,
    edit_type: EditType,
    #[serde(default)]
    predicate: Option<String>,
    #[serde(default)]
    field: Option<String>,
    target: String,
    action: EditAction,
    #[serde(default)]
    rationale: String,
}

fn strip_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

/// Strict parse and type-check against `target`. Anything outside the closed
/// schema yields `None`.
pub fn parse_patch(raw: &str, target: &Operator) -> Option<Patch> {
    let w: PatchWire = serde_json::from_str(strip_fence(raw)).ok()?;
    let body = match (&w.edit_type, w.predicate, w.field) {
        (EditType::UpdateToolSchema, None, Some(f)) => {
            PatchBody::Field(f.parse::<SchemaField>().ok()?)
        }
        (EditType::AddPrecondition | EditType::RefineEffect, Some(p), None) => {
            PatchBody::Predicate(p.parse::<Predicate>().ok()?)
        }
        _ => return None,
    };
    let patch = Patch {
        scope: w.scope,
        edit_type: w.edit_type,
        body,
        target: w.target,
        action: w.action,
        rationale: w.rationale,
    };
    if patch.scope != target.name {
        return None;
    }
    patch.rollback_set(target).ok()?;
    Some(patch)
}

/// Serialize, call the proposer, parse. Transport errors propagate; schema
/// violations return `Ok(None)`.
pub fn propose(
    trace: &FailureTrace,
    target: &Operator,
    proposer: &dyn Proposer,
    exemplars: &[String],
) -> Result<Option<(Patch, ProposerResponse)>, FdkaError> {
    let req = serialize_request(trace, target, exemplars);
    let resp = proposer.complete(&req)?;
    Ok(parse_patch(&resp.raw, target).map(|p| (p, resp)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub class: String,
    pub operator: String,
    pub response: serde_json::Value,
}

/// Deterministic rule table keyed on (error class, operator).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockProposer {
    pub rules: Vec<MockRule>,
}

impl Proposer for MockProposer {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &ProposerRequest) -> Result<ProposerResponse, FdkaError> {
        let r = &req.trace_record;
        let raw = self
            .rules
            .iter()
            .find(|m| m.class == r.error.kind && m.operator == r.operator.name)
            .map(|m| m.response.to_string())
            .unwrap_or_else(|| "null".into());
        Ok(ProposerResponse {
            raw,
            logprob_gap: None,
        })
    }
}

/// Minimal chat-completion client.
#[derive(Debug, Clone)]
pub struct RemoteProposer {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl RemoteProposer {
    pub fn new(endpoint: &str, model: &str) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: None,
            timeout: Duration::from_secs(30),
        }
    }

    pub fn body(&self, req: &ProposerRequest) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": serde_json::to_string(req).expect("request serializes")},
            ],
        })
    }
}

impl Proposer for RemoteProposer {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete(&self, req: &ProposerRequest) -> Result<ProposerResponse, FdkaError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut call = agent
            .post(&self.endpoint)
            .header("content-type", "application/json");
        if let Some(k) = &self.api_key {
            call = call.header("authorization", &format!("Bearer {k}"));
        }
        let body = serde_json::to_string(&self.body(req)).expect("body serializes");
        let mut resp = call
            .send(body.as_str())
            .map_err(|e| FdkaError::Transport(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| FdkaError::Transport(e.to_string()))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| FdkaError::Transport(format!("bad response body: {e}")))?;
        let raw = v["choices"][0]["message"]["content"]
            .as_str()
            .unwrap_or("null")
            .to_string();
        Ok(ProposerResponse {
            raw,
            logprob_gap: None,
        })
    }
}
