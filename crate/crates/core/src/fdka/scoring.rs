use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ExperiencePool, FdkaError, ProposerResponse};
use crate::controller::sigmoid;
use crate::knowledge::{
    EditType, FailureCategory, FailureTrace, GroundStep, Invariant, Operator, Patch, PatchBody,
    Predicate, ProcessKnowledgeGraph, SymbolicState, ValueRule,
};

/// Structural-fit rubric used when the proposer exposes no log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityRubric {
    pub evidence: f64,
    pub scope: f64,
    pub edit_type: f64,
    pub bias: f64,
}

impl Default for PlausibilityRubric {
    fn default() -> Self {
        Self {
            evidence: 2.5,
            scope: 1.0,
            edit_type: 0.5,
            bias: -1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdkaConfig {
    pub w_plaus: f64,
    pub w_cons: f64,
    pub w_util: f64,
    pub w_risk: f64,
    pub w_val: f64,
    pub w_blast: f64,
    pub theta: f64,
    /// Acceptance threshold while fewer than `cold_start_min` cases exist.
    pub theta_cold_start: f64,
    pub cold_start_min: usize,
    pub k_retrieve: usize,
    pub p_alpha: f64,
    pub lambda_penalty: f64,
    pub b_regulate: f64,
    pub sat_limit: u128,
    pub rubric: PlausibilityRubric,
}

impl Default for FdkaConfig {
    fn default() -> Self {
        Self {
            w_plaus: 0.40,
            w_cons: 0.25,
            w_util: 0.25,
            w_risk: 0.10,
            w_val: 0.8,
            w_blast: 0.2,
            theta: 0.18,
            theta_cold_start: 0.09,
            cold_start_min: 3,
            k_retrieve: 20,
            p_alpha: 0.25,
            lambda_penalty: 0.05,
            b_regulate: 2.0,
            sat_limit: 1 << 20,
            rubric: PlausibilityRubric::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub s_plaus: f64,
    pub s_cons: f64,
    pub s_util: f64,
    pub s_risk: f64,
    pub lambda_budget: f64,
    pub aggregate: f64,
    pub cold_start: bool,
}

pub fn aggregate(
    s_plaus: f64,
    s_cons: f64,
    s_util: f64,
    s_risk: f64,
    lambda_budget: f64,
    cfg: &FdkaConfig,
) -> f64 {
    cfg.w_plaus * s_plaus + cfg.w_cons * s_cons + cfg.w_util * s_util
        - cfg.w_risk * s_risk
        - lambda_budget
}

pub fn lambda_budget(fdka_elapsed: f64, cfg: &FdkaConfig) -> f64 {
    if fdka_elapsed > cfg.b_regulate {
        cfg.lambda_penalty
    } else {
        0.0
    }
}

pub fn expected_edit_type(cat: FailureCategory) -> EditType {
    match cat {
        FailureCategory::ToolSchemaDrift | FailureCategory::AuthSchemaDrift => {
            EditType::UpdateToolSchema
        }
        FailureCategory::Timeout | FailureCategory::Transient503 => EditType::RefineEffect,
        FailureCategory::PolicyFlip
        | FailureCategory::FieldValidation
        | FailureCategory::OodEntity => EditType::AddPrecondition,
    }
}

/// Length-normalized log-likelihood gap when available, else the rubric.
pub fn plausibility(
    patch: &Patch,
    trace: &FailureTrace,
    resp: Option<&ProposerResponse>,
    cfg: &FdkaConfig,
) -> f64 {
    if let Some((gap, n)) = resp.and_then(|r| r.logprob_gap) {
        return sigmoid(gap / n.max(1) as f64);
    }
    let r = &cfg.rubric;
    let name = patch.body.name();
    let mentioned = std::iter::once(&trace.error.message)
        .chain(trace.error.evidence.values())
        .any(|v| v.contains(name));
    let scoped = patch.scope == trace.failed_operator.name;
    let typed = trace
        .error
        .category
        .is_some_and(|c| expected_edit_type(c) == patch.edit_type);
    let z = r.bias
        + if mentioned { r.evidence } else { 0.0 }
        + if scoped { r.scope } else { 0.0 }
        + if typed { r.edit_type } else { 0.0 };
    sigmoid(z)
}

fn lit_true(
    lit: &Predicate,
    facts: &BTreeSet<Predicate>,
    free: &BTreeMap<Predicate, usize>,
    bits: u64,
) -> bool {
    let atom = lit.atom();
    let v = match free.get(&atom) {
        Some(&i) => bits >> i & 1 == 1,
        None => facts.contains(&atom),
    };
    v != lit.negated
}

fn instances(inv: &Invariant, consts: &[String]) -> Vec<Vec<Predicate>> {
    let vars: Vec<String> = {
        let mut s = BTreeSet::new();
        for l in &inv.forbid {
            s.extend(l.vars().map(str::to_string));
        }
        s.into_iter().collect()
    };
    if vars.is_empty() {
        return vec![inv.forbid.clone()];
    }
    if consts.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut idx = vec![0usize; vars.len()];
    loop {
        let b = vars
            .iter()
            .cloned()
            .zip(idx.iter().map(|&i| consts[i].clone()))
            .collect();
        out.push(inv.forbid.iter().map(|l| l.substitute(&b)).collect());
        let mut d = 0;
        loop {
            if d == idx.len() {
                return out;
            }
            idx[d] += 1;
            if idx[d] < consts.len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// 1 iff some type-correct binding makes the patched preconditions jointly
/// satisfiable with the state facts and the invariants, by exhaustive
/// assignment of the atoms the state leaves open.
pub fn consistency(
    patched: &Operator,
    state: &SymbolicState,
    invariants: &[Invariant],
    fallback_args: &[String],
    cfg: &FdkaConfig,
) -> Result<f64, FdkaError> {
    if patched.validate().is_err() {
        return Ok(0.0);
    }
    let used: BTreeSet<&str> = patched.pre.iter().flat_map(|p| p.vars()).collect();
    let mut domains: Vec<(String, Vec<String>)> = Vec::new();
    for (i, p) in patched.params.iter().enumerate() {
        if !used.contains(p.name.as_str()) {
            continue;
        }
        let mut vals: BTreeSet<String> =
            state.entities_of_type(&p.ty).map(str::to_string).collect();
        if let Some(a) = fallback_args.get(i) {
            vals.insert(a.clone());
        }
        domains.push((p.name.clone(), vals.into_iter().collect()));
    }
    if domains.iter().any(|(_, v)| v.is_empty()) {
        return Ok(0.0);
    }

    let mut needed: u128 = 0;
    let mut idx = vec![0usize; domains.len()];
    loop {
        let b = domains
            .iter()
            .zip(&idx)
            .map(|((n, vals), &i)| (n.clone(), vals[i].clone()))
            .collect();
        let lits: Vec<Predicate> = patched.ground_pre(&b);
        let consts: Vec<String> = lits
            .iter()
            .flat_map(|l| l.args.iter().map(|t| t.name().to_string()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let lit_atoms: BTreeSet<Predicate> = lits.iter().map(Predicate::atom).collect();
        let inv: Vec<Vec<Predicate>> = invariants
            .iter()
            .flat_map(|i| instances(i, &consts))
            .filter(|inst| inst.iter().any(|l| lit_atoms.contains(&l.atom())))
            .collect();
        let mut free = BTreeMap::new();
        for l in lits.iter().chain(inv.iter().flatten()) {
            let a = l.atom();
            if !state.facts.contains(&a) && !free.contains_key(&a) {
                let n = free.len();
                free.insert(a, n);
            }
        }
        let space = 1u128.checked_shl(free.len() as u32).unwrap_or(u128::MAX);
        needed = needed.saturating_add(space);
        if free.len() >= 64 || needed > cfg.sat_limit {
            return Err(FdkaError::Capacity {
                needed,
                limit: cfg.sat_limit,
            });
        }
        for bits in 0..(1u64 << free.len()) {
            let pre_ok = lits.iter().all(|l| lit_true(l, &state.facts, &free, bits));
            let inv_ok = inv
                .iter()
                .all(|inst| !inst.iter().all(|l| lit_true(l, &state.facts, &free, bits)));
            if pre_ok && inv_ok {
                return Ok(1.0);
            }
        }

        let mut d = 0;
        loop {
            if d == idx.len() {
                return Ok(0.0);
            }
            idx[d] += 1;
            if idx[d] < domains[d].1.len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// A historical (or canary) call to re-run in isolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayCase {
    pub task_index: usize,
    pub state: SymbolicState,
    pub call: GroundStep,
}

pub fn replay_case(trace: &FailureTrace) -> ReplayCase {
    ReplayCase {
        task_index: trace.task_index,
        state: trace.state_at_failure.clone(),
        call: trace.failed_step().clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayOutcome {
    Pass,
    Mitigated,
    Fail,
}

/// Side-effect-free re-execution against a candidate PKG.
pub trait Sandbox {
    fn replay(&self, case: &ReplayCase, pkg: &ProcessKnowledgeGraph) -> ReplayOutcome;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityTally {
    pub k: usize,
    pub prevented: usize,
    pub mitigated: usize,
    pub value: f64,
    pub cold_start: bool,
}

pub fn utility(
    patched_pkg: &ProcessKnowledgeGraph,
    cases: &[ReplayCase],
    sandbox: &dyn Sandbox,
    cfg: &FdkaConfig,
) -> UtilityTally {
    let cases = &cases[..cases.len().min(cfg.k_retrieve)];
    let (mut prevented, mut mitigated) = (0, 0);
    for c in cases {
        match sandbox.replay(c, patched_pkg) {
            ReplayOutcome::Pass => prevented += 1,
            ReplayOutcome::Mitigated => mitigated += 1,
            ReplayOutcome::Fail => {}
        }
    }
    let k = cases.len();
    let value = if k == 0 {
        0.0
    } else {
        (prevented as f64 + 0.5 * mitigated as f64) / k as f64
    };
    UtilityTally {
        k,
        prevented,
        mitigated,
        value,
        cold_start: k < cfg.cold_start_min,
    }
}

fn affected_operators<'a>(patch: &Patch, pkg: &'a ProcessKnowledgeGraph) -> BTreeSet<&'a str> {
    let name = patch.body.name();
    let mut out: BTreeSet<&str> = pkg
        .operators
        .values()
        .filter(|o| match &patch.body {
            PatchBody::Predicate(_) => o.pre.iter().chain(&o.eff).any(|p| p.name == name),
            PatchBody::Field(_) => {
                o.tool_schema.has_field(&patch.target) || o.tool_schema.has_field(name)
            }
        })
        .map(|o| o.name.as_str())
        .collect();
    if let Some((k, _)) = pkg.operators.get_key_value(&patch.scope) {
        out.insert(k.as_str());
    }
    out
}

/// Returns (q_val, b, s_risk).
pub fn risk(
    patch: &Patch,
    rules: &[ValueRule],
    pkg: &ProcessKnowledgeGraph,
    cfg: &FdkaConfig,
) -> (f64, f64, f64) {
    let q_val = if rules.is_empty() {
        0.0
    } else {
        let name = patch.body.name();
        let hits = rules
            .iter()
            .filter(|r| {
                r.action == patch.scope
                    && (r.condition.is_empty() || r.condition.iter().any(|c| c.name == name))
            })
            .count();
        hits as f64 / rules.len() as f64
    };
    let b = if pkg.operators.is_empty() {
        0.0
    } else {
        affected_operators(patch, pkg).len() as f64 / pkg.operators.len() as f64
    };
    (q_val, b, cfg.w_val * q_val + cfg.w_blast * b)
}

#[allow(clippy::too_many_arguments)]
pub fn score(
    patch: &Patch,
    trace: &FailureTrace,
    resp: Option<&ProposerResponse>,
    pkg: &ProcessKnowledgeGraph,
    pool: &ExperiencePool,
    rules: &[ValueRule],
    invariants: &[Invariant],
    sandbox: &dyn Sandbox,
    fdka_elapsed: f64,
    cfg: &FdkaConfig,
) -> Result<ScoreBreakdown, FdkaError> {
    let mut patched_pkg = pkg.clone();
    patched_pkg.apply(patch)?;
    let patched = patched_pkg.operator(&patch.scope)?;
    let s_plaus = plausibility(patch, trace, resp, cfg);
    let s_cons = consistency(
        patched,
        &trace.state_at_failure,
        invariants,
        &trace.failed_step().args,
        cfg,
    )?;
    let cases: Vec<ReplayCase> = pool
        .retrieve(&trace.error.class, &patch.scope, cfg.k_retrieve)
        .into_iter()
        .map(replay_case)
        .collect();
    let util = utility(&patched_pkg, &cases, sandbox, cfg);
    let (_, _, s_risk) = risk(patch, rules, pkg, cfg);
    let lambda = lambda_budget(fdka_elapsed, cfg);
    Ok(ScoreBreakdown {
        s_plaus,
        s_cons,
        s_util: util.value,
        s_risk,
        lambda_budget: lambda,
        aggregate: aggregate(s_plaus, s_cons, util.value, s_risk, lambda, cfg),
        cold_start: util.cold_start,
    })
}
