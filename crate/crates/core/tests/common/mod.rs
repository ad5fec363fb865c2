//! Brute-force oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use ratchet_core::controller::{ControllerConfig, Pathway};
use ratchet_core::envsim::{requirement_met, Environment, Persistence, Scenario};
use ratchet_core::fdka::ReplayCase;
use ratchet_core::knowledge::{
    EditAction, EditType, GroundStep, Operator, Patch, PatchBody, Predicate, ProcessKnowledgeGraph,
    SchemaField, SymbolicState,
};
use ratchet_core::planner::{Plan, PlanStep, Planner, PlannerConfig};

/// First index whose preconditions fail when the steps are run in order.
pub fn simulate(
    pkg: &ProcessKnowledgeGraph,
    state: &SymbolicState,
    steps: &[Option<GroundStep>],
) -> Option<usize> {
    let mut s = state.clone();
    for (i, step) in steps.iter().enumerate() {
        let Some(g) = step else { return Some(i) };
        let Some(op) = pkg.operators.get(&g.operator) else {
            return Some(i);
        };
        let Ok(b) = op.bind(&g.args) else {
            return Some(i);
        };
        for p in op.ground_pre(&b) {
            if !s.holds(&p).unwrap_or(false) {
                return Some(i);
            }
        }
        if s.apply_effects(&op.ground_eff(&b)).is_err() {
            return Some(i);
        }
    }
    None
}

pub fn window(plan: &Plan, h: usize) -> Vec<Option<GroundStep>> {
    plan.steps.iter().take(h).map(PlanStep::to_ground).collect()
}

/// Every task's planned state/plan pair in a scenario, deduplicated.
pub fn task_plans(scenario: &Scenario) -> Vec<(SymbolicState, Plan)> {
    let pkg = scenario.domain.pkg().unwrap();
    let env = Environment::new(scenario, scenario.seed);
    let mut planner = Planner::new(PlannerConfig::default());
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, t) in scenario.tasks.iter().enumerate() {
        let state = env.task_state(i).unwrap();
        let Ok(plan) = planner.plan(&t.instruction(), &pkg, &state, &BTreeSet::new()) else {
            continue;
        };
        if seen.insert((state.digest(), plan.digest())) {
            out.push((state, plan));
        }
    }
    out
}

/// All orderings of all subsets of the plan's steps with at most `max` steps.
pub fn arrangements(plan: &Plan, max: usize) -> Vec<Plan> {
    let steps: Vec<PlanStep> = plan.steps.iter().take(max).cloned().collect();
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut cur: Vec<usize> = Vec::new();
    fn rec(
        steps: &[PlanStep],
        cur: &mut Vec<usize>,
        plan: &Plan,
        seen: &mut BTreeSet<String>,
        out: &mut Vec<Plan>,
    ) {
        let p = Plan {
            steps: cur.iter().map(|&i| steps[i].clone()).collect(),
            ..plan.clone()
        };
        if seen.insert(p.digest()) {
            out.push(p);
        }
        for i in 0..steps.len() {
            if !cur.contains(&i) {
                cur.push(i);
                rec(steps, cur, plan, seen, out);
                cur.pop();
            }
        }
    }
    rec(&steps, &mut cur, plan, &mut seen, &mut out);
    out
}

/// Reference reading of the three-way pathway rule.
pub fn arbitrate_oracle(u: f64, p: f64, b: f64, cfg: &ControllerConfig) -> Pathway {
    let verify = p > cfg.tau_p && b >= cfg.c_verify;
    let deliberate = u > cfg.tau_u && b >= cfg.c_s2;
    match (verify, deliberate) {
        (true, _) => Pathway::Verify,
        (false, true) => Pathway::S2,
        (false, false) => Pathway::S1,
    }
}

fn tuples(state: &SymbolicState, op: &Operator, fixed: &[Option<String>]) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    for (p, f) in op.params.iter().zip(fixed) {
        let dom: Vec<String> = match f {
            Some(v) => vec![v.clone()],
            None => state
                .entities
                .iter()
                .filter(|(_, t)| **t == p.ty)
                .map(|(e, _)| e.clone())
                .collect(),
        };
        out = out
            .into_iter()
            .flat_map(|prefix| {
                dom.iter().map(move |d| {
                    let mut v = prefix.clone();
                    v.push(d.clone());
                    v
                })
            })
            .collect();
    }
    out
}

fn call_ok(
    scenario: &Scenario,
    op: &Operator,
    args: &[String],
    state: &SymbolicState,
    task: usize,
) -> bool {
    let Ok(b) = op.bind(args) else { return false };
    let typed = op
        .params
        .iter()
        .zip(args)
        .all(|(p, a)| state.entities.get(a) == Some(&p.ty));
    let class = scenario.tasks.get(task).map(|t| t.task_class.as_str());
    typed
        && state.entails(&op.ground_pre(&b)).unwrap_or(false)
        && scenario
            .failure_schedule
            .iter()
            .filter(|i| {
                i.operator == op.name
                    && i.persistence == Persistence::PersistentUntilPatched
                    && i.tasks.matches(task, class)
            })
            .all(|i| requirement_met(&i.requirement, op, &b, state))
}

/// 1 for a prevented failure, 0.5 for a mitigated one, 0 otherwise.
pub fn case_value(scenario: &Scenario, pkg: &ProcessKnowledgeGraph, case: &ReplayCase) -> f64 {
    let call = &case.call;
    let Some(op) = pkg.operators.get(&call.operator) else {
        return 0.0;
    };
    let Ok(b) = op.bind(&call.args) else {
        return 0.0;
    };
    let st = &case.state;
    if st.entails(&op.ground_pre(&b)).unwrap_or(false) {
        return if call_ok(scenario, op, &call.args, st, case.task_index) {
            1.0
        } else {
            0.0
        };
    }
    let fixed: Vec<Option<String>> = (0..call.args.len())
        .map(|i| (!call.is_chosen(i)).then(|| call.args[i].clone()))
        .collect();
    if fixed.iter().any(Option::is_none)
        && tuples(st, op, &fixed)
            .iter()
            .any(|a| call_ok(scenario, op, a, st, case.task_index))
    {
        return 1.0;
    }
    let adds: BTreeSet<&str> = op
        .eff
        .iter()
        .filter(|e| !e.negated)
        .map(|e| e.name.as_str())
        .collect();
    for alt in pkg.operators.values() {
        let alt_adds: BTreeSet<&str> = alt
            .eff
            .iter()
            .filter(|e| !e.negated)
            .map(|e| e.name.as_str())
            .collect();
        if alt.name == op.name || alt_adds != adds {
            continue;
        }
        let fixed: Vec<Option<String>> = alt
            .params
            .iter()
            .map(|p| {
                op.params
                    .iter()
                    .position(|q| q.name == p.name && q.ty == p.ty)
                    .map(|i| call.args[i].clone())
            })
            .collect();
        if tuples(st, alt, &fixed)
            .iter()
            .any(|a| call_ok(scenario, alt, a, st, case.task_index))
        {
            return 0.5;
        }
    }
    0.0
}

pub fn utility_oracle(
    scenario: &Scenario,
    pkg: &ProcessKnowledgeGraph,
    cases: &[ReplayCase],
) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    cases
        .iter()
        .map(|c| case_value(scenario, pkg, c))
        .sum::<f64>()
        / cases.len() as f64
}

fn vocabulary(pkg: &ProcessKnowledgeGraph) -> (Vec<String>, Vec<String>) {
    let mut preds: BTreeSet<String> = BTreeSet::new();
    let mut fields: BTreeSet<String> = BTreeSet::new();
    for op in pkg.operators.values() {
        preds.extend(op.pre.iter().chain(&op.eff).map(|p| p.name.clone()));
        fields.extend(op.tool_schema.fields.iter().map(|f| f.name.clone()));
    }
    preds.extend(["fresh_flag", "probe_ok"].map(String::from));
    fields.extend(["fresh_field", "probe_token"].map(String::from));
    (preds.into_iter().collect(), fields.into_iter().collect())
}

/// A random well-typed patch against some operator of `pkg`; about half
/// the draws target existing elements so remove/replace edits are common.
pub fn random_patch<R: Rng>(rng: &mut R, pkg: &ProcessKnowledgeGraph) -> Patch {
    let (preds, fields) = vocabulary(pkg);
    let ops: Vec<&Operator> = pkg.operators.values().collect();
    let op = *ops.choose(rng).unwrap();
    let pred = |rng: &mut R| -> Predicate {
        let name = preds.choose(rng).unwrap();
        let arity = rng.random_range(0..=op.params.len().min(2));
        let args: Vec<String> = (0..arity)
            .map(|_| format!("?{}", op.params.choose(rng).unwrap().name))
            .collect();
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let p = Predicate::new(name, &refs);
        if rng.random_bool(0.25) {
            p.negate()
        } else {
            p
        }
    };
    let mk = |edit_type, body, target: &str, action| Patch {
        scope: op.name.clone(),
        edit_type,
        body,
        target: target.to_string(),
        action,
        rationale: String::new(),
    };
    match rng.random_range(0..7) {
        0 => mk(
            EditType::AddPrecondition,
            PatchBody::Predicate(pred(rng)),
            "pre",
            EditAction::Add,
        ),
        1 => {
            let p = op.pre.choose(rng).cloned().unwrap_or_else(|| pred(rng));
            mk(
                EditType::AddPrecondition,
                PatchBody::Predicate(p),
                "pre",
                EditAction::Remove,
            )
        }
        2 => mk(
            EditType::RefineEffect,
            PatchBody::Predicate(pred(rng)),
            "eff",
            EditAction::Add,
        ),
        3 => {
            let p = op.eff.choose(rng).cloned().unwrap_or_else(|| pred(rng));
            mk(
                EditType::RefineEffect,
                PatchBody::Predicate(p),
                "eff",
                EditAction::Remove,
            )
        }
        4 => {
            let target = op
                .eff
                .choose(rng)
                .map_or("missing".to_string(), |e| e.name.clone());
            mk(
                EditType::RefineEffect,
                PatchBody::Predicate(pred(rng)),
                &target,
                EditAction::Replace,
            )
        }
        5 => {
            let f = SchemaField::new(fields.choose(rng).unwrap(), "string");
            let target = f.name.clone();
            let action = if op.tool_schema.has_field(&target) {
                EditAction::Remove
            } else {
                EditAction::Add
            };
            mk(
                EditType::UpdateToolSchema,
                PatchBody::Field(f),
                &target,
                action,
            )
        }
        _ => {
            let target = op
                .tool_schema
                .fields
                .choose(rng)
                .map_or("missing".to_string(), |f| f.name.clone());
            let f = SchemaField::new(fields.choose(rng).unwrap(), "string");
            mk(
                EditType::UpdateToolSchema,
                PatchBody::Field(f),
                &target,
                EditAction::Replace,
            )
        }
    }
}

pub fn shipped_domains() -> Vec<&'static str> {
    vec!["travel", "ecommerce", "itsm"]
}

pub fn counts<T: Ord + Clone>(xs: &[T]) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for x in xs {
        *m.entry(x.clone()).or_insert(0) += 1;
    }
    m
}
