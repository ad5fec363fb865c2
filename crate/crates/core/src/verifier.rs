//! Verify-before-act over the next `h` plan steps, with bounded local repair.

use std::collections::{BTreeMap, BTreeSet};
use std::num::NonZeroUsize;

use lru::LruCache;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::knowledge::{GroundStep, Operator, ProcessKnowledgeGraph, SymbolicState};
use crate::planner::{first_unsatisfied, Plan, PlanStep, StepArg};

pub const MEMO_CAPACITY: usize = 4096;
pub const MAX_SWAPS: usize = 2;
const MAX_BINDINGS_PER_OPERATOR: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Swap {
    pub index: usize,
    pub step: GroundStep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairDelta {
    pub swaps: Vec<Swap>,
}

impl RepairDelta {
    pub fn apply(&self, plan: &mut Plan) {
        for s in &self.swaps {
            if let Some(slot) = plan.steps.get_mut(s.index) {
                *slot = PlanStep::from_ground(&s.step);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Allow,
    Repair {
        failing_step: usize,
        delta: RepairDelta,
    },
    Block {
        failing_step: usize,
    },
}

/// Trust and rebinding hints consulted by local repair.
#[derive(Debug, Clone, Default)]
pub struct RepairContext {
    /// Operator name to trust; operators absent from the map count as 1.0.
    pub trust: BTreeMap<String, f64>,
    /// Steps that succeeded in earlier repairs; preferred on ties.
    pub micro_patches: BTreeSet<GroundStep>,
}

impl RepairContext {
    fn trust_of(&self, op: &str) -> f64 {
        self.trust.get(op).copied().unwrap_or(1.0)
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.trust {
            h.update(format!("{k}={v:.12};").as_bytes());
        }
        for s in &self.micro_patches {
            h.update(s.to_string().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn window_steps(plan: &Plan, h: usize) -> Vec<Option<GroundStep>> {
    plan.steps.iter().take(h).map(PlanStep::to_ground).collect()
}

/// First failing index in the window, treating unbound steps as failures.
fn window_failure(
    pkg: &ProcessKnowledgeGraph,
    state: &SymbolicState,
    steps: &[Option<GroundStep>],
) -> Option<usize> {
    let cut = steps
        .iter()
        .position(Option::is_none)
        .unwrap_or(steps.len());
    let ground: Vec<GroundStep> = steps[..cut].iter().map(|s| s.clone().unwrap()).collect();
    match first_unsatisfied(pkg, state, &ground) {
        Ok(Some(i)) => Some(i),
        Ok(None) if cut < steps.len() => Some(cut),
        Ok(None) => None,
        Err(_) => Some(0),
    }
}

fn goal_relevant(plan: &Plan) -> Option<BTreeSet<String>> {
    if plan.goal.is_empty() {
        None
    } else {
        Some(plan.goal.iter().map(|g| g.name.clone()).collect())
    }
}

fn relevant_adds(
    pkg: &ProcessKnowledgeGraph,
    step: &GroundStep,
    names: &Option<BTreeSet<String>>,
) -> Option<BTreeSet<String>> {
    let op = pkg.operators.get(&step.operator)?;
    let b = op.bind(&step.args).ok()?;
    Some(
        op.ground_eff(&b)
            .into_iter()
            .filter(|e| !e.negated && names.as_ref().is_none_or(|n| n.contains(&e.name)))
            .map(|e| e.to_string())
            .collect(),
    )
}

fn relevant_names<'a>(op: &'a Operator, names: &Option<BTreeSet<String>>) -> BTreeSet<&'a str> {
    op.eff
        .iter()
        .filter(|e| !e.negated && names.as_ref().is_none_or(|n| n.contains(&e.name)))
        .map(|e| e.name.as_str())
        .collect()
}

fn enumerate_bindings(
    state: &SymbolicState,
    types: &[String],
    fixed: &[Option<String>],
) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = vec![Vec::new()];
    for (i, ty) in types.iter().enumerate() {
        let choices: Vec<String> = match &fixed[i] {
            Some(v) => vec![v.clone()],
            None => state.entities_of_type(ty).map(str::to_string).collect(),
        };
        let mut next = Vec::new();
        'outer: for prefix in &out {
            for c in &choices {
                let mut p = prefix.clone();
                p.push(c.clone());
                next.push(p);
                if next.len() >= MAX_BINDINGS_PER_OPERATOR {
                    break 'outer;
                }
            }
        }
        out = next;
    }
    out
}

/// Replacement candidates for step `index`, best first.
fn candidates(
    plan: &Plan,
    index: usize,
    state: &SymbolicState,
    pkg: &ProcessKnowledgeGraph,
    ctx: &RepairContext,
) -> Vec<GroundStep> {
    let step = &plan.steps[index];
    let Some(op) = pkg.operators.get(&step.operator) else {
        return Vec::new();
    };
    if step.args.iter().any(|a| matches!(a, StepArg::Missing(_))) {
        return Vec::new();
    }
    let names = goal_relevant(plan);
    let mut out: Vec<GroundStep> = Vec::new();

    // Same operator, rebinding grounder-chosen positions.
    let types: Vec<String> = op.params.iter().map(|p| p.ty.clone()).collect();
    let fixed: Vec<Option<String>> = step
        .args
        .iter()
        .map(|a| match a {
            StepArg::Bound(v) => Some(v.clone()),
            _ => None,
        })
        .collect();
    let original = step.to_ground();
    let target = original
        .as_ref()
        .and_then(|g| relevant_adds(pkg, g, &names));
    for args in enumerate_bindings(state, &types, &fixed) {
        let chosen = step
            .args
            .iter()
            .map(|a| !matches!(a, StepArg::Bound(_)))
            .collect();
        let g = GroundStep {
            operator: op.name.clone(),
            args,
            chosen,
        };
        if Some(&g.args) == original.as_ref().map(|o| &o.args) {
            continue;
        }
        if let Some(t) = &target {
            if relevant_adds(pkg, &g, &names).as_ref() != Some(t) {
                continue;
            }
        }
        out.push(g);
    }

    // Alternative operators with identical goal-relevant add-effects.
    if let Some(t) = &target {
        let wanted = relevant_names(op, &names);
        for alt in pkg.operators.values() {
            if alt.name == op.name || relevant_names(alt, &names) != wanted {
                continue;
            }
            let types: Vec<String> = alt.params.iter().map(|p| p.ty.clone()).collect();
            let fixed = vec![None; types.len()];
            for args in enumerate_bindings(state, &types, &fixed) {
                let g = GroundStep {
                    operator: alt.name.clone(),
                    chosen: vec![true; args.len()],
                    args,
                };
                if relevant_adds(pkg, &g, &names).as_ref() == Some(t) {
                    out.push(g);
                }
            }
        }
    }

    out.sort_by(|a, b| {
        let ca = pkg
            .operators
            .get(&a.operator)
            .map_or(f64::INFINITY, |o| o.cost);
        let cb = pkg
            .operators
            .get(&b.operator)
            .map_or(f64::INFINITY, |o| o.cost);
        ctx.trust_of(&b.operator)
            .total_cmp(&ctx.trust_of(&a.operator))
            .then(ca.total_cmp(&cb))
            .then(
                ctx.micro_patches
                    .contains(b)
                    .cmp(&ctx.micro_patches.contains(a)),
            )
            .then(a.cmp(b))
    });
    out
}

/// Applies one step to `s`; false if it is unbound, ill-typed or blocked.
fn advance(pkg: &ProcessKnowledgeGraph, s: &mut SymbolicState, step: &Option<GroundStep>) -> bool {
    let Some(g) = step else { return false };
    let Some(op) = pkg.operators.get(&g.operator) else {
        return false;
    };
    let Ok(b) = op.bind(&g.args) else {
        return false;
    };
    s.entails(&op.ground_pre(&b)).unwrap_or(false) && s.apply_effects(&op.ground_eff(&b)).is_ok()
}

/// First failing index of `steps` with `swap` substituted.
fn run_with(
    pkg: &ProcessKnowledgeGraph,
    state: &SymbolicState,
    steps: &[Option<GroundStep>],
    swap: Option<(usize, &GroundStep)>,
) -> Option<usize> {
    let mut s = state.clone();
    for (i, step) in steps.iter().enumerate() {
        let ok = match swap {
            Some((j, g)) if j == i => advance(pkg, &mut s, &Some(g.clone())),
            _ => advance(pkg, &mut s, step),
        };
        if !ok {
            return Some(i);
        }
    }
    None
}

/// Searches for at most two step replacements inside the window that make
/// every step's preconditions hold.
pub fn local_repair(
    plan: &Plan,
    failing_step: usize,
    state: &SymbolicState,
    pkg: &ProcessKnowledgeGraph,
    ctx: &RepairContext,
    h: usize,
) -> Option<RepairDelta> {
    let n = plan.steps.len().min(h.max(failing_step + 1));
    let base = window_steps(plan, n);
    // Steps past the first failure leave the failing prefix intact, so every
    // useful swap set touches an index at or before it.
    let first = run_with(pkg, state, &base, None)?;
    let cands: Vec<Vec<GroundStep>> = (0..n)
        .map(|i| candidates(plan, i, state, pkg, ctx))
        .collect();
    let delta = |swaps: &[(usize, &GroundStep)]| RepairDelta {
        swaps: swaps
            .iter()
            .map(|(i, g)| Swap {
                index: *i,
                step: (*g).clone(),
            })
            .collect(),
    };
    let order: Vec<usize> = std::iter::once(failing_step)
        .chain((0..n).filter(|&i| i != failing_step))
        .filter(|&i| i < n)
        .collect();
    let single: Vec<Vec<Option<usize>>> = (0..n)
        .map(|i| {
            cands[i]
                .iter()
                .map(|c| {
                    if i <= first {
                        run_with(pkg, state, &base, Some((i, c)))
                    } else {
                        Some(first)
                    }
                })
                .collect()
        })
        .collect();
    for &i in &order {
        if let Some(c) = cands[i]
            .iter()
            .zip(&single[i])
            .find(|(_, f)| f.is_none())
            .map(|(c, _)| c)
        {
            return Some(delta(&[(i, c)]));
        }
    }
    // State just before `hi` with the `lo` swap applied, when that prefix holds.
    let prefix = |lo: usize, k: usize, hi: usize| -> Option<SymbolicState> {
        if single[lo][k].is_some_and(|f| f < hi) {
            return None;
        }
        let mut s = state.clone();
        for (i, step) in base[..hi].iter().enumerate() {
            let step = if i == lo {
                Some(cands[lo][k].clone())
            } else {
                step.clone()
            };
            if !advance(pkg, &mut s, &step) {
                return None;
            }
        }
        Some(s)
    };
    let finish = |mut s: SymbolicState, hi: usize, g: &GroundStep| {
        advance(pkg, &mut s, &Some(g.clone()))
            && base[hi + 1..].iter().all(|st| advance(pkg, &mut s, st))
    };
    for (a, &i) in order.iter().enumerate() {
        for &j in &order[a + 1..] {
            let (lo, hi) = (i.min(j), i.max(j));
            if lo > first || cands[i].is_empty() || cands[j].is_empty() {
                continue;
            }
            let states: Vec<Option<SymbolicState>> =
                (0..cands[lo].len()).map(|k| prefix(lo, k, hi)).collect();
            for (ki, ci) in cands[i].iter().enumerate() {
                for (kj, cj) in cands[j].iter().enumerate() {
                    let (k_lo, g_hi) = if i < j { (ki, cj) } else { (kj, ci) };
                    let Some(s) = &states[k_lo] else { continue };
                    if finish(s.clone(), hi, g_hi) {
                        let pair = [(lo, &cands[lo][k_lo]), (hi, g_hi)];
                        return Some(delta(&pair));
                    }
                }
            }
        }
    }
    None
}

pub fn verify_uncached(
    plan: &Plan,
    state: &SymbolicState,
    h: usize,
    pkg: &ProcessKnowledgeGraph,
    ctx: &RepairContext,
) -> Verdict {
    let h = h.max(1);
    let steps = window_steps(plan, h);
    match window_failure(pkg, state, &steps) {
        None => Verdict::Allow,
        Some(f) => match local_repair(plan, f, state, pkg, ctx, h) {
            Some(delta) => Verdict::Repair {
                failing_step: f,
                delta,
            },
            None => Verdict::Block { failing_step: f },
        },
    }
}

pub struct Verifier {
    memo: LruCache<String, Verdict>,
    pub hits: u64,
    pub misses: u64,
}

impl Default for Verifier {
    fn default() -> Self {
        Self::with_capacity(MEMO_CAPACITY)
    }
}

impl Verifier {
    pub fn with_capacity(cap: usize) -> Self {
        Self {
            memo: LruCache::new(NonZeroUsize::new(cap.max(1)).unwrap()),
            hits: 0,
            misses: 0,
        }
    }

    pub fn hit_rate(&self) -> f64 {
        let n = self.hits + self.misses;
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }

    fn key(
        plan: &Plan,
        state: &SymbolicState,
        h: usize,
        pkg: &ProcessKnowledgeGraph,
        ctx: &RepairContext,
    ) -> String {
        let mut hs = Sha256::new();
        for s in plan.steps.iter().take(h) {
            hs.update(s.to_string().as_bytes());
            hs.update(b";");
        }
        for g in &plan.goal {
            hs.update(g.to_string().as_bytes());
        }
        hs.update(format!("|{}|{}|{}|", state.digest(), pkg.version, h).as_bytes());
        hs.update(ctx.digest().as_bytes());
        hex::encode(hs.finalize())
    }

    pub fn verify(
        &mut self,
        plan: &Plan,
        state: &SymbolicState,
        h: usize,
        pkg: &ProcessKnowledgeGraph,
        ctx: &RepairContext,
    ) -> Verdict {
        let key = Self::key(plan, state, h, pkg, ctx);
        if let Some(v) = self.memo.get(&key) {
            self.hits += 1;
            return v.clone();
        }
        self.misses += 1;
        let v = verify_uncached(plan, state, h, pkg, ctx);
        self.memo.put(key, v.clone());
        v
    }
}
