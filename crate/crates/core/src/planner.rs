//! HTN compilation of instructions into operator sequences, grounding of free
//! variables against the symbolic state, and replanning after commits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::knowledge::{
    GroundStep, KnowledgeError, Method, Predicate, ProcessKnowledgeGraph, SymbolicState, Term,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("unknown task class {0}")]
    UnknownTask(String),
    #[error("no applicable method for {0}")]
    NoMethod(String),
    #[error("no method of {0} admits a satisfiable grounding")]
    Unsatisfiable(String),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub task_class: String,
    #[serde(default)]
    pub slots: BTreeMap<String, String>,
    /// Display text only.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub text: String,
}

impl Instruction {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.task_class.as_bytes());
        for (k, v) in &self.slots {
            h.update(b"|");
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepArg {
    /// Fixed by the instruction or by a method literal.
    Bound(String),
    /// Picked by the grounder.
    Chosen(String),
    /// Free variable awaiting grounding.
    Var(String),
    /// Slot with no usable value (absent, unknown entity or wrong type).
    Missing(String),
}

impl StepArg {
    pub fn value(&self) -> Option<&str> {
        match self {
            StepArg::Bound(v) | StepArg::Chosen(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlanStep {
    pub operator: String,
    pub args: Vec<StepArg>,
}

impl PlanStep {
    pub fn is_grounded(&self) -> bool {
        self.args.iter().all(|a| a.value().is_some())
    }

    pub fn to_ground(&self) -> Option<GroundStep> {
        let args = self
            .args
            .iter()
            .map(|a| a.value().map(str::to_string))
            .collect::<Option<Vec<_>>>()?;
        Some(GroundStep {
            operator: self.operator.clone(),
            args,
            chosen: self
                .args
                .iter()
                .map(|a| matches!(a, StepArg::Chosen(_)))
                .collect(),
        })
    }

    pub fn from_ground(g: &GroundStep) -> Self {
        Self {
            operator: g.operator.clone(),
            args: g
                .args
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    if g.is_chosen(i) {
                        StepArg::Chosen(a.clone())
                    } else {
                        StepArg::Bound(a.clone())
                    }
                })
                .collect(),
        }
    }
}

impl fmt::Display for PlanStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.operator)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match a {
                StepArg::Bound(v) | StepArg::Chosen(v) => f.write_str(v)?,
                StepArg::Var(v) => write!(f, "?{v}")?,
                StepArg::Missing(v) => write!(f, "${v}")?,
            }
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub instruction_id: String,
    pub method: String,
    pub goal: Vec<Predicate>,
    pub steps: Vec<PlanStep>,
}

impl Plan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn arg_counts(&self) -> (usize, usize) {
        let total = self.steps.iter().map(|s| s.args.len()).sum();
        let unbound = self
            .steps
            .iter()
            .flat_map(|s| &s.args)
            .filter(|a| a.value().is_none())
            .count();
        (unbound, total)
    }

    /// Fraction of argument slots without a value.
    pub fn unbound_fraction(&self) -> f64 {
        match self.arg_counts() {
            (_, 0) => 0.0,
            (u, t) => u as f64 / t as f64,
        }
    }

    pub fn ground_steps(&self) -> Option<Vec<GroundStep>> {
        self.steps.iter().map(PlanStep::to_ground).collect()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.steps {
            h.update(s.to_string().as_bytes());
            h.update(b";");
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub max_depth: usize,
    pub max_branching: usize,
    pub max_steps: usize,
    pub max_assignments: usize,
    pub max_expansions: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            max_depth: 5,
            max_branching: 4,
            max_steps: 12,
            max_assignments: 4096,
            max_expansions: 64,
        }
    }
}

fn method_cost(pkg: &ProcessKnowledgeGraph, m: &Method) -> f64 {
    m.subtasks
        .iter()
        .filter_map(|s| pkg.operators.get(&s.name))
        .map(|o| o.cost)
        .sum()
}

fn ordered_methods<'a>(
    pkg: &'a ProcessKnowledgeGraph,
    task: &'a str,
    cfg: &PlannerConfig,
) -> Vec<&'a Method> {
    let mut ms: Vec<&Method> = pkg.methods_for(task).collect();
    ms.sort_by(|a, b| {
        a.name
            .cmp(&b.name)
            .then(method_cost(pkg, a).total_cmp(&method_cost(pkg, b)))
    });
    ms.truncate(cfg.max_branching);
    ms
}

fn step_from_call(call: &Predicate, slots: &BTreeMap<String, String>) -> PlanStep {
    let args = call
        .args
        .iter()
        .map(|t| match t {
            Term::Var(v) => StepArg::Var(v.clone()),
            Term::Const(c) => match c.strip_prefix('$') {
                Some(slot) => match slots.get(slot) {
                    Some(v) => StepArg::Bound(v.clone()),
                    None => StepArg::Missing(slot.to_string()),
                },
                None => StepArg::Bound(c.clone()),
            },
        })
        .collect();
    PlanStep {
        operator: call.name.clone(),
        args,
    }
}

/// All decompositions of `task`, in preference order.
fn expand(
    pkg: &ProcessKnowledgeGraph,
    task: &str,
    slots: &BTreeMap<String, String>,
    depth: usize,
    cfg: &PlannerConfig,
) -> Vec<(String, Vec<PlanStep>, Vec<Predicate>)> {
    if depth > cfg.max_depth {
        return Vec::new();
    }
    let mut out = Vec::new();
    for m in ordered_methods(pkg, task, cfg) {
        // Partial expansions: each is (steps, goal)
        let mut partial: Vec<(Vec<PlanStep>, Vec<Predicate>)> = vec![(
            Vec::new(),
            m.goal.iter().map(|g| g.fill_slots(slots)).collect(),
        )];
        for sub in &m.subtasks {
            let options: Vec<(Vec<PlanStep>, Vec<Predicate>)> =
                if pkg.operators.contains_key(&sub.name) {
                    vec![(vec![step_from_call(sub, slots)], Vec::new())]
                } else {
                    expand(pkg, &sub.name, slots, depth + 1, cfg)
                        .into_iter()
                        .map(|(_, s, g)| (s, g))
                        .collect()
                };
            let mut next = Vec::new();
            for (steps, goal) in &partial {
                for (s2, g2) in &options {
                    if steps.len() + s2.len() > cfg.max_steps {
                        continue;
                    }
                    let mut s = steps.clone();
                    s.extend(s2.iter().cloned());
                    let mut g = goal.clone();
                    g.extend(g2.iter().cloned());
                    next.push((s, g));
                    if next.len() >= cfg.max_expansions {
                        break;
                    }
                }
            }
            partial = next;
            if partial.is_empty() {
                break;
            }
        }
        for (s, g) in partial {
            out.push((m.name.clone(), s, g));
            if out.len() >= cfg.max_expansions {
                return out;
            }
        }
    }
    out
}

/// Every candidate plan for the instruction, most preferred first.
pub fn expansions(
    instr: &Instruction,
    pkg: &ProcessKnowledgeGraph,
    cfg: &PlannerConfig,
) -> Result<Vec<Plan>, PlanError> {
    if !pkg.has_task(&instr.task_class) {
        return Err(PlanError::UnknownTask(instr.task_class.clone()));
    }
    let plans: Vec<Plan> = expand(pkg, &instr.task_class, &instr.slots, 1, cfg)
        .into_iter()
        .map(|(method, steps, goal)| Plan {
            instruction_id: instr.id.clone(),
            method,
            goal,
            steps,
        })
        .collect();
    if plans.is_empty() {
        return Err(PlanError::NoMethod(instr.task_class.clone()));
    }
    Ok(plans)
}

pub fn compile(instr: &Instruction, pkg: &ProcessKnowledgeGraph) -> Result<Plan, PlanError> {
    Ok(expansions(instr, pkg, &PlannerConfig::default())?.remove(0))
}

/// Index of the first step whose preconditions fail when executing `steps`
/// from `state` under the declared effect model.
pub fn first_unsatisfied(
    pkg: &ProcessKnowledgeGraph,
    state: &SymbolicState,
    steps: &[GroundStep],
) -> Result<Option<usize>, KnowledgeError> {
    let mut s = state.clone();
    for (i, step) in steps.iter().enumerate() {
        let op = pkg.operator(&step.operator)?;
        let b = op.bind(&step.args)?;
        if !s.entails(&op.ground_pre(&b))? {
            return Ok(Some(i));
        }
        s.apply_effects(&op.ground_eff(&b))?;
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grounding {
    pub plan: Plan,
    /// Every step bound and every precondition satisfied in simulation.
    pub feasible: bool,
}

/// Grounds free variables jointly, in lexicographic candidate order,
/// preferring the first assignment whose simulation satisfies every
/// precondition. Constants in `avoid` are tried last.
pub fn ground_with(
    plan: &Plan,
    state: &SymbolicState,
    pkg: &ProcessKnowledgeGraph,
    avoid: &BTreeSet<String>,
    cfg: &PlannerConfig,
) -> Grounding {
    let mut plan = plan.clone();
    let mut var_types: Vec<(String, String)> = Vec::new();
    for step in &mut plan.steps {
        let Some(op) = pkg.operators.get(&step.operator) else {
            continue;
        };
        for (i, arg) in step.args.iter_mut().enumerate() {
            let ty = op.params.get(i).map(|p| p.ty.clone()).unwrap_or_default();
            match arg {
                StepArg::Bound(v) => {
                    if state.entities.get(v.as_str()) != Some(&ty) {
                        *arg = StepArg::Missing(v.clone());
                    }
                }
                StepArg::Var(v) if !var_types.iter().any(|(n, _)| n == v) => {
                    var_types.push((v.clone(), ty));
                }
                _ => {}
            }
        }
    }
    let candidates: Vec<Vec<String>> = var_types
        .iter()
        .map(|(_, ty)| {
            let mut c: Vec<String> = state.entities_of_type(ty).map(str::to_string).collect();
            c.sort_by_key(|x| avoid.contains(x));
            c
        })
        .collect();
    let live: Vec<usize> = (0..var_types.len())
        .filter(|&i| !candidates[i].is_empty())
        .collect();

    let assign = |plan: &Plan, choice: &[usize]| -> Plan {
        let mut binding: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, &vi) in live.iter().enumerate() {
            binding.insert(&var_types[vi].0, &candidates[vi][choice[k]]);
        }
        let mut p = plan.clone();
        for step in &mut p.steps {
            for arg in &mut step.args {
                if let StepArg::Var(v) = arg {
                    *arg = match binding.get(v.as_str()) {
                        Some(c) => StepArg::Chosen(c.to_string()),
                        None => StepArg::Missing(v.clone()),
                    };
                }
            }
        }
        let b = binding
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        p.goal = p.goal.iter().map(|g| g.substitute(&b)).collect();
        p
    };
    let feasible = |p: &Plan| match p.ground_steps() {
        Some(steps) => matches!(first_unsatisfied(pkg, state, &steps), Ok(None)),
        None => false,
    };

    let mut choice = vec![0usize; live.len()];
    let first = assign(&plan, &choice);
    if feasible(&first) {
        return Grounding {
            plan: first,
            feasible: true,
        };
    }
    for _ in 1..cfg.max_assignments {
        // Odometer increment, last variable fastest.
        let mut k = live.len();
        loop {
            if k == 0 {
                return Grounding {
                    plan: first,
                    feasible: false,
                };
            }
            k -= 1;
            choice[k] += 1;
            if choice[k] < candidates[live[k]].len() {
                break;
            }
            choice[k] = 0;
        }
        let p = assign(&plan, &choice);
        if feasible(&p) {
            return Grounding {
                plan: p,
                feasible: true,
            };
        }
    }
    Grounding {
        plan: first,
        feasible: false,
    }
}

pub fn ground(plan: &Plan, state: &SymbolicState, pkg: &ProcessKnowledgeGraph) -> Plan {
    ground_with(
        plan,
        state,
        pkg,
        &BTreeSet::new(),
        &PlannerConfig::default(),
    )
    .plan
}

/// Compile and ground strictly: the first expansion with a feasible grounding.
pub fn replan(
    instr: &Instruction,
    pkg: &ProcessKnowledgeGraph,
    state: &SymbolicState,
) -> Result<Plan, PlanError> {
    let cfg = PlannerConfig::default();
    replan_from(&expansions(instr, pkg, &cfg)?, instr, pkg, state, &cfg)
}

fn replan_from(
    plans: &[Plan],
    instr: &Instruction,
    pkg: &ProcessKnowledgeGraph,
    state: &SymbolicState,
    cfg: &PlannerConfig,
) -> Result<Plan, PlanError> {
    plans
        .iter()
        .map(|p| ground_with(p, state, pkg, &BTreeSet::new(), cfg))
        .find(|g| g.feasible)
        .map(|g| g.plan)
        .ok_or_else(|| PlanError::Unsatisfiable(instr.task_class.clone()))
}

/// Planner with a compile cache keyed by (instruction digest, PKG version).
#[derive(Debug, Default)]
pub struct Planner {
    pub cfg: PlannerConfig,
    cache: HashMap<(String, u64), Vec<Plan>>,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl Planner {
    pub fn new(cfg: PlannerConfig) -> Self {
        Self {
            cfg,
            ..Self::default()
        }
    }

    fn plans(
        &mut self,
        instr: &Instruction,
        pkg: &ProcessKnowledgeGraph,
    ) -> Result<Vec<Plan>, PlanError> {
        let key = (instr.digest(), pkg.version);
        if let Some(p) = self.cache.get(&key) {
            self.cache_hits += 1;
            let mut p = p.clone();
            for plan in &mut p {
                plan.instruction_id = instr.id.clone();
            }
            return Ok(p);
        }
        self.cache_misses += 1;
        let p = expansions(instr, pkg, &self.cfg)?;
        self.cache.insert(key, p.clone());
        Ok(p)
    }

    pub fn compile(
        &mut self,
        instr: &Instruction,
        pkg: &ProcessKnowledgeGraph,
    ) -> Result<Plan, PlanError> {
        Ok(self.plans(instr, pkg)?.remove(0))
    }

    /// Lenient compile+ground: falls back to the preferred expansion when no
    /// expansion grounds feasibly, leaving failures to execution.
    pub fn plan(
        &mut self,
        instr: &Instruction,
        pkg: &ProcessKnowledgeGraph,
        state: &SymbolicState,
        avoid: &BTreeSet<String>,
    ) -> Result<Plan, PlanError> {
        let plans = self.plans(instr, pkg)?;
        let mut first = None;
        for p in &plans {
            let g = ground_with(p, state, pkg, avoid, &self.cfg);
            if g.feasible {
                return Ok(g.plan);
            }
            first.get_or_insert(g.plan);
        }
        Ok(first.expect("expansions is nonempty"))
    }

    pub fn replan(
        &mut self,
        instr: &Instruction,
        pkg: &ProcessKnowledgeGraph,
        state: &SymbolicState,
    ) -> Result<Plan, PlanError> {
        let plans = self.plans(instr, pkg)?;
        replan_from(&plans, instr, pkg, state, &self.cfg)
    }
}
