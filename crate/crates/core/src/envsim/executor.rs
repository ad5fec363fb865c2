use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{Persistence, Requirement, Scenario};
use super::EnvError;
use crate::fdka::{ReplayCase, ReplayOutcome, Sandbox};
use crate::knowledge::{
    Binding, ErrorRecord, FailureCategory, GroundStep, Operator, ProcessKnowledgeGraph,
    SymbolicState,
};

pub const PRECONDITION_UNMET: &str = "PRECONDITION-UNMET";
pub const BAD_ARGUMENT: &str = "BAD-ARGUMENT";
pub const TRANSIENT_CLASS: &str = "HTTP-503";
const MAX_REBINDINGS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: Status,
    pub new_state: SymbolicState,
    pub error: Option<ErrorRecord>,
    pub log: String,
}

impl ExecutionResult {
    pub fn is_success(&self) -> bool {
        self.status == Status::Success
    }
}

/// Per-task execution context: transient fire counts and the noise stream.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub index: usize,
    pub class: String,
    fired: BTreeMap<usize, u32>,
    rng: ChaCha8Rng,
    pub calls: u64,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Success => "OK",
            Status::Failure => "ERR",
        })
    }
}

pub fn requirement_met(
    req: &Requirement,
    op: &Operator,
    b: &Binding,
    state: &SymbolicState,
) -> bool {
    match req {
        Requirement::None => false,
        Requirement::SchemaField { field } => op.tool_schema.has_field(field),
        Requirement::Precondition { literal } => {
            state.holds(&literal.substitute(b)).unwrap_or(false)
        }
        Requirement::Effect { name } => op.eff.iter().any(|e| !e.negated && &e.name == name),
    }
}

fn task_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64)
            .wrapping_add(1)
            .wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Executor over one scenario and seed. Holds no mutable state; everything
/// task-local lives in [`TaskContext`].
#[derive(Debug, Clone)]
pub struct Environment<'a> {
    pub scenario: &'a Scenario,
    pub seed: u64,
    flip_tasks: BTreeSet<usize>,
}

impl<'a> Environment<'a> {
    pub fn new(scenario: &'a Scenario, seed: u64) -> Self {
        let mut flip_tasks = BTreeSet::new();
        if let Some(pf) = &scenario.noise.policy_flip {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let [a, b] = pf.window;
            let start = a + rng.random_range(0..=(b - a - pf.length));
            flip_tasks.extend(start..start + pf.length);
        }
        Self {
            scenario,
            seed,
            flip_tasks,
        }
    }

    pub fn flip_tasks(&self) -> &BTreeSet<usize> {
        &self.flip_tasks
    }

    pub fn task_state(&self, index: usize) -> Result<SymbolicState, EnvError> {
        let t = &self.scenario.tasks[index];
        let mut s = self.scenario.domain.base_state()?;
        t.edit.apply(&mut s, &t.slots)?;
        if self.flip_tasks.contains(&index) {
            if let Some(pf) = &self.scenario.noise.policy_flip {
                for f in &pf.facts {
                    s.insert(f.fill_slots(&t.slots))?;
                }
            }
        }
        Ok(s)
    }

    pub fn task_context(&self, index: usize) -> TaskContext {
        TaskContext {
            index,
            class: self.scenario.tasks[index].task_class.clone(),
            fired: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(task_seed(self.seed, index)),
            calls: 0,
        }
    }

    fn failure(
        &self,
        step: &GroundStep,
        state: &SymbolicState,
        err: ErrorRecord,
    ) -> ExecutionResult {
        ExecutionResult {
            status: Status::Failure,
            new_state: state.clone(),
            log: format!("{step} -> ERR {}: {}", err.class, err.message),
            error: Some(err),
        }
    }

    /// Runs one grounded call against the live tool model. The agent's
    /// operator definition (from `pkg`) determines preconditions, effects
    /// and the schema sent with the call.
    pub fn execute(
        &self,
        step: &GroundStep,
        state: &SymbolicState,
        pkg: &ProcessKnowledgeGraph,
        ctx: &mut TaskContext,
    ) -> ExecutionResult {
        ctx.calls += 1;
        let mut evidence = BTreeMap::from([
            ("operator".to_string(), step.operator.clone()),
            ("call".to_string(), step.to_string()),
        ]);
        let bad = |msg: String, evidence: BTreeMap<String, String>| ErrorRecord {
            class: BAD_ARGUMENT.into(),
            message: msg,
            evidence,
            category: None,
            retriable: false,
        };
        let Some(op) = pkg.operators.get(&step.operator) else {
            return self.failure(
                step,
                state,
                bad(format!("unknown operator {}", step.operator), evidence),
            );
        };
        let b = match op.bind(&step.args) {
            Ok(b) => b,
            Err(e) => return self.failure(step, state, bad(e.to_string(), evidence)),
        };
        for (p, a) in op.params.iter().zip(&step.args) {
            if state.entities.get(a) != Some(&p.ty) {
                return self.failure(
                    step,
                    state,
                    bad(format!("argument {a} is not a {}", p.ty), evidence),
                );
            }
        }
        let unmet: Vec<String> = op
            .ground_pre(&b)
            .iter()
            .filter(|p| !state.holds(p).unwrap_or(false))
            .map(|p| p.to_string())
            .collect();
        if !unmet.is_empty() {
            evidence.insert("unmet".into(), unmet.join("; "));
            let err = ErrorRecord {
                class: PRECONDITION_UNMET.into(),
                message: format!("precondition unmet: {}", unmet.join(", ")),
                evidence,
                category: None,
                retriable: false,
            };
            return self.failure(step, state, err);
        }
        for (i, inj) in self.scenario.failure_schedule.iter().enumerate() {
            if inj.operator != op.name
                || !inj.tasks.matches(ctx.index, Some(&ctx.class))
                || requirement_met(&inj.requirement, op, &b, state)
            {
                continue;
            }
            if inj.persistence == Persistence::Transient {
                let n = ctx.fired.entry(i).or_insert(0);
                if *n >= inj.times {
                    continue;
                }
                *n += 1;
            }
            let mut ev = evidence.clone();
            ev.extend(inj.evidence.clone());
            let err = ErrorRecord {
                class: inj.class.clone(),
                message: inj.message.clone(),
                evidence: ev,
                category: Some(inj.category),
                retriable: inj.persistence == Persistence::Transient,
            };
            return self.failure(step, state, err);
        }
        let noise = &self.scenario.noise;
        if noise.transient_rate > 0.0
            && (noise.operators.is_empty() || noise.operators.contains(&op.name))
        {
            let u: f64 = ctx.rng.random();
            if u < noise.transient_rate {
                let err = ErrorRecord {
                    class: TRANSIENT_CLASS.into(),
                    message: "service unavailable".into(),
                    evidence,
                    category: Some(FailureCategory::Transient503),
                    retriable: true,
                };
                return self.failure(step, state, err);
            }
        }
        let mut next = state.clone();
        if let Err(e) = next.apply_effects(&op.ground_eff(&b)) {
            return self.failure(step, state, bad(e.to_string(), evidence));
        }
        ExecutionResult {
            status: Status::Success,
            new_state: next,
            error: None,
            log: format!("{step} -> OK"),
        }
    }
}

/// Counterfactual replay against the scenario's persistent requirements.
/// Works on a copy of the case state and never touches live state.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioSandbox<'a> {
    pub scenario: &'a Scenario,
}

impl<'a> ScenarioSandbox<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        Self { scenario }
    }

    fn requirements(&self, op: &str, task_index: usize) -> Vec<&'a Requirement> {
        let class = self.scenario.task_class(task_index);
        self.scenario
            .failure_schedule
            .iter()
            .filter(|i| {
                i.operator == op
                    && i.persistence == Persistence::PersistentUntilPatched
                    && i.tasks.matches(task_index, class)
            })
            .map(|i| &i.requirement)
            .collect()
    }

    fn succeeds(
        &self,
        op: &Operator,
        args: &[String],
        state: &SymbolicState,
        task_index: usize,
    ) -> bool {
        let Ok(b) = op.bind(args) else { return false };
        if !op
            .params
            .iter()
            .zip(args)
            .all(|(p, a)| state.entities.get(a) == Some(&p.ty))
        {
            return false;
        }
        state.entails(&op.ground_pre(&b)).unwrap_or(false)
            && self
                .requirements(&op.name, task_index)
                .iter()
                .all(|r| requirement_met(r, op, &b, state))
    }

    /// Tries every assignment to the open positions; `fixed[i]` pins a value.
    fn any_binding(
        &self,
        op: &Operator,
        fixed: &[Option<String>],
        state: &SymbolicState,
        task_index: usize,
    ) -> bool {
        let domains: Vec<Vec<String>> = op
            .params
            .iter()
            .zip(fixed)
            .map(|(p, f)| match f {
                Some(v) => vec![v.clone()],
                None => state.entities_of_type(&p.ty).map(str::to_string).collect(),
            })
            .collect();
        if domains.iter().any(Vec::is_empty) {
            return false;
        }
        let mut idx = vec![0usize; domains.len()];
        for _ in 0..MAX_REBINDINGS {
            let args: Vec<String> = idx
                .iter()
                .zip(&domains)
                .map(|(&i, d)| d[i].clone())
                .collect();
            if self.succeeds(op, &args, state, task_index) {
                return true;
            }
            let mut k = 0;
            loop {
                if k == idx.len() {
                    return false;
                }
                idx[k] += 1;
                if idx[k] < domains[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
        false
    }
}

impl Sandbox for ScenarioSandbox<'_> {
    fn replay(&self, case: &ReplayCase, pkg: &ProcessKnowledgeGraph) -> ReplayOutcome {
        let call = &case.call;
        let Some(op) = pkg.operators.get(&call.operator) else {
            return ReplayOutcome::Fail;
        };
        let Ok(b) = op.bind(&call.args) else {
            return ReplayOutcome::Fail;
        };
        let state = &case.state;
        if state.entails(&op.ground_pre(&b)).unwrap_or(false) {
            return if self.succeeds(op, &call.args, state, case.task_index) {
                ReplayOutcome::Pass
            } else {
                ReplayOutcome::Fail
            };
        }
        // The patched precondition blocks the historical call: look for a
        // valid rebinding of the grounder's own choices.
        let fixed: Vec<Option<String>> = call
            .args
            .iter()
            .enumerate()
            .map(|(i, a)| (!call.is_chosen(i)).then(|| a.clone()))
            .collect();
        if fixed.iter().any(Option::is_none) && self.any_binding(op, &fixed, state, case.task_index)
        {
            return ReplayOutcome::Pass;
        }
        let adds = op.add_effect_names();
        for alt in pkg.operators.values() {
            if alt.name == op.name || alt.add_effect_names() != adds {
                continue;
            }
            let fixed: Vec<Option<String>> = alt
                .params
                .iter()
                .map(|p| match b.get(&p.name) {
                    Some(v) if op.param_type(&p.name) == Some(p.ty.as_str()) => Some(v.clone()),
                    _ => None,
                })
                .collect();
            if self.any_binding(alt, &fixed, state, case.task_index) {
                return ReplayOutcome::Mitigated;
            }
        }
        ReplayOutcome::Fail
    }
}
