use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{AgentConfig, Baseline, ProposerKind};
use super::HarnessError;
use crate::controller::{
    arbitrate, compute_features, reflect, uncertainty, violation_prob, ControllerConfig,
    FeatureContext, Pathway, ReflectRecord,
};
use crate::envsim::{Environment, Scenario, ScenarioSandbox, TaskContext};
use crate::fdka::{
    localize, propose, replay_case, score, AttemptStats, EdcrDecision, ExperiencePool, FdkaError,
    MockProposer, Proposer, ProposerResponse, RemoteProposer, ReplayCase, ScoreBreakdown,
};
use crate::governance::{
    canary, causal_veto, effective_tau_conf, hitl_gate, value_veto, CanaryReport, GateTag,
    HumanPolicy, Ledger, Provenance, StageOutcome,
};
use crate::knowledge::{
    edit_key, CausalGraph, ErrorRecord, FailureTrace, GroundStep, Patch, ProcessKnowledgeGraph,
    SymbolicState,
};
use crate::planner::{Instruction, Plan, Planner};
use crate::verifier::{RepairContext, Verdict, Verifier};

const RECENT_WINDOW: usize = 10;
/// Seeded traces live outside the scenario's task index range.
pub const SEED_TASK_BASE: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub operator: String,
    pub class: String,
    /// `Operator:CLASS`.
    pub key: String,
    pub call: String,
    pub retriable: bool,
    /// Set on the failure that ended a failed task.
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdkaDecision {
    EdcrFiltered,
    NoCandidate,
    NoProposal,
    BelowTheta,
    ValueVeto,
    Escalated,
    Queued,
    Denied,
    Deferred,
    CanaryFailed,
    Committed,
    /// A reverse override whose rollback already restored the proposed state.
    Reverted,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdkaRecord {
    pub task: usize,
    pub class_key: String,
    pub edcr: Option<EdcrDecision>,
    pub localized: Option<String>,
    pub patch: Option<Patch>,
    pub edit_key: Option<String>,
    pub score: Option<ScoreBreakdown>,
    pub theta: Option<f64>,
    pub iota: Option<f64>,
    pub eta: Option<f64>,
    pub reasons: Vec<String>,
    pub stage: Option<StageOutcome>,
    pub canary: Option<CanaryReport>,
    pub entry_id: Option<u64>,
    pub rho: Option<f64>,
    pub decision: FdkaDecision,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathwayCounts {
    pub s1: u32,
    pub s2: u32,
    pub verify: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub index: usize,
    pub id: String,
    pub task_class: String,
    pub holdout: bool,
    pub success: bool,
    pub terminal_reason: Option<String>,
    pub pathways: PathwayCounts,
    pub steps_executed: u32,
    pub failures: Vec<FailureEvent>,
    pub fdka: Vec<FdkaRecord>,
    pub proposed: u32,
    pub escalated: u32,
    pub queued: u32,
    pub committed: u32,
    /// Class keys repaired by commits made during this task.
    pub committed_classes: Vec<String>,
    pub edit_types: Vec<String>,
    pub rollbacks: u32,
    pub budget_spent: f64,
}

/// Ordered pipeline events, used for golden-trace regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EngineEvent {
    Localized {
        task: usize,
        operator: String,
        r: f64,
    },
    Proposed {
        task: usize,
        patch: Patch,
    },
    Scored {
        task: usize,
        score: ScoreBreakdown,
        k: usize,
    },
    Guardrails {
        task: usize,
        iota: f64,
        eta: f64,
        value_veto: bool,
        causal_veto: bool,
    },
    Canary {
        task: usize,
        report: CanaryReport,
    },
    Committed {
        task: usize,
        entry: Option<u64>,
        rho: f64,
    },
    Replanned {
        task: usize,
        feasible: bool,
    },
    Trust {
        task: usize,
        entry: u64,
        rho: f64,
        flag_rollback: bool,
    },
    RolledBack {
        task: usize,
        entry: u64,
    },
}

/// Agent state carried across the tasks of one run.
pub struct Engine<'s> {
    pub cfg: AgentConfig,
    pub scenario: &'s Scenario,
    env: Environment<'s>,
    sandbox: ScenarioSandbox<'s>,
    pub pkg: ProcessKnowledgeGraph,
    pub planner: Planner,
    pub verifier: Verifier,
    pub pool: ExperiencePool,
    pub ledger: Ledger,
    proposer: Box<dyn Proposer>,
    repair_ctx: RepairContext,
    causal: CausalGraph,
    controller: ControllerConfig,
    executed_ops: BTreeSet<String>,
    recent: VecDeque<bool>,
    reflect_records: Vec<ReflectRecord>,
    memory: VecDeque<String>,
    /// Entry id to the execution sequence number of its commit, this task.
    commit_points: BTreeMap<u64, usize>,
    pub events: Vec<EngineEvent>,
}

struct Signals {
    u: f64,
    p_viol: f64,
}

fn proposer_for(kind: &ProposerKind, scenario: &Scenario) -> Box<dyn Proposer> {
    match kind {
        ProposerKind::Mock => Box::new(MockProposer {
            rules: scenario.domain.proposer_rules.clone(),
        }),
        ProposerKind::Remote {
            endpoint,
            model,
            api_key_env,
        } => {
            let mut r = RemoteProposer::new(endpoint, model);
            r.api_key = api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
            Box::new(r)
        }
    }
}

fn step_adds(
    pkg: &ProcessKnowledgeGraph,
    g: &GroundStep,
) -> Option<Vec<crate::knowledge::Predicate>> {
    let op = pkg.operators.get(&g.operator)?;
    let b = op.bind(&g.args).ok()?;
    Some(
        op.ground_eff(&b)
            .into_iter()
            .filter(|p| !p.negated)
            .collect(),
    )
}

/// Drops leading steps whose work is already done in `state`.
fn skip_done_prefix(mut plan: Plan, state: &SymbolicState, pkg: &ProcessKnowledgeGraph) -> Plan {
    let goal_names: BTreeSet<&str> = plan.goal.iter().map(|g| g.name.as_str()).collect();
    let mut skip = 0;
    for s in &plan.steps {
        let Some(g) = s.to_ground() else { break };
        let Some(adds) = step_adds(pkg, &g) else {
            break;
        };
        let holds = |ps: &[&crate::knowledge::Predicate]| {
            ps.iter().all(|p| state.holds(p).unwrap_or(false))
        };
        let all: Vec<_> = adds.iter().collect();
        let rel: Vec<_> = adds
            .iter()
            .filter(|p| goal_names.contains(p.name.as_str()))
            .collect();
        if (!all.is_empty() && holds(&all)) || (!rel.is_empty() && holds(&rel)) {
            skip += 1;
        } else {
            break;
        }
    }
    plan.steps.drain(..skip);
    plan
}

impl<'s> Engine<'s> {
    pub fn new(scenario: &'s Scenario, cfg: AgentConfig, seed: u64) -> Result<Self, HarnessError> {
        Self::build(scenario, cfg, seed, None)
    }

    /// Same as [`Engine::new`] but persists the ledger to a JSONL file.
    pub fn with_ledger_file(
        scenario: &'s Scenario,
        cfg: AgentConfig,
        seed: u64,
        path: &Path,
    ) -> Result<Self, HarnessError> {
        Self::build(scenario, cfg, seed, Some(path))
    }

    fn build(
        scenario: &'s Scenario,
        cfg: AgentConfig,
        seed: u64,
        ledger: Option<&Path>,
    ) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut pkg = scenario.domain.pkg()?;
        let ledger = match ledger {
            Some(p) => Ledger::open(p, cfg.governance.clone(), &mut pkg)?,
            None => Ledger::new(cfg.governance.clone()),
        };
        let mut causal = scenario.domain.causal_graph.clone();
        causal.normalize()?;
        let mut pool = ExperiencePool::default();
        for s in &scenario.experience_seed.stats {
            pool.seed_stats(
                &s.operator,
                &s.class,
                AttemptStats {
                    attempts: s.attempts,
                    failures: s.failures,
                },
            );
        }
        for (i, t) in scenario.experience_seed.traces.iter().enumerate() {
            let inj = &scenario.failure_schedule[t.injection];
            let state = scenario.case_state(&t.edit)?;
            let op = pkg.operator(&t.call.operator)?.clone();
            let mut evidence = BTreeMap::from([
                ("operator".to_string(), t.call.operator.clone()),
                ("call".to_string(), t.call.to_string()),
            ]);
            evidence.extend(inj.evidence.clone());
            pool.add_trace(FailureTrace {
                task_index: SEED_TASK_BASE + i,
                states: vec![state.clone()],
                actions: vec![t.call.clone()],
                failed_operator: op,
                state_at_failure: state,
                error: ErrorRecord {
                    class: inj.class.clone(),
                    message: inj.message.clone(),
                    evidence,
                    category: Some(inj.category),
                    retriable: false,
                },
                tool_log: vec![format!("{} -> ERR {}: {}", t.call, inj.class, inj.message)],
            });
        }
        Ok(Self {
            proposer: proposer_for(&cfg.proposer, scenario),
            planner: Planner::new(cfg.planner),
            controller: cfg.controller.clone(),
            cfg,
            env: Environment::new(scenario, seed),
            sandbox: ScenarioSandbox::new(scenario),
            scenario,
            pkg,
            verifier: Verifier::default(),
            pool,
            ledger,
            repair_ctx: RepairContext::default(),
            causal,
            executed_ops: BTreeSet::new(),
            recent: VecDeque::new(),
            reflect_records: Vec::new(),
            memory: VecDeque::new(),
            commit_points: BTreeMap::new(),
            events: Vec::new(),
        })
    }

    /// Replaces the proposer, e.g. with a scripted test double.
    pub fn set_proposer(&mut self, p: Box<dyn Proposer>) {
        self.proposer = p;
    }

    pub fn controller(&self) -> &ControllerConfig {
        &self.controller
    }

    pub fn environment(&self) -> &Environment<'s> {
        &self.env
    }

    fn signals(&self, plan: &Plan, state: &SymbolicState, budget: f64) -> Signals {
        let recent: Vec<bool> = self.recent.iter().copied().collect();
        let tool_failure_rate = plan
            .steps
            .first()
            .map(|s| {
                let (a, f) = self.pool.op_totals(&s.operator);
                if a == 0 {
                    0.0
                } else {
                    f as f64 / a as f64
                }
            })
            .unwrap_or(0.0);
        let features = compute_features(&FeatureContext {
            plan,
            state,
            pkg: &self.pkg,
            invariants: &self.scenario.domain.invariants,
            value_rules: &self.scenario.domain.value_rules,
            executed_ops: &self.executed_ops,
            recent_failures: &recent,
            tool_failure_rate,
            budget_used_fraction: (1.0 - budget / self.controller.budget).clamp(0.0, 1.0),
            lookahead: self.controller.lookahead,
            max_steps: self.cfg.planner.max_steps,
        });
        Signals {
            u: uncertainty(plan),
            p_viol: violation_prob(&features, &self.controller),
        }
    }

    fn choose(&self, sig: &Signals, budget: f64) -> Pathway {
        let c = &self.controller;
        let f = &self.cfg.flags;
        let p = if f.arbitration {
            arbitrate(sig.u, sig.p_viol, budget, c)
        } else if f.verify && budget >= c.c_verify {
            Pathway::Verify
        } else {
            Pathway::S1
        };
        if p == Pathway::Verify && !f.verify {
            if f.arbitration && sig.u > c.tau_u && budget >= c.c_s2 {
                Pathway::S2
            } else {
                Pathway::S1
            }
        } else {
            p
        }
    }

    fn memory_avoid(&self) -> BTreeSet<String> {
        if self.cfg.baseline == Baseline::ReflectMemory {
            self.memory.iter().cloned().collect()
        } else {
            BTreeSet::new()
        }
    }

    fn remember(&mut self, step: &GroundStep) {
        if self.cfg.baseline != Baseline::ReflectMemory {
            return;
        }
        for (i, a) in step.args.iter().enumerate() {
            if step.is_chosen(i) && !self.memory.contains(a) {
                self.memory.push_back(a.clone());
                while self.memory.len() > self.cfg.memory {
                    self.memory.pop_front();
                }
            }
        }
    }

    fn replan_after(
        &mut self,
        instr: &Instruction,
        state: &SymbolicState,
        task: usize,
        avoid: &BTreeSet<String>,
    ) -> Option<Plan> {
        match self.planner.replan(instr, &self.pkg, state) {
            Ok(p) => {
                self.events.push(EngineEvent::Replanned {
                    task,
                    feasible: true,
                });
                Some(skip_done_prefix(p, state, &self.pkg))
            }
            Err(_) => {
                self.events.push(EngineEvent::Replanned {
                    task,
                    feasible: false,
                });
                self.planner
                    .plan(instr, &self.pkg, state, avoid)
                    .ok()
                    .map(|p| skip_done_prefix(p, state, &self.pkg))
            }
        }
    }

    /// One task under the main control loop.
    pub fn run_task(&mut self, index: usize) -> Result<TaskRecord, HarnessError> {
        let budget = self.controller.budget;
        self.run_task_with_budget(index, budget)
    }

    pub fn run_task_with_budget(
        &mut self,
        index: usize,
        budget0: f64,
    ) -> Result<TaskRecord, HarnessError> {
        let spec = &self.scenario.tasks[index];
        let instr = spec.instruction();
        let mut rec = TaskRecord {
            index,
            id: spec.id.clone(),
            task_class: spec.task_class.clone(),
            holdout: spec.holdout,
            success: false,
            terminal_reason: None,
            pathways: PathwayCounts::default(),
            steps_executed: 0,
            failures: Vec::new(),
            fdka: Vec::new(),
            proposed: 0,
            escalated: 0,
            queued: 0,
            committed: 0,
            committed_classes: Vec::new(),
            edit_types: Vec::new(),
            rollbacks: 0,
            budget_spent: 0.0,
        };
        let mut state = self.env.task_state(index)?;
        let mut ctx: TaskContext = self.env.task_context(index);
        let mut avoid = self.memory_avoid();
        let mut plan = match self.planner.plan(&instr, &self.pkg, &state, &avoid) {
            Ok(p) => p,
            Err(e) => {
                rec.terminal_reason = Some(format!("planning: {e}"));
                self.finish_task(false, None, false, false);
                return Ok(rec);
            }
        };
        let mut goal = plan.goal.clone();
        let mut budget = budget0;
        let mut trace_states = vec![state.clone()];
        let mut trace_actions: Vec<GroundStep> = Vec::new();
        let mut tool_log: Vec<String> = Vec::new();
        let mut runs: Vec<(String, bool, usize)> = Vec::new();
        let mut seq = 0usize;
        let mut fdka_calls = 0;
        let mut fdka_elapsed = 0.0;
        let mut retries_left = self.cfg.retry_limit;
        let mut first_sig: Option<(f64, f64)> = None;
        let (mut used_s1, mut used_s2) = (false, false);
        let mut repaired: BTreeSet<GroundStep> = BTreeSet::new();

        for _ in 0..self.cfg.max_iterations {
            if plan.is_empty() {
                break;
            }
            if budget < self.controller.c_s1 {
                rec.terminal_reason = Some("budget exhausted".into());
                break;
            }
            let sig = self.signals(&plan, &state, budget);
            first_sig.get_or_insert((sig.u, sig.p_viol));
            match self.choose(&sig, budget) {
                Pathway::Verify => {
                    rec.pathways.verify += 1;
                    budget -= self.controller.c_verify;
                    let h = self.cfg.verify_horizon;
                    match self
                        .verifier
                        .verify(&plan, &state, h, &self.pkg, &self.repair_ctx)
                    {
                        Verdict::Allow => {}
                        Verdict::Repair { delta, .. } => {
                            for s in &delta.swaps {
                                if let Some(from) =
                                    plan.steps.get(s.index).and_then(|p| p.to_ground())
                                {
                                    self.pool.add_repair(crate::fdka::RepairEvent {
                                        from,
                                        to: s.step.clone(),
                                    });
                                }
                                repaired.insert(s.step.clone());
                            }
                            delta.apply(&mut plan);
                        }
                        Verdict::Block { .. } => {
                            if let Ok(p) = self.planner.replan(&instr, &self.pkg, &state) {
                                goal = p.goal.clone();
                                plan = skip_done_prefix(p, &state, &self.pkg);
                            }
                        }
                    }
                }
                Pathway::S2 => {
                    rec.pathways.s2 += 1;
                    used_s2 = true;
                    budget -= self.controller.c_s2;
                    if let Ok(p) = self.planner.replan(&instr, &self.pkg, &state) {
                        goal = p.goal.clone();
                        plan = skip_done_prefix(p, &state, &self.pkg);
                    }
                }
                Pathway::S1 => {
                    rec.pathways.s1 += 1;
                    used_s1 = true;
                }
            }
            if plan.is_empty() {
                break;
            }
            if budget < self.controller.c_s1 {
                rec.terminal_reason = Some("budget exhausted".into());
                break;
            }
            budget -= self.controller.c_s1;
            let Some(head) = plan.steps[0].to_ground() else {
                rec.terminal_reason = Some(format!("step {} has unbound arguments", plan.steps[0]));
                break;
            };
            let mut res = self.env.execute(&head, &state, &self.pkg, &mut ctx);
            rec.steps_executed += 1;
            if let Some(err) = res.error.as_ref().filter(|e| e.retriable) {
                rec.failures.push(failure_event(&head, err));
                self.pool.record_attempt(&head.operator, Some(&err.class));
                tool_log.push(res.log.clone());
                res = self.env.execute(&head, &state, &self.pkg, &mut ctx);
                rec.steps_executed += 1;
            }
            self.pool
                .record_attempt(&head.operator, res.error.as_ref().map(|e| e.class.as_str()));
            self.executed_ops.insert(head.operator.clone());
            self.recent.push_back(!res.is_success());
            while self.recent.len() > RECENT_WINDOW {
                self.recent.pop_front();
            }
            tool_log.push(res.log.clone());
            trace_actions.push(head.clone());
            seq += 1;
            runs.push((head.operator.clone(), res.is_success(), seq));
            if res.is_success() {
                state = res.new_state;
                trace_states.push(state.clone());
                plan.steps.remove(0);
                if repaired.contains(&head) {
                    self.repair_ctx.micro_patches.insert(head);
                }
                continue;
            }
            let err = res.error.expect("failed result carries an error");
            rec.failures.push(failure_event(&head, &err));
            self.remember(&head);
            if self.cfg.flags.fdka && fdka_calls < self.cfg.max_fdka_per_task {
                fdka_calls += 1;
                fdka_elapsed += self.cfg.fdka_cost;
                let trace = FailureTrace {
                    task_index: index,
                    states: trace_states.clone(),
                    actions: trace_actions.clone(),
                    failed_operator: self.pkg.operator(&head.operator)?.clone(),
                    state_at_failure: state.clone(),
                    error: err,
                    tool_log: tool_log.clone(),
                };
                let committed = self.run_fdka(trace, index, fdka_elapsed, &mut rec)?;
                if committed.is_some() {
                    if let Some(id) = rec.fdka.last().and_then(|f| f.entry_id) {
                        self.commit_points.insert(id, seq);
                    }
                    match self.replan_after(&instr, &state, index, &avoid) {
                        Some(p) => {
                            goal = p.goal.clone();
                            plan = p;
                        }
                        None => {
                            rec.terminal_reason = Some("replanning failed".into());
                            break;
                        }
                    }
                    continue;
                }
                rec.terminal_reason = Some("no repair committed".into());
                break;
            } else if self.cfg.retries() && retries_left > 0 {
                retries_left -= 1;
                for (i, a) in head.args.iter().enumerate() {
                    if head.is_chosen(i) {
                        avoid.insert(a.clone());
                    }
                }
                match self.planner.plan(&instr, &self.pkg, &state, &avoid) {
                    Ok(p) => {
                        goal = p.goal.clone();
                        plan = skip_done_prefix(p, &state, &self.pkg);
                    }
                    Err(e) => {
                        rec.terminal_reason = Some(format!("planning: {e}"));
                        break;
                    }
                }
                continue;
            } else {
                rec.terminal_reason = Some(format!("execution failed: {}", err.class));
                break;
            }
        }
        let goal_met = state.entails(&goal).unwrap_or(false);
        let success = rec.terminal_reason.is_none() && plan.is_empty() && goal_met;
        if !success && rec.terminal_reason.is_none() {
            rec.terminal_reason = Some(if plan.is_empty() {
                "goal not reached".into()
            } else {
                "iteration limit".into()
            });
        }
        rec.budget_spent = budget0 - budget;
        self.finish_task(success, first_sig, used_s1, used_s2);
        rec.success = success;
        if !success {
            if let Some(f) = rec.failures.last_mut() {
                f.terminal = true;
            }
        }
        self.post_task_trust(index, &runs, &mut rec)?;
        Ok(rec)
    }

    fn finish_task(
        &mut self,
        success: bool,
        first_sig: Option<(f64, f64)>,
        used_s1: bool,
        used_s2: bool,
    ) {
        if !self.cfg.flags.arbitration {
            return;
        }
        let (u, p_viol) = first_sig.unwrap_or((0.0, 0.0));
        self.reflect_records.push(ReflectRecord {
            u,
            p_viol,
            success,
            used_s1,
            used_s2,
        });
        let (tu, tp) = reflect(&self.reflect_records, &self.controller);
        self.controller.tau_u = tu;
        self.controller.tau_p = tp;
    }

    /// Trust outcomes for committed patches whose operator ran after commit.
    fn post_task_trust(
        &mut self,
        task: usize,
        runs: &[(String, bool, usize)],
        rec: &mut TaskRecord,
    ) -> Result<(), HarnessError> {
        if !self.cfg.flags.ledger {
            return Ok(());
        }
        let committed: Vec<(u64, String, String, Option<u64>)> = self
            .ledger
            .committed()
            .map(|e| {
                (
                    e.id,
                    e.patch.scope.clone(),
                    e.edit_key.clone(),
                    e.committed_at,
                )
            })
            .collect();
        let commit_points = self.commit_points.clone();
        for (id, scope, key, committed_at) in committed {
            let after = if committed_at == Some(task as u64) {
                commit_points.get(&id).copied().unwrap_or(0)
            } else {
                0
            };
            let mine: Vec<bool> = runs
                .iter()
                .filter(|(op, _, s)| *op == scope && *s > after)
                .map(|(_, ok, _)| *ok)
                .collect();
            if mine.is_empty() {
                continue;
            }
            let ok = mine.iter().all(|b| *b);
            let r = self.ledger.trust_update(id, ok, &mut self.pkg)?;
            self.events.push(EngineEvent::Trust {
                task,
                entry: id,
                rho: r.rho,
                flag_rollback: r.flag_rollback,
            });
            if r.flag_rollback && self.cfg.flags.rollback {
                self.ledger.rollback(
                    &key,
                    "trust below rollback threshold",
                    task as u64,
                    &mut self.pkg,
                )?;
                self.events
                    .push(EngineEvent::RolledBack { task, entry: id });
                rec.rollbacks += 1;
            }
        }
        let keys: Vec<(u64, String)> = self
            .ledger
            .committed()
            .map(|e| (e.id, e.edit_key.clone()))
            .collect();
        for (id, key) in keys {
            if self.ledger.consolidate(&key, &mut self.pkg)? && self.ledger.entry(id).is_some() {
                self.ledger.commit(id, task as u64, &mut self.pkg)?;
            }
        }
        self.repair_ctx.trust = self
            .ledger
            .committed()
            .map(|e| (e.patch.scope.clone(), e.rho()))
            .collect();
        self.commit_points.clear();
        Ok(())
    }
}

fn failure_event(step: &GroundStep, err: &ErrorRecord) -> FailureEvent {
    FailureEvent {
        operator: step.operator.clone(),
        class: err.class.clone(),
        key: format!("{}:{}", step.operator, err.class),
        call: step.to_string(),
        retriable: err.retriable,
        terminal: false,
    }
}

impl Engine<'_> {
    fn provenance(&self, patch: &Patch, trace: &FailureTrace, task: usize) -> Provenance {
        Provenance {
            source: format!("fdka:{}", self.proposer.name()),
            inputs: format!(
                "{} @ {}",
                trace.failed_step(),
                trace.state_at_failure.digest()
            ),
            context: format!("task {} ({})", task, self.scenario.tasks[task].id),
            rationale: if patch.rationale.is_empty() {
                format!("repair {}", trace.class_key())
            } else {
                patch.rationale.clone()
            },
            timestamp: self.ledger.events().len() as u64,
            trace_ref: format!("{}#{}", trace.class_key(), task),
        }
    }

    fn proposal(
        &self,
        trace: &FailureTrace,
        target: &crate::knowledge::Operator,
    ) -> Result<Option<(Patch, ProposerResponse)>, FdkaError> {
        let exemplars: Vec<String> = self
            .ledger
            .committed()
            .filter(|e| e.patch.scope == target.name)
            .map(|e| serde_json::to_string(&e.patch).expect("patch serializes"))
            .collect();
        match propose(trace, target, self.proposer.as_ref(), &exemplars) {
            Err(e) if e.is_retriable() => {
                propose(trace, target, self.proposer.as_ref(), &exemplars)
            }
            r => r,
        }
    }

    /// Queues an escalation unless the same edit is already awaiting review.
    fn escalate(
        &mut self,
        patch: &Patch,
        prov: &Provenance,
        reason: &str,
        class: &str,
        task: usize,
        fr: &mut FdkaRecord,
    ) -> Result<(), HarnessError> {
        let key = edit_key(patch);
        if self.ledger.review_list().iter().any(|e| e.edit_key == key) {
            fr.reasons.push("already pending review".into());
            return Ok(());
        }
        let cases = self.canary_cases(patch, class)?;
        self.ledger.queue(
            patch,
            prov.clone(),
            reason,
            true,
            cases,
            task as u64,
            &mut self.pkg,
        )?;
        Ok(())
    }

    /// Resolves a review item under the configured human policy; returns the
    /// staged entry id on approval.
    fn human(
        &mut self,
        key: &str,
        task: usize,
        fr: &mut FdkaRecord,
    ) -> Result<Option<u64>, HarnessError> {
        match self.cfg.governance.human {
            HumanPolicy::AutoDeny => {
                self.ledger
                    .deny(key, "no reviewer attached", &mut self.pkg)?;
                fr.reasons.push("denied by policy".into());
                Ok(None)
            }
            HumanPolicy::Defer => Ok(None),
            HumanPolicy::AutoApprove => Ok(Some(self.ledger.approve(
                key,
                task as u64,
                &mut self.pkg,
            )?)),
        }
    }

    fn canary_cases(&self, patch: &Patch, class: &str) -> Result<Vec<ReplayCase>, HarnessError> {
        let n = self.cfg.governance.n_canary;
        if let Some(cases) = self
            .scenario
            .canary_suite
            .get(&patch.scope)
            .filter(|c| !c.is_empty())
        {
            return cases
                .iter()
                .take(n)
                .map(|c| {
                    Ok(ReplayCase {
                        task_index: usize::MAX,
                        state: self.scenario.case_state(&c.edit)?,
                        call: c.call.clone(),
                    })
                })
                .collect();
        }
        Ok(self
            .pool
            .retrieve(class, &patch.scope, n)
            .into_iter()
            .map(replay_case)
            .collect())
    }

    /// Trace to committed patch. `Ok(None)` is every early exit.
    pub fn run_fdka(
        &mut self,
        trace: FailureTrace,
        task: usize,
        fdka_elapsed: f64,
        rec: &mut TaskRecord,
    ) -> Result<Option<Patch>, HarnessError> {
        let mut fr = FdkaRecord {
            task,
            class_key: trace.class_key(),
            edcr: None,
            localized: None,
            patch: None,
            edit_key: None,
            score: None,
            theta: None,
            iota: None,
            eta: None,
            reasons: Vec::new(),
            stage: None,
            canary: None,
            entry_id: None,
            rho: None,
            decision: FdkaDecision::Error,
        };
        let out = self.fdka_steps(&trace, task, fdka_elapsed, rec, &mut fr);
        rec.fdka.push(fr);
        out
    }

    fn fdka_steps(
        &mut self,
        trace: &FailureTrace,
        task: usize,
        fdka_elapsed: f64,
        rec: &mut TaskRecord,
        fr: &mut FdkaRecord,
    ) -> Result<Option<Patch>, HarnessError> {
        let class = trace.error.class.clone();
        self.pool.add_trace(trace.clone());
        let fcfg = self.cfg.fdka.clone();
        let ed = self
            .pool
            .edcr(&trace.failed_operator.name, &class, fcfg.p_alpha);
        fr.edcr = Some(ed);
        if !ed.pass {
            fr.decision = FdkaDecision::EdcrFiltered;
            return Ok(None);
        }
        let (target, scores) = match localize(trace, &self.pkg) {
            Ok(x) => x,
            Err(e) => {
                fr.reasons.push(e.to_string());
                fr.decision = FdkaDecision::NoCandidate;
                return Ok(None);
            }
        };
        self.events.push(EngineEvent::Localized {
            task,
            operator: target.clone(),
            r: scores[0].r,
        });
        fr.localized = Some(target.clone());
        let target_op = self.pkg.operator(&target)?.clone();
        let (patch, resp) = match self.proposal(trace, &target_op) {
            Ok(Some(x)) => x,
            Ok(None) => {
                fr.decision = FdkaDecision::NoProposal;
                return Ok(None);
            }
            Err(e) => {
                fr.reasons.push(e.to_string());
                fr.decision = FdkaDecision::NoProposal;
                return Ok(None);
            }
        };
        rec.proposed += 1;
        let key = edit_key(&patch);
        fr.patch = Some(patch.clone());
        fr.edit_key = Some(key.clone());
        self.events.push(EngineEvent::Proposed {
            task,
            patch: patch.clone(),
        });
        let bd = match score(
            &patch,
            trace,
            Some(&resp),
            &self.pkg,
            &self.pool,
            &self.scenario.domain.value_rules,
            &self.scenario.domain.invariants,
            &self.sandbox,
            fdka_elapsed,
            &fcfg,
        ) {
            Ok(b) => b,
            Err(e) => {
                fr.reasons.push(e.to_string());
                fr.decision = FdkaDecision::Error;
                return Ok(None);
            }
        };
        let k = self
            .pool
            .retrieve(&class, &patch.scope, fcfg.k_retrieve)
            .len();
        self.events.push(EngineEvent::Scored { task, score: bd, k });
        fr.score = Some(bd);
        let theta = if bd.cold_start {
            fcfg.theta_cold_start
        } else {
            fcfg.theta
        };
        fr.theta = Some(theta);
        if bd.aggregate < theta {
            fr.reasons
                .push(format!("aggregate {:.4} < theta {theta}", bd.aggregate));
            fr.decision = FdkaDecision::BelowTheta;
            return Ok(None);
        }

        let flags = self.cfg.flags;
        let gcfg = self.cfg.governance.clone();
        let vv = flags
            .guardrails_value
            .then(|| value_veto(&patch, &target_op, &self.scenario.domain.value_rules));
        let cv = flags
            .guardrails_causal
            .then(|| causal_veto(&patch, &self.causal, &gcfg));
        if flags.guardrails_value || flags.guardrails_causal {
            fr.iota = cv.as_ref().map(|c| c.iota);
            fr.eta = cv.as_ref().map(|c| c.eta);
            self.events.push(EngineEvent::Guardrails {
                task,
                iota: cv.as_ref().map_or(0.0, |c| c.iota),
                eta: cv.as_ref().map_or(0.0, |c| c.eta),
                value_veto: vv.as_ref().is_some_and(|v| v.veto),
                causal_veto: cv.as_ref().is_some_and(|c| c.veto),
            });
        }
        if let Some(v) = vv.filter(|v| v.veto) {
            fr.reasons.extend(v.reasons);
            fr.decision = FdkaDecision::ValueVeto;
            return Ok(None);
        }
        let prov = self.provenance(&patch, trace, task);
        let mut staged: Option<u64> = None;
        if let Some(c) = cv.filter(|c| c.veto) {
            rec.escalated += 1;
            fr.reasons.push(format!(
                "causal escalation: iota {:.3}, eta {:.3}",
                c.iota, c.eta
            ));
            fr.decision = FdkaDecision::Escalated;
            if !flags.ledger {
                return Ok(None);
            }
            self.escalate(&patch, &prov, "causal guardrail", &class, task, fr)?;
            match self.human(&key, task, fr)? {
                Some(id) => staged = Some(id),
                None => return Ok(None),
            }
        }

        if flags.ledger && staged.is_none() {
            let (outcome, id) = self.ledger.check_and_stage(
                &patch,
                prov.clone(),
                bd.aggregate,
                task as u64,
                &mut self.pkg,
            )?;
            fr.stage = Some(outcome);
            match (outcome, id) {
                (StageOutcome::ReverseEscalateHuman, _) => {
                    rec.escalated += 1;
                    fr.decision = FdkaDecision::Escalated;
                    self.escalate(&patch, &prov, "reverse conflict", &class, task, fr)?;
                    match self.human(&key, task, fr)? {
                        Some(id) => staged = Some(id),
                        None => return Ok(None),
                    }
                }
                (StageOutcome::ReverseOverridden, None) => {
                    fr.decision = FdkaDecision::Reverted;
                    return Ok(Some(patch));
                }
                (_, Some(id)) => staged = Some(id),
                (_, None) => return Ok(None),
            }
            let id = staged.expect("staged above");
            let since = self.ledger.since_rollback(task as u64);
            let gate = hitl_gate(&bd, effective_tau_conf(&gcfg, since), &gcfg);
            if gate.tag == GateTag::QueueHuman && fr.decision != FdkaDecision::Escalated {
                rec.queued += 1;
                fr.reasons.extend(gate.reasons.clone());
                fr.decision = FdkaDecision::Queued;
                let cases = self.canary_cases(&patch, &class)?;
                self.ledger.withdraw_to_queue(
                    id,
                    &gate.reasons.join("; "),
                    cases,
                    task as u64,
                    &mut self.pkg,
                )?;
                staged = self.human(&key, task, fr)?;
                if staged.is_none() {
                    return Ok(None);
                }
            }
        }
        fr.entry_id = staged;

        if flags.canary {
            let cases = self.canary_cases(&patch, &class)?;
            let mut patched = self.pkg.clone();
            patched.apply(&patch)?;
            let report = canary(&patched, &cases, &self.sandbox, &gcfg);
            self.events.push(EngineEvent::Canary {
                task,
                report: report.clone(),
            });
            let passed = report.passed;
            fr.canary = Some(report);
            if !passed {
                fr.decision = FdkaDecision::CanaryFailed;
                if let Some(id) = staged {
                    self.ledger
                        .discard(id, "canary failed", task as u64, &mut self.pkg)?;
                }
                return Ok(None);
            }
        }

        let rho = match staged {
            Some(id) => self.ledger.commit(id, task as u64, &mut self.pkg)?,
            None => {
                self.pkg.apply(&patch)?;
                gcfg.trust_alpha / (gcfg.trust_alpha + gcfg.trust_beta)
            }
        };
        fr.rho = Some(rho);
        fr.decision = FdkaDecision::Committed;
        self.events.push(EngineEvent::Committed {
            task,
            entry: staged,
            rho,
        });
        rec.committed += 1;
        rec.committed_classes.push(trace.class_key());
        rec.edit_types.push(patch.edit_type.to_string());
        Ok(Some(patch))
    }
}
