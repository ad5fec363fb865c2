use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::fdka::MockRule;
use crate::knowledge::{
    CausalGraph, FailureCategory, GroundStep, Invariant, Method, Operator, Predicate,
    ProcessKnowledgeGraph, SymbolicState, ValueRule,
};
use crate::planner::Instruction;

/// Ontology, operator library and the value/causal knowledge for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub name: String,
    #[serde(default)]
    pub types: Vec<String>,
    /// Entity name to type.
    pub entities: BTreeMap<String, String>,
    #[serde(default)]
    pub facts: Vec<Predicate>,
    pub operators: Vec<Operator>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub value_rules: Vec<ValueRule>,
    #[serde(default)]
    pub causal_graph: CausalGraph,
    #[serde(default)]
    pub invariants: Vec<Invariant>,
    /// Response table for the deterministic mock proposer.
    #[serde(default)]
    pub proposer_rules: Vec<MockRule>,
}

impl Domain {
    pub fn pkg(&self) -> Result<ProcessKnowledgeGraph, EnvError> {
        Ok(ProcessKnowledgeGraph::new(
            self.operators.clone(),
            self.methods.clone(),
        )?)
    }

    pub fn base_state(&self) -> Result<SymbolicState, EnvError> {
        let mut s = SymbolicState::new();
        for (n, t) in &self.entities {
            s.add_entity(n, t);
        }
        for f in &self.facts {
            s.insert(f.clone())?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSelector {
    All,
    Indices(Vec<usize>),
    /// Half-open `[start, end)`.
    Range([usize; 2]),
    Class(String),
}

impl TaskSelector {
    /// `class` is `None` for cases that do not belong to a scenario task.
    pub fn matches(&self, index: usize, class: Option<&str>) -> bool {
        match self {
            TaskSelector::All => true,
            TaskSelector::Indices(ix) => class.is_some() && ix.contains(&index),
            TaskSelector::Range([a, b]) => class.is_some() && (*a..*b).contains(&index),
            TaskSelector::Class(c) => class == Some(c.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persistence {
    Transient,
    PersistentUntilPatched,
}

/// What the live tool actually needs. A persistent injection keeps firing
/// until the agent's operator model satisfies it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Requirement {
    /// Never satisfiable by an edit.
    None,
    /// The call must carry this tool-schema field.
    SchemaField { field: String },
    /// Literal over the operator's parameters that must hold in the state.
    Precondition { literal: Predicate },
    /// The operator must declare an effect with this predicate name.
    Effect { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub operator: String,
    pub category: FailureCategory,
    /// Error class reported by the tool, e.g. `ToolError:API-V2`.
    pub class: String,
    pub persistence: Persistence,
    pub tasks: TaskSelector,
    pub requirement: Requirement,
    pub message: String,
    #[serde(default)]
    pub evidence: BTreeMap<String, String>,
    /// Transient injections fire this many times per task.
    #[serde(default = "one")]
    pub times: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StateEdit {
    #[serde(default)]
    pub entities_add: BTreeMap<String, String>,
    #[serde(default)]
    pub entities_remove: Vec<String>,
    #[serde(default)]
    pub facts_add: Vec<Predicate>,
    #[serde(default)]
    pub facts_remove: Vec<Predicate>,
}

impl StateEdit {
    pub fn apply(
        &self,
        state: &mut SymbolicState,
        slots: &BTreeMap<String, String>,
    ) -> Result<(), EnvError> {
        for (n, t) in &self.entities_add {
            state.add_entity(n, t);
        }
        for n in &self.entities_remove {
            state.entities.remove(n);
            state
                .facts
                .retain(|f| !f.args.iter().any(|a| a.name() == n));
        }
        for f in &self.facts_remove {
            state.facts.remove(&f.fill_slots(slots).atom());
        }
        for f in &self.facts_add {
            state.insert(f.fill_slots(slots))?;
        }
        Ok(())
    }

    fn is_empty(&self) -> bool {
        self.entities_add.is_empty()
            && self.entities_remove.is_empty()
            && self.facts_add.is_empty()
            && self.facts_remove.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub task_class: String,
    #[serde(default)]
    pub slots: BTreeMap<String, String>,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub holdout: bool,
    #[serde(default, flatten)]
    pub edit: StateEdit,
}

impl TaskSpec {
    pub fn instruction(&self) -> Instruction {
        Instruction {
            id: self.id.clone(),
            task_class: self.task_class.clone(),
            slots: self.slots.clone(),
            text: self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFlip {
    /// Half-open task range the flip is placed in.
    pub window: [usize; 2],
    pub length: usize,
    /// Facts added to each affected task; `$slot` reads the task's slots.
    pub facts: Vec<Predicate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Noise {
    #[serde(default)]
    pub transient_rate: f64,
    /// Operators exposed to transient noise; empty means all.
    #[serde(default)]
    pub operators: Vec<String>,
    #[serde(default)]
    pub policy_flip: Option<PolicyFlip>,
}

/// Sandbox case replayed by the canary stage for a given operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryCase {
    pub call: GroundStep,
    #[serde(default, flatten)]
    pub edit: StateEdit,
}

/// Historical failure carried into the pool before the run starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTrace {
    /// Index into the failure schedule describing the error.
    pub injection: usize,
    pub call: GroundStep,
    #[serde(default, flatten)]
    pub edit: StateEdit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedStats {
    pub operator: String,
    pub class: String,
    pub attempts: u64,
    pub failures: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperienceSeed {
    #[serde(default)]
    pub stats: Vec<SeedStats>,
    #[serde(default)]
    pub traces: Vec<SeedTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditExpect {
    Commit,
    ValueVeto,
    Escalate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditItem {
    pub task: usize,
    pub expect: AuditExpect,
    #[serde(default)]
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    #[serde(default)]
    description: String,
    domain: String,
    #[serde(default)]
    difficulty: String,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    target_class: Option<String>,
    tasks: Vec<TaskSpec>,
    #[serde(default)]
    failure_schedule: Vec<Injection>,
    #[serde(default)]
    noise: Noise,
    #[serde(default)]
    canary_suite: BTreeMap<String, Vec<CanaryCase>>,
    #[serde(default)]
    experience_seed: ExperienceSeed,
    #[serde(default)]
    audit: Vec<AuditItem>,
}

/// A validated scenario with its domain resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub difficulty: String,
    pub seed: u64,
    pub domain: Domain,
    /// Failure key `Operator:CLASS` tracked by the cumulative-failure curve.
    pub target_class: Option<String>,
    pub tasks: Vec<TaskSpec>,
    pub failure_schedule: Vec<Injection>,
    pub noise: Noise,
    /// Operator name to canary cases.
    pub canary_suite: BTreeMap<String, Vec<CanaryCase>>,
    pub experience_seed: ExperienceSeed,
    pub audit: Vec<AuditItem>,
}

const BUILTIN_DOMAINS: &[(&str, &str)] = &[
    (
        "travel",
        include_str!("../../scenarios/domains/travel.json"),
    ),
    (
        "ecommerce",
        include_str!("../../scenarios/domains/ecommerce.json"),
    ),
    ("itsm", include_str!("../../scenarios/domains/itsm.json")),
];

const BUILTIN_SCENARIOS: &[(&str, &str)] = &[
    ("travel-25", include_str!("../../scenarios/travel-25.json")),
    (
        "travel-stochastic-25",
        include_str!("../../scenarios/travel-stochastic-25.json"),
    ),
    (
        "ecommerce-25",
        include_str!("../../scenarios/ecommerce-25.json"),
    ),
    ("itsm-25", include_str!("../../scenarios/itsm-25.json")),
    (
        "travel-stress-12",
        include_str!("../../scenarios/travel-stress-12.json"),
    ),
    (
        "ecommerce-stress-14",
        include_str!("../../scenarios/ecommerce-stress-14.json"),
    ),
    (
        "governance-activation-6",
        include_str!("../../scenarios/governance-activation-6.json"),
    ),
    (
        "governance-audit-8",
        include_str!("../../scenarios/governance-audit-8.json"),
    ),
    (
        "walkthrough",
        include_str!("../../scenarios/walkthrough.json"),
    ),
];

pub fn builtin_names() -> Vec<&'static str> {
    BUILTIN_SCENARIOS.iter().map(|(n, _)| *n).collect()
}

fn parse_json<T: serde::de::DeserializeOwned>(source: &str, text: &str) -> Result<T, EnvError> {
    serde_json::from_str(text).map_err(|e| EnvError::Schema {
        origin: source.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}

pub fn builtin_domain(name: &str) -> Result<Domain, EnvError> {
    let (_, text) = BUILTIN_DOMAINS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| EnvError::UnknownDomain(name.to_string()))?;
    parse_json(&format!("builtin domain {name}"), text)
}

/// Loads one of the shipped scenarios by name.
pub fn builtin_scenario(name: &str) -> Result<Scenario, EnvError> {
    let (_, text) = BUILTIN_SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| EnvError::UnknownScenario(name.to_string()))?;
    parse_scenario(&format!("builtin scenario {name}"), text, None)
}

/// Loads a scenario file. The domain is looked up as `domains/<name>.json`
/// next to the file, falling back to the shipped domains.
pub fn load_scenario(path: &Path) -> Result<Scenario, EnvError> {
    let text = std::fs::read_to_string(path).map_err(|e| EnvError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_scenario(&path.display().to_string(), &text, path.parent())
}

/// Resolves a name or a path: existing files win over shipped names.
pub fn resolve_scenario(spec: &str) -> Result<Scenario, EnvError> {
    let p = Path::new(spec);
    if p.is_file() {
        load_scenario(p)
    } else {
        builtin_scenario(spec)
    }
}

pub fn parse_scenario(source: &str, text: &str, dir: Option<&Path>) -> Result<Scenario, EnvError> {
    let f: ScenarioFile = parse_json(source, text)?;
    let local = dir.map(|d| d.join("domains").join(format!("{}.json", f.domain)));
    let domain = match local {
        Some(p) if p.is_file() => {
            let t = std::fs::read_to_string(&p).map_err(|e| EnvError::Io {
                path: p.display().to_string(),
                msg: e.to_string(),
            })?;
            parse_json(&p.display().to_string(), &t)?
        }
        _ => builtin_domain(&f.domain)?,
    };
    let s = Scenario {
        name: f.name,
        description: f.description,
        difficulty: f.difficulty,
        seed: f.seed,
        domain,
        target_class: f.target_class,
        tasks: f.tasks,
        failure_schedule: f.failure_schedule,
        noise: f.noise,
        canary_suite: f.canary_suite,
        experience_seed: f.experience_seed,
        audit: f.audit,
    };
    s.validate()?;
    Ok(s)
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> EnvError {
    EnvError::Invalid {
        field: field.into(),
        msg: msg.into(),
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.tasks.is_empty() {
            return Err(invalid("tasks", "task list is empty"));
        }
        let pkg = self.domain.pkg()?;
        let mut g = self.domain.causal_graph.clone();
        g.normalize()?;
        let base = self.domain.base_state()?;
        let types: BTreeSet<&str> = self.domain.types.iter().map(String::as_str).collect();
        for (n, t) in &self.domain.entities {
            if !types.is_empty() && !types.contains(t.as_str()) {
                return Err(invalid(
                    format!("domain.entities.{n}"),
                    format!("unknown type {t}"),
                ));
            }
        }
        let mut ids = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            let field = format!("tasks[{i}]");
            if !ids.insert(&t.id) {
                return Err(invalid(field, format!("duplicate task id {}", t.id)));
            }
            if !pkg.has_task(&t.task_class) {
                return Err(invalid(
                    field,
                    format!("no method for task class {}", t.task_class),
                ));
            }
            let mut s = base.clone();
            t.edit.apply(&mut s, &t.slots)?;
            for (k, v) in &t.slots {
                if !s.entities.contains_key(v) {
                    return Err(invalid(
                        format!("{field}.slots.{k}"),
                        format!("unknown entity {v}"),
                    ));
                }
            }
        }
        for (i, inj) in self.failure_schedule.iter().enumerate() {
            let field = format!("failure_schedule[{i}]");
            let op = pkg
                .operators
                .get(&inj.operator)
                .ok_or_else(|| invalid(&field, format!("unknown operator {}", inj.operator)))?;
            if inj.class.is_empty() {
                return Err(invalid(field, "empty error class"));
            }
            if let Requirement::Precondition { literal } = &inj.requirement {
                op.check_bound(literal)
                    .map_err(|e| invalid(&field, e.to_string()))?;
            }
            match &inj.tasks {
                TaskSelector::Indices(ix) if ix.iter().any(|&x| x >= self.tasks.len()) => {
                    return Err(invalid(field, "task index out of range"));
                }
                TaskSelector::Range([a, b]) if a > b || *b > self.tasks.len() => {
                    return Err(invalid(field, "bad task range"));
                }
                _ => {}
            }
        }
        if !(0.0..=1.0).contains(&self.noise.transient_rate) {
            return Err(invalid("noise.transient_rate", "outside [0,1]"));
        }
        if let Some(pf) = &self.noise.policy_flip {
            let [a, b] = pf.window;
            if a > b || b > self.tasks.len() || pf.length > b - a {
                return Err(invalid(
                    "noise.policy_flip",
                    "window does not fit the task list",
                ));
            }
        }
        let check_call =
            |field: String, call: &GroundStep, edit: &StateEdit| -> Result<(), EnvError> {
                let op = pkg.operators.get(&call.operator).ok_or_else(|| {
                    invalid(&field, format!("unknown operator {}", call.operator))
                })?;
                op.bind(&call.args)
                    .map_err(|e| invalid(&field, e.to_string()))?;
                let mut s = base.clone();
                edit.apply(&mut s, &BTreeMap::new())?;
                for (p, a) in op.params.iter().zip(&call.args) {
                    if s.entities.get(a) != Some(&p.ty) {
                        return Err(invalid(&field, format!("argument {a} is not a {}", p.ty)));
                    }
                }
                Ok(())
            };
        for (op, cases) in &self.canary_suite {
            for (i, c) in cases.iter().enumerate() {
                if &c.call.operator != op {
                    return Err(invalid(
                        format!("canary_suite.{op}[{i}]"),
                        "call operator mismatch",
                    ));
                }
                check_call(format!("canary_suite.{op}[{i}]"), &c.call, &c.edit)?;
            }
        }
        for (i, t) in self.experience_seed.traces.iter().enumerate() {
            let field = format!("experience_seed.traces[{i}]");
            let inj = self
                .failure_schedule
                .get(t.injection)
                .ok_or_else(|| invalid(&field, "injection index out of range"))?;
            if inj.operator != t.call.operator {
                return Err(invalid(field, "call operator differs from the injection"));
            }
            check_call(field, &t.call, &t.edit)?;
        }
        for (i, a) in self.audit.iter().enumerate() {
            if a.task >= self.tasks.len() {
                return Err(invalid(format!("audit[{i}]"), "task index out of range"));
            }
        }
        if let Some(tc) = &self.target_class {
            let (op, _) = tc
                .split_once(':')
                .ok_or_else(|| invalid("target_class", "expected Operator:CLASS"))?;
            if !pkg.operators.contains_key(op) {
                return Err(invalid("target_class", format!("unknown operator {op}")));
            }
        }
        Ok(())
    }

    pub fn task_class(&self, index: usize) -> Option<&str> {
        self.tasks.get(index).map(|t| t.task_class.as_str())
    }

    /// State for a standalone case (canary or seeded trace).
    pub fn case_state(&self, edit: &StateEdit) -> Result<SymbolicState, EnvError> {
        let mut s = self.domain.base_state()?;
        if !edit.is_empty() {
            edit.apply(&mut s, &BTreeMap::new())?;
        }
        Ok(s)
    }

    pub fn holdout_indices(&self) -> Vec<usize> {
        (0..self.tasks.len())
            .filter(|&i| self.tasks[i].holdout)
            .collect()
    }
}
