use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{apply_patch, apply_rollback, KnowledgeError, Operator, Patch, Predicate, RollbackOp};

/// Decomposition template. Subtasks are written as calls such as
/// `BookHotel($city, $dates, ?card)`: `$x` reads instruction slot `x`,
/// `?x` is a free variable grounded against the state, anything else is a
/// literal constant. A subtask naming another task expands recursively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub task: String,
    #[serde(default)]
    pub subtasks: Vec<Predicate>,
    #[serde(default)]
    pub goal: Vec<Predicate>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProcessKnowledgeGraph {
    pub operators: BTreeMap<String, Operator>,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub version: u64,
}

impl ProcessKnowledgeGraph {
    pub fn new(operators: Vec<Operator>, methods: Vec<Method>) -> Result<Self, KnowledgeError> {
        let mut map = BTreeMap::new();
        for op in operators {
            op.validate()?;
            let name = op.name.clone();
            if map.insert(name.clone(), op).is_some() {
                return Err(KnowledgeError::Invalid(format!(
                    "duplicate operator {name}"
                )));
            }
        }
        let pkg = Self {
            operators: map,
            methods,
            version: 0,
        };
        pkg.validate()?;
        Ok(pkg)
    }

    pub fn validate(&self) -> Result<(), KnowledgeError> {
        let tasks: BTreeSet<&str> = self.methods.iter().map(|m| m.task.as_str()).collect();
        let mut names = BTreeSet::new();
        for m in &self.methods {
            if !names.insert(m.name.as_str()) {
                return Err(KnowledgeError::Invalid(format!(
                    "duplicate method {}",
                    m.name
                )));
            }
            for s in &m.subtasks {
                if s.negated {
                    return Err(KnowledgeError::Invalid(format!(
                        "{}: negated subtask",
                        m.name
                    )));
                }
                match self.operators.get(&s.name) {
                    Some(op) if op.params.len() != s.arity() => {
                        return Err(KnowledgeError::Arity {
                            operator: s.name.clone(),
                            expected: op.params.len(),
                            got: s.arity(),
                        })
                    }
                    Some(_) => {}
                    None if tasks.contains(s.name.as_str()) => {}
                    None => {
                        return Err(KnowledgeError::Invalid(format!(
                            "{}: unknown subtask {}",
                            m.name, s.name
                        )))
                    }
                }
            }
        }
        let mut arity: BTreeMap<&str, usize> = BTreeMap::new();
        for op in self.operators.values() {
            for p in op.pre.iter().chain(&op.eff) {
                if let Some(prev) = arity.insert(&p.name, p.arity()) {
                    if prev != p.arity() {
                        return Err(KnowledgeError::Invalid(format!(
                            "predicate {} used with arity {prev} and {}",
                            p.name,
                            p.arity()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn operator(&self, name: &str) -> Result<&Operator, KnowledgeError> {
        self.operators
            .get(name)
            .ok_or_else(|| KnowledgeError::UnknownOperator(name.to_string()))
    }

    pub fn methods_for<'a>(&'a self, task: &'a str) -> impl Iterator<Item = &'a Method> + 'a {
        self.methods.iter().filter(move |m| m.task == task)
    }

    pub fn has_task(&self, task: &str) -> bool {
        self.methods.iter().any(|m| m.task == task)
    }

    /// Applies a patch in place, bumping the version. Returns the rollback set.
    pub fn apply(&mut self, patch: &Patch) -> Result<Vec<RollbackOp>, KnowledgeError> {
        let op = self.operator(&patch.scope)?;
        let rb = patch.rollback_set(op)?;
        let new = apply_patch(op, patch)?;
        self.operators.insert(new.name.clone(), new);
        self.version += 1;
        Ok(rb)
    }

    pub fn rollback(&mut self, scope: &str, ops: &[RollbackOp]) -> Result<(), KnowledgeError> {
        let op = self.operator(scope)?;
        let restored = apply_rollback(op, ops)?;
        self.operators.insert(restored.name.clone(), restored);
        self.version += 1;
        Ok(())
    }

    /// Structural content ignoring the version counter.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.operators == other.operators && self.methods == other.methods
    }
}
