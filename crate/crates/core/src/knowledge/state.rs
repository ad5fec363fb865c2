use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{KnowledgeError, Predicate};

/// Closed-world symbolic state: positive ground facts plus a typed entity table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicState {
    #[serde(default)]
    pub entities: BTreeMap<String, String>,
    #[serde(default)]
    pub facts: BTreeSet<Predicate>,
}

impl SymbolicState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_entity(&mut self, name: &str, ty: &str) {
        self.entities.insert(name.to_string(), ty.to_string());
    }

    pub fn insert(&mut self, fact: Predicate) -> Result<(), KnowledgeError> {
        if !fact.is_ground() {
            return Err(KnowledgeError::NotGround(fact.to_string()));
        }
        if fact.negated {
            self.facts.remove(&fact.atom());
        } else {
            self.facts.insert(fact);
        }
        Ok(())
    }

    pub fn holds(&self, lit: &Predicate) -> Result<bool, KnowledgeError> {
        if !lit.is_ground() {
            return Err(KnowledgeError::NotGround(lit.to_string()));
        }
        let present = self.facts.contains(&lit.atom());
        Ok(present != lit.negated)
    }

    /// True iff every literal holds under closed-world negation.
    pub fn entails(&self, pre: &[Predicate]) -> Result<bool, KnowledgeError> {
        for p in pre {
            if !self.holds(p)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// STRIPS update: deletes first, then adds.
    pub fn apply_effects(&mut self, eff: &[Predicate]) -> Result<(), KnowledgeError> {
        for e in eff.iter().filter(|e| e.negated) {
            self.insert(e.clone())?;
        }
        for e in eff.iter().filter(|e| !e.negated) {
            self.insert(e.clone())?;
        }
        Ok(())
    }

    pub fn entities_of_type<'a>(&'a self, ty: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entities
            .iter()
            .filter(move |(_, t)| t.as_str() == ty)
            .map(|(n, _)| n.as_str())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in &self.entities {
            h.update(n.as_bytes());
            h.update(b":");
            h.update(t.as_bytes());
            h.update(b";");
        }
        h.update(b"|");
        for f in &self.facts {
            h.update(f.to_string().as_bytes());
            h.update(b";");
        }
        hex::encode(h.finalize())
    }
}

/// Free-function form of [`SymbolicState::entails`].
pub fn entails(state: &SymbolicState, pre: &[Predicate]) -> Result<bool, KnowledgeError> {
    state.entails(pre)
}
