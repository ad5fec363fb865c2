use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{KnowledgeError, Predicate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Obligatory,
    Prohibited,
    Permitted,
}

/// Deontic rule `(action, modality, condition)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueRule {
    pub action: String,
    pub modality: Modality,
    #[serde(default)]
    pub condition: Vec<Predicate>,
}

/// Forbidden conjunction: no grounding may make every literal true.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invariant {
    #[serde(default)]
    pub name: String,
    pub forbid: Vec<Predicate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalEdge {
    pub from: String,
    pub to: String,
    #[serde(default = "yes")]
    pub identifiable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalGraph {
    #[serde(default)]
    pub nodes: BTreeSet<String>,
    #[serde(default)]
    pub edges: Vec<CausalEdge>,
}

impl CausalGraph {
    /// Adds edge endpoints to the node set and rejects self-loops.
    pub fn normalize(&mut self) -> Result<(), KnowledgeError> {
        for e in &self.edges {
            if e.from == e.to {
                return Err(KnowledgeError::Invalid(format!(
                    "causal self-loop on {}",
                    e.from
                )));
            }
        }
        let ends: Vec<String> = self
            .edges
            .iter()
            .flat_map(|e| [e.from.clone(), e.to.clone()])
            .collect();
        self.nodes.extend(ends);
        Ok(())
    }

    fn adjacency(&self, forward: bool) -> BTreeMap<&str, Vec<&str>> {
        let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for e in &self.edges {
            let (a, b) = if forward {
                (&e.from, &e.to)
            } else {
                (&e.to, &e.from)
            };
            adj.entry(a.as_str()).or_default().push(b.as_str());
        }
        adj
    }

    fn closure(&self, seeds: &BTreeSet<String>, forward: bool) -> BTreeSet<String> {
        let adj = self.adjacency(forward);
        let mut seen: BTreeSet<String> = seeds
            .iter()
            .filter(|s| self.nodes.contains(*s))
            .cloned()
            .collect();
        let mut stack: Vec<String> = seen.iter().cloned().collect();
        while let Some(n) = stack.pop() {
            for &m in adj.get(n.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(m.to_string()) {
                    stack.push(m.to_string());
                }
            }
        }
        seen
    }

    /// Nodes reachable from `seeds`, seeds included.
    pub fn descendants(&self, seeds: &BTreeSet<String>) -> BTreeSet<String> {
        self.closure(seeds, true)
    }

    pub fn ancestors(&self, seeds: &BTreeSet<String>) -> BTreeSet<String> {
        self.closure(seeds, false)
    }

    /// `(identifiable, total)` over edges lying on a directed path through a touched node.
    pub fn identifiability_counts(&self, touched: &BTreeSet<String>) -> (usize, usize) {
        let down = self.descendants(touched);
        let up = self.ancestors(touched);
        let mut ident = 0;
        let mut total = 0;
        for e in &self.edges {
            if up.contains(&e.to) || down.contains(&e.from) {
                total += 1;
                if e.identifiable {
                    ident += 1;
                }
            }
        }
        (ident, total)
    }

    pub fn identifiability(&self, touched: &BTreeSet<String>) -> f64 {
        match self.identifiability_counts(touched) {
            (_, 0) => 0.0,
            (i, t) => i as f64 / t as f64,
        }
    }

    /// Fraction of all nodes reachable from, but not in, the touched set.
    pub fn impact(&self, touched: &BTreeSet<String>) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        let reach = self.descendants(touched);
        let n = reach.iter().filter(|x| !touched.contains(*x)).count();
        n as f64 / self.nodes.len() as f64
    }
}
