use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::knowledge::{FailureTrace, GroundStep};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptStats {
    pub attempts: u64,
    pub failures: u64,
}

impl AttemptStats {
    pub fn rate(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.failures as f64 / self.attempts as f64)
    }
}

/// Rebinding that resolved a verifier failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairEvent {
    pub from: GroundStep,
    pub to: GroundStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdcrDecision {
    pub failures: u64,
    pub attempts: u64,
    pub rate: f64,
    pub pass: bool,
}

/// Append-only store of failure traces, repair events and per-(operator,
/// class) attempt counters. Counters for a class start at the first failure
/// of that class on that operator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperiencePool {
    pub capacity: usize,
    traces: Vec<FailureTrace>,
    index: BTreeMap<(String, String), Vec<usize>>,
    pub repair_events: Vec<RepairEvent>,
    stats: BTreeMap<String, BTreeMap<String, AttemptStats>>,
    #[serde(default)]
    op_stats: BTreeMap<String, AttemptStats>,
}

impl Default for ExperiencePool {
    fn default() -> Self {
        Self::with_capacity(10_000)
    }
}

impl ExperiencePool {
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity,
            traces: Vec::new(),
            index: BTreeMap::new(),
            repair_events: Vec::new(),
            stats: BTreeMap::new(),
            op_stats: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn traces(&self) -> &[FailureTrace] {
        &self.traces
    }

    /// Stores a trace; returns false when the pool is full.
    pub fn add_trace(&mut self, trace: FailureTrace) -> bool {
        if self.traces.len() >= self.capacity {
            return false;
        }
        let key = (
            trace.error.class.clone(),
            trace.failed_operator.name.clone(),
        );
        self.index.entry(key).or_default().push(self.traces.len());
        self.traces.push(trace);
        true
    }

    /// Counts one execution of `operator`, with its failure class if it failed.
    pub fn record_attempt(&mut self, operator: &str, failure_class: Option<&str>) {
        let t = self.op_stats.entry(operator.to_string()).or_default();
        t.attempts += 1;
        t.failures += u64::from(failure_class.is_some());
        let per_op = self.stats.entry(operator.to_string()).or_default();
        for (class, s) in per_op.iter_mut() {
            s.attempts += 1;
            if failure_class == Some(class.as_str()) {
                s.failures += 1;
            }
        }
        if let Some(c) = failure_class {
            per_op.entry(c.to_string()).or_insert(AttemptStats {
                attempts: 1,
                failures: 1,
            });
        }
    }

    /// All executions of `operator` observed this run, any class.
    pub fn op_totals(&self, operator: &str) -> (u64, u64) {
        let t = self.op_stats.get(operator).copied().unwrap_or_default();
        (t.attempts, t.failures)
    }

    pub fn seed_stats(&mut self, operator: &str, class: &str, stats: AttemptStats) {
        self.stats
            .entry(operator.to_string())
            .or_default()
            .insert(class.to_string(), stats);
    }

    pub fn stats(&self, operator: &str, class: &str) -> AttemptStats {
        self.stats
            .get(operator)
            .and_then(|m| m.get(class))
            .copied()
            .unwrap_or_default()
    }

    /// Systematic-error gate: pass iff the class error rate is at least `1 - p_alpha`.
    pub fn edcr(&self, operator: &str, class: &str, p_alpha: f64) -> EdcrDecision {
        let s = self.stats(operator, class);
        let rate = s.rate().unwrap_or(0.0);
        EdcrDecision {
            failures: s.failures,
            attempts: s.attempts,
            rate,
            pass: s.attempts > 0 && rate >= 1.0 - p_alpha,
        }
    }

    /// Up to `k` traces for (class, operator), most recent first.
    pub fn retrieve(&self, class: &str, operator: &str, k: usize) -> Vec<&FailureTrace> {
        self.index
            .get(&(class.to_string(), operator.to_string()))
            .map(|ix| ix.iter().rev().take(k).map(|&i| &self.traces[i]).collect())
            .unwrap_or_default()
    }

    pub fn add_repair(&mut self, ev: RepairEvent) {
        self.repair_events.push(ev);
    }
}
