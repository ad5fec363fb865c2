use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::engine::{FdkaDecision, TaskRecord};

pub const RFR_WINDOW: usize = 100;

/// Time-to-adapt for one failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tta {
    Tasks(u64),
    /// Observed but never repaired.
    Never,
    /// Class never observed; distinct from `Never`.
    Unobserved,
}

impl fmt::Display for Tta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tta::Tasks(n) => write!(f, "{n}"),
            Tta::Never => f.write_str("inf"),
            Tta::Unobserved => f.write_str("-"),
        }
    }
}

pub fn success_rate(records: &[TaskRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    100.0 * records.iter().filter(|r| r.success).count() as f64 / records.len() as f64
}

/// Repeat-failure rate in percent over the trailing `window` tasks. A
/// failure repeats when its class key was seen in any earlier failure; the
/// terminal variant only counts failures that ended their task.
pub fn rfr(records: &[TaskRecord], window: usize, terminal: bool) -> f64 {
    let start = records.len().saturating_sub(window);
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let (mut repeats, mut total) = (0usize, 0usize);
    for (i, r) in records.iter().enumerate() {
        for f in &r.failures {
            let repeat = seen.contains(f.key.as_str());
            seen.insert(&f.key);
            if i >= start && (!terminal || f.terminal) {
                total += 1;
                repeats += usize::from(repeat);
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        100.0 * repeats as f64 / total as f64
    }
}

/// Commit-based TTA for a class key `Operator:CLASS`.
pub fn tta(records: &[TaskRecord], key: &str) -> Tta {
    let Some(first) = records
        .iter()
        .position(|r| r.failures.iter().any(|f| f.key == key))
    else {
        return Tta::Unobserved;
    };
    records[first..]
        .iter()
        .position(|r| r.committed_classes.iter().any(|c| c == key))
        .map_or(Tta::Never, |d| Tta::Tasks(d as u64))
}

/// Mean canary score over every canary run, if any ran.
pub fn csr(records: &[TaskRecord]) -> Option<f64> {
    let v: Vec<f64> = records
        .iter()
        .flat_map(|r| &r.fdka)
        .filter_map(|f| f.canary.as_ref().map(|c| c.csr))
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Cumulative count of `key` failures through each task.
pub fn cumulative_failures(records: &[TaskRecord], key: &str) -> Vec<u32> {
    let mut n = 0;
    records
        .iter()
        .map(|r| {
            n += r.failures.iter().filter(|f| f.key == key).count() as u32;
            n
        })
        .collect()
}

/// Percent of holdout tasks hit by at least one `key` failure.
pub fn holdout_failure_rate(records: &[TaskRecord], key: &str) -> Option<f64> {
    let h: Vec<&TaskRecord> = records.iter().filter(|r| r.holdout).collect();
    if h.is_empty() {
        return None;
    }
    let hit = h
        .iter()
        .filter(|r| r.failures.iter().any(|f| f.key == key))
        .count();
    Some(100.0 * hit as f64 / h.len() as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub tasks: usize,
    pub successes: usize,
    pub sr: f64,
    pub rfr_obs: f64,
    pub rfr_term: f64,
    pub csr: Option<f64>,
    pub proposed: u32,
    pub escalated: u32,
    pub queued: u32,
    pub committed: u32,
    pub rollbacks: u32,
    pub value_vetoes: u32,
    pub tta: BTreeMap<String, Tta>,
    pub target_class: Option<String>,
    pub target_curve: Vec<u32>,
    pub holdout_target_failure: Option<f64>,
    pub budget_spent: f64,
}

impl Aggregates {
    pub fn from_records(records: &[TaskRecord], target: Option<&str>) -> Self {
        let keys: BTreeSet<&str> = records
            .iter()
            .flat_map(|r| r.failures.iter().map(|f| f.key.as_str()))
            .collect();
        let sum = |f: fn(&TaskRecord) -> u32| records.iter().map(f).sum::<u32>();
        Self {
            tasks: records.len(),
            successes: records.iter().filter(|r| r.success).count(),
            sr: success_rate(records),
            rfr_obs: rfr(records, RFR_WINDOW, false),
            rfr_term: rfr(records, RFR_WINDOW, true),
            csr: csr(records),
            proposed: sum(|r| r.proposed),
            escalated: sum(|r| r.escalated),
            queued: sum(|r| r.queued),
            committed: sum(|r| r.committed),
            rollbacks: sum(|r| r.rollbacks),
            value_vetoes: records
                .iter()
                .flat_map(|r| &r.fdka)
                .filter(|f| f.decision == FdkaDecision::ValueVeto)
                .count() as u32,
            tta: keys
                .iter()
                .map(|k| (k.to_string(), tta(records, k)))
                .collect(),
            target_class: target.map(str::to_string),
            target_curve: target
                .map(|t| cumulative_failures(records, t))
                .unwrap_or_default(),
            holdout_target_failure: target.and_then(|t| holdout_failure_rate(records, t)),
            budget_spent: records.iter().map(|r| r.budget_spent).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub config: String,
    pub seed: u64,
    pub tasks: Vec<TaskRecord>,
    pub aggregates: Aggregates,
}

impl RunReport {
    pub fn new(
        scenario: &str,
        config: &str,
        seed: u64,
        tasks: Vec<TaskRecord>,
        target: Option<&str>,
    ) -> Self {
        let aggregates = Aggregates::from_records(&tasks, target);
        Self {
            scenario: scenario.to_string(),
            config: config.to_string(),
            seed,
            tasks,
            aggregates,
        }
    }

    /// Aggregates recomputed from the per-task records match the stored ones.
    pub fn is_consistent(&self) -> bool {
        Aggregates::from_records(&self.tasks, self.aggregates.target_class.as_deref())
            == self.aggregates
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
