use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::AgentConfig;
use super::engine::{Engine, EngineEvent, FdkaDecision};
use super::metrics::{mean_std, RunReport};
use super::HarnessError;
use crate::envsim::{AuditExpect, Scenario};

/// Runs every task of `scenario` in order with one engine.
pub fn run_scenario(
    scenario: &Scenario,
    cfg: &AgentConfig,
    seed: u64,
) -> Result<RunReport, HarnessError> {
    let mut e = Engine::new(scenario, cfg.clone(), seed)?;
    run_engine(&mut e, seed)
}

/// As [`run_scenario`], also returning the engine's event stream.
pub fn run_scenario_traced(
    scenario: &Scenario,
    cfg: &AgentConfig,
    seed: u64,
) -> Result<(RunReport, Vec<EngineEvent>), HarnessError> {
    let mut e = Engine::new(scenario, cfg.clone(), seed)?;
    let r = run_engine(&mut e, seed)?;
    Ok((r, e.events))
}

pub fn run_scenario_with_ledger(
    scenario: &Scenario,
    cfg: &AgentConfig,
    seed: u64,
    ledger: &Path,
) -> Result<RunReport, HarnessError> {
    let mut e = Engine::with_ledger_file(scenario, cfg.clone(), seed, ledger)?;
    run_engine(&mut e, seed)
}

fn run_engine(e: &mut Engine, seed: u64) -> Result<RunReport, HarnessError> {
    let tasks = (0..e.scenario.tasks.len())
        .map(|i| e.run_task(i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunReport::new(
        &e.scenario.name,
        &e.cfg.name,
        seed,
        tasks,
        e.scenario.target_class.as_deref(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1}±{:.1}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub scenario: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub sr: MeanStd,
    pub rfr_obs: MeanStd,
    pub rfr_term: MeanStd,
    pub committed: MeanStd,
    pub escalated: MeanStd,
    pub holdout_target_failure: Option<MeanStd>,
}

impl SuiteSummary {
    pub fn from_runs(runs: &[RunReport]) -> Self {
        let col =
            |f: &dyn Fn(&RunReport) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        let holdout: Option<Vec<f64>> = runs
            .iter()
            .map(|r| r.aggregates.holdout_target_failure)
            .collect();
        Self {
            scenario: runs.first().map(|r| r.scenario.clone()).unwrap_or_default(),
            config: runs.first().map(|r| r.config.clone()).unwrap_or_default(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            sr: col(&|r| r.aggregates.sr),
            rfr_obs: col(&|r| r.aggregates.rfr_obs),
            rfr_term: col(&|r| r.aggregates.rfr_term),
            committed: col(&|r| r.aggregates.committed as f64),
            escalated: col(&|r| r.aggregates.escalated as f64),
            holdout_target_failure: holdout.filter(|h| !h.is_empty()).map(|h| MeanStd::of(&h)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub runs: Vec<RunReport>,
    pub summary: SuiteSummary,
}

pub fn run_suite(
    scenario: &Scenario,
    cfg: &AgentConfig,
    seeds: &[u64],
) -> Result<SuiteReport, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Config("no seeds given".into()));
    }
    let runs = seeds
        .iter()
        .map(|&s| run_scenario(scenario, cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = SuiteSummary::from_runs(&runs);
    Ok(SuiteReport { runs, summary })
}

pub const TABLE_HEADER: [&str; 8] = [
    "scenario",
    "config",
    "seeds",
    "SR",
    "RFR_obs",
    "RFR_term",
    "patches",
    "holdout_fail",
];

fn row(s: &SuiteSummary) -> [String; 8] {
    [
        s.scenario.clone(),
        s.config.clone(),
        s.seeds.len().to_string(),
        s.sr.to_string(),
        s.rfr_obs.to_string(),
        s.rfr_term.to_string(),
        s.committed.to_string(),
        s.holdout_target_failure
            .map_or("-".into(), |h| h.to_string()),
    ]
}

pub fn format_table(rows: &[SuiteSummary]) -> String {
    let body: Vec<[String; 8]> = rows.iter().map(row).collect();
    let mut w = TABLE_HEADER.map(str::len);
    for r in &body {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:<width$}", width = w[i]))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&TABLE_HEADER.map(String::from), &mut out);
    for r in &body {
        line(r, &mut out);
    }
    out
}

pub fn format_csv(rows: &[SuiteSummary]) -> String {
    let mut out = TABLE_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&row(r).join(","));
        out.push('\n');
    }
    out
}

/// `task,<config>...` CSV of cumulative target-class failures.
pub fn curve_csv(runs: &[RunReport]) -> String {
    let mut out = String::from("task");
    for r in runs {
        let _ = write!(out, ",{}@{}", r.config, r.seed);
    }
    out.push('\n');
    let n = runs
        .iter()
        .map(|r| r.aggregates.target_curve.len())
        .max()
        .unwrap_or(0);
    for i in 0..n {
        let _ = write!(out, "{i}");
        for r in runs {
            match r.aggregates.target_curve.get(i) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub task: usize,
    pub label: String,
    pub expect: AuditExpect,
    pub actual: Option<AuditExpect>,
    pub decision: Option<FdkaDecision>,
    pub canary_passed: Option<bool>,
    pub matched: bool,
}

/// Runs the scripted audit scenario and compares each first FDKA decision.
pub fn run_audit(
    scenario: &Scenario,
    cfg: &AgentConfig,
    seed: u64,
) -> Result<Vec<AuditRow>, HarnessError> {
    let report = run_scenario(scenario, cfg, seed)?;
    Ok(scenario
        .audit
        .iter()
        .map(|a| {
            let f = report.tasks[a.task].fdka.first();
            let decision = f.map(|f| f.decision);
            let actual = decision.and_then(|d| match d {
                FdkaDecision::Committed => Some(AuditExpect::Commit),
                FdkaDecision::ValueVeto => Some(AuditExpect::ValueVeto),
                FdkaDecision::Escalated => Some(AuditExpect::Escalate),
                _ => None,
            });
            AuditRow {
                task: a.task,
                label: a.label.clone(),
                expect: a.expect,
                actual,
                decision,
                canary_passed: f.and_then(|f| f.canary.as_ref().map(|c| c.passed)),
                matched: actual == Some(a.expect),
            }
        })
        .collect())
}
