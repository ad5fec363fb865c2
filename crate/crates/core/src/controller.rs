//! Metacognitive signals, pathway arbitration and threshold reflection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::knowledge::{
    Binding, Invariant, Modality, ProcessKnowledgeGraph, SymbolicState, ValueRule,
};
use crate::planner::Plan;

pub const FEATURE_NAMES: [&str; 10] = [
    "p_gap",
    "invariant_proximity",
    "tool_failure_rate",
    "novelty",
    "recent_violations",
    "plan_depth",
    "budget_pressure",
    "uncertainty",
    "value_impact",
    "operator_diversity",
];

/// Feature vector. Every entry is oriented so that larger means riskier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Features(pub [f64; 10]);

impl Features {
    pub const P_GAP: usize = 0;
    pub const RECENT_VIOLATIONS: usize = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalVector {
    pub u: f64,
    pub p_viol: f64,
    pub features: Features,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticWeights {
    pub bias: f64,
    pub w: [f64; 10],
}

impl Default for LogisticWeights {
    fn default() -> Self {
        let mut w = [0.5; 10];
        w[Features::P_GAP] = 3.0;
        w[Features::RECENT_VIOLATIONS] = 2.0;
        Self { bias: -2.0, w }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub tau_u: f64,
    pub tau_p: f64,
    pub c_s1: f64,
    pub c_verify: f64,
    pub c_s2: f64,
    pub budget: f64,
    pub ema_alpha: f64,
    pub weights: LogisticWeights,
    pub t_cal: f64,
    pub reflect_window: usize,
    pub nudge: f64,
    pub sr_s1_floor: f64,
    pub sr_s2_ceiling: f64,
    pub lookahead: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            tau_u: 0.25,
            tau_p: 0.20,
            c_s1: 0.05,
            c_verify: 0.2,
            c_s2: 1.0,
            budget: 5.0,
            ema_alpha: 0.01,
            weights: LogisticWeights::default(),
            t_cal: 1.0,
            reflect_window: 100,
            nudge: 0.05,
            sr_s1_floor: 0.7,
            sr_s2_ceiling: 0.95,
            lookahead: 3,
        }
    }
}

pub const THRESHOLD_MIN: f64 = 0.05;
pub const THRESHOLD_MAX: f64 = 0.95;

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.c_s1 < self.c_verify && self.c_verify < self.c_s2) {
            return Err("pathway costs must satisfy c_s1 < c_verify < c_s2".into());
        }
        for (n, t) in [("tau_u", self.tau_u), ("tau_p", self.tau_p)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(format!("{n} outside [0,1]"));
            }
        }
        if self.budget <= 0.0 || self.t_cal <= 0.0 {
            return Err("budget and t_cal must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pathway {
    S1,
    S2,
    Verify,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unbound-slot fraction of a grounded plan.
pub fn uncertainty(plan: &Plan) -> f64 {
    plan.unbound_fraction().clamp(0.0, 1.0)
}

pub fn violation_logit(features: &Features, cfg: &ControllerConfig) -> f64 {
    let w = &cfg.weights;
    w.bias
        + w.w
            .iter()
            .zip(features.0.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
}

pub fn violation_prob(features: &Features, cfg: &ControllerConfig) -> f64 {
    sigmoid(violation_logit(features, cfg) / cfg.t_cal)
}

pub fn arbitrate(u: f64, p_viol: f64, budget_remaining: f64, cfg: &ControllerConfig) -> Pathway {
    if p_viol > cfg.tau_p && budget_remaining >= cfg.c_verify {
        Pathway::Verify
    } else if u > cfg.tau_u && budget_remaining >= cfg.c_s2 {
        Pathway::S2
    } else {
        Pathway::S1
    }
}

/// Nearest-rank quantile of a nonempty sample.
pub fn quantile_nearest_rank(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectRecord {
    pub u: f64,
    pub p_viol: f64,
    pub success: bool,
    pub used_s1: bool,
    pub used_s2: bool,
}

fn success_rate(records: &[ReflectRecord], pick: impl Fn(&ReflectRecord) -> bool) -> Option<f64> {
    let sel: Vec<_> = records.iter().filter(|r| pick(r)).collect();
    if sel.is_empty() {
        None
    } else {
        Some(sel.iter().filter(|r| r.success).count() as f64 / sel.len() as f64)
    }
}

/// Returns updated `(tau_u, tau_p)`. Per-call drift is bounded by `ema_alpha`.
pub fn reflect(records: &[ReflectRecord], cfg: &ControllerConfig) -> (f64, f64) {
    let start = records.len().saturating_sub(cfg.reflect_window);
    let window = &records[start..];
    let failures: Vec<&ReflectRecord> = window.iter().filter(|r| !r.success).collect();
    if failures.is_empty() {
        return (cfg.tau_u, cfg.tau_p);
    }
    let a = cfg.ema_alpha;
    let us: Vec<f64> = failures.iter().map(|r| r.u).collect();
    let ps: Vec<f64> = failures.iter().map(|r| r.p_viol).collect();
    let mut tu = (1.0 - a) * cfg.tau_u + a * quantile_nearest_rank(&us, 0.8).unwrap();
    let mut tp = (1.0 - a) * cfg.tau_p + a * quantile_nearest_rank(&ps, 0.8).unwrap();
    let factor = match (
        success_rate(window, |r| r.used_s1),
        success_rate(window, |r| r.used_s2),
    ) {
        (Some(s1), _) if s1 < cfg.sr_s1_floor => 1.0 + cfg.nudge,
        (_, Some(s2)) if s2 > cfg.sr_s2_ceiling => 1.0 - cfg.nudge,
        _ => 1.0,
    };
    tu *= factor;
    tp *= factor;
    let bound = |new: f64, old: f64| {
        new.clamp(old - a, old + a)
            .clamp(THRESHOLD_MIN.min(old), THRESHOLD_MAX.max(old))
            .clamp(0.0, 1.0)
    };
    (bound(tu, cfg.tau_u), bound(tp, cfg.tau_p))
}

/// Inputs for the feature vector at one decision point.
pub struct FeatureContext<'a> {
    pub plan: &'a Plan,
    pub state: &'a SymbolicState,
    pub pkg: &'a ProcessKnowledgeGraph,
    pub invariants: &'a [Invariant],
    pub value_rules: &'a [ValueRule],
    pub executed_ops: &'a BTreeSet<String>,
    /// Most recent execution outcomes, `true` for a failure.
    pub recent_failures: &'a [bool],
    pub tool_failure_rate: f64,
    pub budget_used_fraction: f64,
    pub lookahead: usize,
    pub max_steps: usize,
}

fn precondition_gap(ctx: &FeatureContext) -> f64 {
    let mut s = ctx.state.clone();
    let (mut unmet, mut total) = (0usize, 0usize);
    for step in ctx.plan.steps.iter().take(ctx.lookahead) {
        let Some(op) = ctx.pkg.operators.get(&step.operator) else {
            continue;
        };
        let Some(g) = step.to_ground() else {
            total += op.pre.len().max(1);
            unmet += op.pre.len().max(1);
            continue;
        };
        let Ok(b) = op.bind(&g.args) else { continue };
        for p in op.ground_pre(&b) {
            total += 1;
            if !s.holds(&p).unwrap_or(false) {
                unmet += 1;
            }
        }
        let _ = s.apply_effects(&op.ground_eff(&b));
    }
    if total == 0 {
        0.0
    } else {
        unmet as f64 / total as f64
    }
}

/// Minimum number of literals that must flip for some invariant instance over
/// the lookahead constants to become violated.
pub fn invariant_distance(
    invariants: &[Invariant],
    state: &SymbolicState,
    constants: &BTreeSet<String>,
) -> Option<usize> {
    let consts: Vec<&String> = constants.iter().collect();
    let mut best: Option<usize> = None;
    for inv in invariants {
        let vars: Vec<String> = inv
            .forbid
            .iter()
            .flat_map(|p| p.vars().map(str::to_string))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if vars.len() > 4 || (consts.is_empty() && !vars.is_empty()) {
            continue;
        }
        let n = consts.len().max(1).pow(vars.len() as u32);
        for mut idx in 0..n {
            let mut b = Binding::new();
            for v in &vars {
                b.insert(v.clone(), consts[idx % consts.len()].clone());
                idx /= consts.len();
            }
            let d = inv
                .forbid
                .iter()
                .filter(|p| !state.holds(&p.substitute(&b)).unwrap_or(false))
                .count();
            best = Some(best.map_or(d, |x| x.min(d)));
        }
    }
    best
}

pub fn compute_features(ctx: &FeatureContext) -> Features {
    let window: Vec<_> = ctx.plan.steps.iter().take(ctx.lookahead).collect();
    let h = window.len().max(1) as f64;
    let consts: BTreeSet<String> = window
        .iter()
        .flat_map(|s| s.args.iter().filter_map(|a| a.value().map(str::to_string)))
        .collect();
    let proximity = invariant_distance(ctx.invariants, ctx.state, &consts)
        .map_or(0.0, |d| 1.0 / (1.0 + d as f64));
    let novelty = window
        .iter()
        .filter(|s| !ctx.executed_ops.contains(&s.operator))
        .count() as f64
        / h;
    let recent = if ctx.recent_failures.is_empty() {
        0.0
    } else {
        ctx.recent_failures.iter().filter(|f| **f).count() as f64 / ctx.recent_failures.len() as f64
    };
    let depth = (ctx.plan.steps.len() as f64 / ctx.max_steps.max(1) as f64).min(1.0);
    let guarded = window
        .iter()
        .filter(|s| {
            ctx.value_rules
                .iter()
                .any(|r| r.action == s.operator && r.modality != Modality::Permitted)
        })
        .count() as f64
        / h;
    let distinct: BTreeSet<&str> = ctx.plan.steps.iter().map(|s| s.operator.as_str()).collect();
    let diversity = (distinct.len() as f64 / ctx.max_steps.max(1) as f64).min(1.0);
    Features([
        precondition_gap(ctx),
        proximity,
        ctx.tool_failure_rate.clamp(0.0, 1.0),
        novelty,
        recent,
        depth,
        ctx.budget_used_fraction.clamp(0.0, 1.0),
        uncertainty(ctx.plan),
        guarded,
        diversity,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ControllerConfig {
        ControllerConfig::default()
    }

    fn logit_features(x: f64) -> Features {
        // bias -2 plus p_gap weight 3: choose p_gap so that logit = x
        let mut f = Features::default();
        f.0[Features::P_GAP] = (x + 2.0) / 3.0;
        f
    }

    #[test]
    fn sigmoid_table() {
        assert_eq!(violation_prob(&logit_features(0.0), &cfg()), 0.5);
        let p = violation_prob(&logit_features(10.0), &cfg());
        assert!((p - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-12);
        assert!((p - 0.99995).abs() < 1e-5);
        let mut c = cfg();
        c.t_cal = 2.0;
        let half = violation_prob(&logit_features(2.0), &c);
        assert!((half - 0.731_058_578_6).abs() < 1e-9);
        assert!((violation_prob(&logit_features(2.0), &cfg()) - 0.880_797_078).abs() < 1e-9);
    }

    #[test]
    fn arbitration_cases() {
        let c = cfg();
        assert_eq!(arbitrate(0.1, 0.5, 5.0, &c), Pathway::Verify);
        assert_eq!(arbitrate(0.3, 0.1, 5.0, &c), Pathway::S2);
        assert_eq!(arbitrate(0.3, 0.5, 0.1, &c), Pathway::S1);
        assert_eq!(arbitrate(0.0, 0.0, 5.0, &c), Pathway::S1);
    }

    #[test]
    fn default_config_valid() {
        cfg().validate().unwrap();
        let mut c = cfg();
        c.c_s2 = 0.1;
        assert!(c.validate().is_err());
    }

    fn rec(u: f64, success: bool) -> ReflectRecord {
        ReflectRecord {
            u,
            p_viol: u,
            success,
            used_s1: false,
            used_s2: false,
        }
    }

    #[test]
    fn reflect_no_failures_unchanged() {
        let c = cfg();
        assert_eq!(reflect(&[rec(0.9, true)], &c), (c.tau_u, c.tau_p));
    }

    #[test]
    fn reflect_ema() {
        let c = cfg();
        let (tu, _) = reflect(&[rec(1.0, false), rec(1.0, false)], &c);
        assert!((tu - 0.2575).abs() < 1e-12);
    }

    #[test]
    fn reflect_quantile_over_failures() {
        let c = cfg();
        let recs: Vec<_> = (1..=10).map(|i| rec(i as f64 / 10.0, false)).collect();
        // Nearest rank: ceil(0.8*10) = 8th smallest = 0.8.
        let (tu, _) = reflect(&recs, &c);
        assert!((tu - (0.99 * 0.25 + 0.01 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn nearest_rank_oracle() {
        assert_eq!(quantile_nearest_rank(&[3.0, 1.0, 2.0], 0.8), Some(3.0));
        assert_eq!(quantile_nearest_rank(&[5.0], 0.8), Some(5.0));
        assert_eq!(quantile_nearest_rank(&[], 0.8), None);
    }
}
