use std::collections::BTreeSet;

use ratchet_core::envsim::{builtin_domain, builtin_scenario, ScenarioSandbox};
use ratchet_core::fdka::{ReplayCase, ScoreBreakdown};
use ratchet_core::governance::{
    canary, canary_from_counts, causal_veto, effective_tau_conf, hitl_gate, value_veto, CanaryMode,
    EntryStatus, GateTag, GovernanceConfig, HumanPolicy, Ledger, LedgerEvent, Provenance,
    StageOutcome,
};
use ratchet_core::harness::{AgentConfig, Engine};
use ratchet_core::knowledge::{
    edit_key, CausalEdge, CausalGraph, EditAction, EditType, Patch, PatchBody,
    ProcessKnowledgeGraph,
};

fn travel_pkg() -> ProcessKnowledgeGraph {
    builtin_domain("travel").unwrap().pkg().unwrap()
}

fn pre(scope: &str, lit: &str, action: EditAction) -> Patch {
    Patch {
        scope: scope.into(),
        edit_type: EditType::AddPrecondition,
        body: PatchBody::Predicate(lit.parse().unwrap()),
        target: "pre".into(),
        action,
        rationale: format!("{lit} on {scope}"),
    }
}

fn prov(tag: &str) -> Provenance {
    Provenance {
        source: "test".into(),
        inputs: tag.into(),
        context: "governance".into(),
        rationale: tag.into(),
        timestamp: 0,
        trace_ref: format!("{tag}#0"),
    }
}

fn breakdown(risk: f64, aggregate: f64) -> ScoreBreakdown {
    ScoreBreakdown {
        s_plaus: 0.97,
        s_cons: 1.0,
        s_util: 0.8,
        s_risk: risk,
        lambda_budget: 0.0,
        aggregate,
        cold_start: false,
    }
}

/// `hub` fans out to `n` leaves (`ident` of them identifiable) plus
/// `pad` isolated nodes.
fn fan(hub: &str, n: usize, ident: usize, pad: usize) -> CausalGraph {
    let mut g = CausalGraph {
        nodes: (0..pad).map(|i| format!("iso{i}")).collect(),
        edges: (0..n)
            .map(|i| CausalEdge {
                from: hub.into(),
                to: format!("leaf{i}"),
                identifiable: i < ident,
            })
            .collect(),
    };
    g.normalize().unwrap();
    g
}

#[test]
fn value_veto_prohibited_guard_removed() {
    let pkg = travel_pkg();
    let rules = builtin_domain("travel").unwrap().value_rules;
    let p = pre("RentCar", "hotel_booked(?city, ?dates)", EditAction::Remove);
    let v = value_veto(&p, pkg.operator("RentCar").unwrap(), &rules);
    assert!(v.veto, "{v:?}");
    assert!(v.reasons[0].contains("prohibited"));
}

#[test]
fn value_veto_obligatory_weakened() {
    let pkg = travel_pkg();
    let rules = builtin_domain("travel").unwrap().value_rules;
    let p = pre(
        "RequestApproval",
        "policy_checked(?traveler, ?dates)",
        EditAction::Remove,
    );
    let v = value_veto(&p, pkg.operator("RequestApproval").unwrap(), &rules);
    assert!(v.veto);
    assert!(v.reasons[0].contains("obligatory"));
}

#[test]
fn value_veto_allows_walkthrough_patch() {
    let pkg = travel_pkg();
    let rules = builtin_domain("travel").unwrap().value_rules;
    let p = pre(
        "BookHotel",
        "not blocked_card(?card, ?dates)",
        EditAction::Add,
    );
    assert!(!value_veto(&p, pkg.operator("BookHotel").unwrap(), &rules).veto);
    // Strengthening a guarded operator is never a veto.
    let p = pre("RentCar", "card_verified(?card)", EditAction::Add);
    assert!(!value_veto(&p, pkg.operator("RentCar").unwrap(), &rules).veto);
}

#[test]
fn causal_thresholds() {
    let cfg = GovernanceConfig::default();
    let p = pre("Hub", "x(?a)", EditAction::Add);

    let allow = causal_veto(&p, &fan("Hub", 20, 18, 79), &cfg);
    assert_eq!((allow.identifiable, allow.relevant), (18, 20));
    assert!((allow.iota - 0.9).abs() < 1e-12 && (allow.eta - 0.2).abs() < 1e-12);
    assert!(!allow.veto);

    let low_ident = causal_veto(&p, &fan("Hub", 5, 2, 20), &cfg);
    assert!((low_ident.iota - 0.4).abs() < 1e-12 && low_ident.eta <= 0.6);
    assert!(low_ident.veto);

    let high_impact = causal_veto(&p, &fan("Hub", 7, 7, 2), &cfg);
    assert!((high_impact.eta - 0.7).abs() < 1e-12 && high_impact.iota == 1.0);
    assert!(high_impact.veto);

    let absent = causal_veto(
        &pre("Elsewhere", "x(?a)", EditAction::Add),
        &fan("Hub", 3, 3, 0),
        &cfg,
    );
    assert_eq!(absent.iota, 0.0);
    assert!(absent.veto);
}

#[test]
fn walkthrough_causal_allow() {
    let s = builtin_scenario("walkthrough").unwrap();
    let mut g = s.domain.causal_graph.clone();
    g.normalize().unwrap();
    let p = pre(
        "BookHotel",
        "not blocked_card(?card, ?dates)",
        EditAction::Add,
    );
    let v = causal_veto(&p, &g, &GovernanceConfig::default());
    assert_eq!((v.identifiable, v.relevant), (18, 20));
    assert!((v.eta - 0.2).abs() < 1e-9, "eta {}", v.eta);
    assert!(!v.veto);
}

#[test]
fn stage_fresh_key() {
    let mut pkg = travel_pkg();
    let mut l = Ledger::new(GovernanceConfig::default());
    let p = pre("BookHotel", "card_verified(?card)", EditAction::Add);
    let (o, id) = l.check_and_stage(&p, prov("a"), 0.5, 0, &mut pkg).unwrap();
    assert_eq!(o, StageOutcome::Ok);
    assert_eq!(l.entry(id.unwrap()).unwrap().status, EntryStatus::Staged);
}

#[test]
fn stage_coverage_conflict() {
    let mut pkg = travel_pkg();
    let mut l = Ledger::new(GovernanceConfig::default());
    let a = pre("BookHotel", "card_verified(?card)", EditAction::Add);
    let b = Patch {
        edit_type: EditType::RefineEffect,
        target: "eff".into(),
        ..a.clone()
    };
    assert_eq!(edit_key(&a), edit_key(&b));
    let (_, first) = l.check_and_stage(&a, prov("a"), 0.5, 0, &mut pkg).unwrap();
    l.commit(first.unwrap(), 0, &mut pkg).unwrap();
    let (o, second) = l.check_and_stage(&b, prov("b"), 0.5, 1, &mut pkg).unwrap();
    assert_eq!(o, StageOutcome::CoverageResolved);
    assert_eq!(
        l.entry(first.unwrap()).unwrap().status,
        EntryStatus::RolledBack
    );
    assert_eq!(
        l.entry(second.unwrap()).unwrap().status,
        EntryStatus::Staged
    );
    // The precondition edit was rolled back before the effect edit staged.
    assert_eq!(
        pkg.operator("BookHotel").unwrap(),
        travel_pkg().operator("BookHotel").unwrap()
    );
}

#[test]
fn stage_reverse_conflict() {
    let mut pkg = travel_pkg();
    let mut l = Ledger::new(GovernanceConfig::default());
    let add = pre("BookHotel", "card_verified(?card)", EditAction::Add);
    let neg = pre("BookHotel", "not card_verified(?card)", EditAction::Add);
    assert_eq!(edit_key(&add), edit_key(&neg));
    assert!(add.negates(&neg));
    let (_, id) = l
        .check_and_stage(&add, prov("a"), 0.5, 0, &mut pkg)
        .unwrap();
    l.commit(id.unwrap(), 0, &mut pkg).unwrap();
    let (o, none) = l
        .check_and_stage(&neg, prov("b"), 0.5, 1, &mut pkg)
        .unwrap();
    assert_eq!((o, none), (StageOutcome::ReverseEscalateHuman, None));
    assert_eq!(l.entry(id.unwrap()).unwrap().status, EntryStatus::Committed);

    let (o, staged) = l
        .check_and_stage(&neg, prov("c"), 0.9, 2, &mut pkg)
        .unwrap();
    assert_eq!(o, StageOutcome::ReverseOverridden);
    assert!(staged.is_some());
    assert_eq!(
        l.entry(id.unwrap()).unwrap().status,
        EntryStatus::RolledBack
    );
}

#[test]
fn gate_decisions() {
    let cfg = GovernanceConfig::default();
    assert_eq!(
        hitl_gate(&breakdown(0.122, 0.8258), cfg.tau_conf, &cfg).tag,
        GateTag::AutoApprove
    );
    assert_eq!(
        hitl_gate(&breakdown(0.7, 0.8258), cfg.tau_conf, &cfg).tag,
        GateTag::QueueHuman
    );
    let low = hitl_gate(&breakdown(0.122, 0.4), cfg.tau_conf, &cfg);
    assert_eq!(low.tag, GateTag::QueueHuman);
    assert_eq!(low.reasons.len(), 1);
}

#[test]
fn gate_tightens_after_rollback() {
    let cfg = GovernanceConfig::default();
    assert_eq!(effective_tau_conf(&cfg, None), 0.5);
    assert!((effective_tau_conf(&cfg, Some(0)) - 0.6).abs() < 1e-12);
    assert!((effective_tau_conf(&cfg, Some(25)) - 0.55).abs() < 1e-12);
    assert_eq!(effective_tau_conf(&cfg, Some(50)), 0.5);
    // 0.52 passes normally but is queued right after a rollback.
    let b = breakdown(0.1, 0.52);
    assert_eq!(
        hitl_gate(&b, effective_tau_conf(&cfg, None), &cfg).tag,
        GateTag::AutoApprove
    );
    assert_eq!(
        hitl_gate(&b, effective_tau_conf(&cfg, Some(1)), &cfg).tag,
        GateTag::QueueHuman
    );
}

#[test]
fn canary_counts() {
    let cfg = GovernanceConfig::default();
    let low = canary_from_counts(5, 0, 0, &cfg);
    assert_eq!(
        (low.mode, low.csr, low.passed),
        (CanaryMode::LowPower, 1.0, true)
    );
    assert!(canary_from_counts(7, 0, 0, &cfg).passed);
    let strict = canary_from_counts(6, 1, 1, &cfg);
    assert_eq!(strict.mode, CanaryMode::Strict);
    assert_eq!(strict.csr, 0.8125);
    assert!(strict.passed);
    assert!(!canary_from_counts(6, 0, 2, &cfg).passed);
    assert!(
        !canary_from_counts(4, 0, 1, &cfg).passed,
        "low power rejects any failure"
    );
    assert!(!canary_from_counts(0, 0, 0, &cfg).passed);
}

#[test]
fn walkthrough_canary_replay() {
    let s = builtin_scenario("walkthrough").unwrap();
    let sandbox = ScenarioSandbox::new(&s);
    let cases: Vec<ReplayCase> = s.canary_suite["BookHotel"]
        .iter()
        .map(|c| ReplayCase {
            task_index: usize::MAX,
            state: s.case_state(&c.edit).unwrap(),
            call: c.call.clone(),
        })
        .collect();
    let cfg = GovernanceConfig::default();
    let base = s.domain.pkg().unwrap();
    let before: Vec<String> = cases.iter().map(|c| c.state.digest()).collect();
    assert!(!canary(&base, &cases, &sandbox, &cfg).passed);
    let mut patched = base.clone();
    patched
        .apply(&pre(
            "BookHotel",
            "not blocked_card(?card, ?dates)",
            EditAction::Add,
        ))
        .unwrap();
    let r = canary(&patched, &cases, &sandbox, &cfg);
    assert_eq!((r.n_canary, r.n_pass, r.mode), (5, 5, CanaryMode::LowPower));
    assert!(r.passed);
    let after: Vec<String> = cases.iter().map(|c| c.state.digest()).collect();
    assert_eq!(before, after);
}

#[test]
fn commit_rollback_restores_pkg() {
    let base = travel_pkg();
    let mut pkg = base.clone();
    let mut l = Ledger::new(GovernanceConfig::default());
    let p = pre("BookHotel", "card_verified(?card)", EditAction::Add);
    let (_, id) = l.check_and_stage(&p, prov("a"), 0.5, 0, &mut pkg).unwrap();
    let rho = l.commit(id.unwrap(), 0, &mut pkg).unwrap();
    assert_eq!(rho, 2.0 / 3.0);
    assert_eq!(pkg.version, base.version + 1);
    assert!(!pkg.same_structure(&base));
    let key = edit_key(&p);
    l.rollback(&key, "test", 1, &mut pkg).unwrap();
    assert!(pkg.same_structure(&base));
    assert_eq!(pkg.version, base.version + 2);
    assert!(l.rollback(&key, "again", 2, &mut pkg).is_err());
}

#[test]
fn commit_requires_staged_and_provenance() {
    let mut pkg = travel_pkg();
    let mut l = Ledger::new(GovernanceConfig::default());
    let p = pre("BookHotel", "card_verified(?card)", EditAction::Add);
    let mut bad = prov("a");
    bad.rationale.clear();
    let (_, id) = l.check_and_stage(&p, bad, 0.5, 0, &mut pkg).unwrap();
    assert!(l.commit(id.unwrap(), 0, &mut pkg).is_err());
    let q = l.queue(&p, prov("q"), "gate", false, vec![], 0, &mut pkg);
    assert!(q.is_ok());
    assert!(
        l.commit(q.unwrap(), 0, &mut pkg).is_err(),
        "queued entries skip no stage"
    );
}

#[test]
fn trust_sequence() {
    let mut pkg = travel_pkg();
    let mut l = Ledger::new(GovernanceConfig::default());
    let p = pre("BookHotel", "card_verified(?card)", EditAction::Add);
    let (_, id) = l.check_and_stage(&p, prov("a"), 0.5, 0, &mut pkg).unwrap();
    let id = id.unwrap();
    assert_eq!(l.commit(id, 0, &mut pkg).unwrap(), 2.0 / 3.0);
    let r = l.trust_update(id, true, &mut pkg).unwrap();
    assert_eq!(r.rho, 0.75);
    let mut last = r;
    for i in 0..9 {
        last = l.trust_update(id, false, &mut pkg).unwrap();
        assert_eq!(
            last.flag_rollback,
            i == 8,
            "flag after {} tasks",
            last.tasks
        );
    }
    assert_eq!((last.s, last.f, last.tasks), (1, 9, 10));
    assert_eq!(last.rho, 3.0 / 13.0);
}

fn restage(l: &mut Ledger, pkg: &mut ProcessKnowledgeGraph, p: &Patch, n: u64, rho: f64) -> u64 {
    let mut id = 0;
    for t in 0..n {
        let (_, staged) = l
            .check_and_stage(p, prov(&format!("r{t}")), rho, t, pkg)
            .unwrap();
        id = staged.unwrap();
        l.commit(id, t, pkg).unwrap();
    }
    id
}

#[test]
fn consolidate_net_add() {
    let base = travel_pkg();
    let mut pkg = base.clone();
    let mut l = Ledger::new(GovernanceConfig::default());
    let p = pre("BookHotel", "card_verified(?card)", EditAction::Add);
    let key = edit_key(&p);
    let id = restage(&mut l, &mut pkg, &p, 50, 0.5);
    assert!(
        !l.consolidate(&key, &mut pkg).unwrap(),
        "50 entries is under the limit"
    );
    let id2 = restage(&mut l, &mut pkg, &p, 1, 0.5);
    assert!(id2 > id);
    l.trust_update(id2, true, &mut pkg).unwrap();
    assert_eq!(l.entry(id2).unwrap().history.len(), 50);

    assert!(l.consolidate(&key, &mut pkg).unwrap());
    let e = l.entry(id2).unwrap();
    assert!(e.history.is_empty());
    assert_eq!(e.status, EntryStatus::Staged);
    assert_eq!(e.rho(), 2.0 / 3.0);
    assert_eq!(e.patch, p);

    let mut once = base.clone();
    once.apply(&p).unwrap();
    assert!(pkg.same_structure(&once));

    // Fresh canary then commit.
    l.commit(id2, 60, &mut pkg).unwrap();
    assert_eq!(l.entry(id2).unwrap().status, EntryStatus::Committed);
    assert!(pkg.same_structure(&once));
}

#[test]
fn consolidate_net_zero() {
    let base = travel_pkg();
    let mut pkg = base.clone();
    let mut l = Ledger::new(GovernanceConfig::default());
    let p = Patch {
        scope: "BookHotel".into(),
        edit_type: EditType::RefineEffect,
        body: PatchBody::Predicate("hotel_booked(?city, ?dates)".parse().unwrap()),
        target: "hotel_booked".into(),
        action: EditAction::Replace,
        rationale: "identity".into(),
    };
    let key = edit_key(&p);
    // An identity rename is its own reversal, so each restage must override.
    let id = restage(&mut l, &mut pkg, &p, 51, 0.9);
    assert!(l.consolidate(&key, &mut pkg).unwrap());
    assert!(l.entry(id).is_none());
    assert!(l.active(&key).is_none());
    assert!(pkg.same_structure(&base));
}

#[test]
fn review_deny_and_empty() {
    let mut pkg = travel_pkg();
    let mut l = Ledger::new(GovernanceConfig::default());
    assert!(l.review_list().is_empty());
    assert!(l.deny("nope", "x", &mut pkg).is_err());
    assert!(l.approve("nope", 0, &mut pkg).is_err());
    let p = pre("BookHotel", "card_verified(?card)", EditAction::Add);
    let id = l
        .queue(&p, prov("q"), "escalated", true, vec![], 0, &mut pkg)
        .unwrap();
    assert_eq!(l.review_list().len(), 1);
    let rho = l.deny(&edit_key(&p), "not needed", &mut pkg).unwrap();
    assert_eq!(rho, 2.0 / 13.0);
    let e = l.entry(id).unwrap();
    assert_eq!((e.status, e.trust.f), (EntryStatus::Denied, 10));
    assert_eq!(e.denial_rationale.as_deref(), Some("not needed"));
    assert!(l.review_list().is_empty());
}

#[test]
fn approve_escalated_auth_patch_reaches_canary() {
    let s = builtin_scenario("governance-activation-6").unwrap();
    let mut cfg = AgentConfig::named("full").unwrap();
    cfg.governance.human = HumanPolicy::Defer;
    let mut e = Engine::new(&s, cfg, 7).unwrap();
    let rec = e.run_task(0).unwrap();
    assert!(!rec.success);
    assert_eq!(rec.escalated, 1);
    let pending: Vec<_> = e.ledger.review_list().into_iter().cloned().collect();
    assert_eq!(pending.len(), 1);
    let item = &pending[0];
    assert_eq!(item.status, EntryStatus::Escalated);
    assert_eq!(item.patch.edit_type, EditType::UpdateToolSchema);

    let base = e.pkg.clone();
    let id = e.ledger.approve(&item.edit_key, 0, &mut e.pkg).unwrap();
    let staged = e.ledger.entry(id).unwrap();
    assert!(staged.approved && staged.status == EntryStatus::Staged);
    assert_eq!(staged.rho(), 7.0 / 8.0);

    let mut patched = base.clone();
    patched.apply(&item.patch).unwrap();
    let cases: Vec<ReplayCase> = s
        .canary_suite
        .get(&item.patch.scope)
        .map(|cs| {
            cs.iter()
                .map(|c| ReplayCase {
                    task_index: usize::MAX,
                    state: s.case_state(&c.edit).unwrap(),
                    call: c.call.clone(),
                })
                .collect()
        })
        .unwrap_or_default();
    let cases = if cases.is_empty() {
        e.pool
            .traces()
            .iter()
            .map(ratchet_core::fdka::replay_case)
            .collect()
    } else {
        cases
    };
    let report = canary(&patched, &cases, &ScenarioSandbox::new(&s), &e.ledger.cfg);
    assert!(report.passed, "{report:?}");
    e.ledger.commit(id, 0, &mut e.pkg).unwrap();
    assert!(e.pkg.same_structure(&patched));
    let rest: Vec<bool> = (1..s.tasks.len())
        .map(|i| e.run_task(i).unwrap().success)
        .collect();
    assert!(rest.iter().all(|&ok| ok), "{rest:?}");
}

#[test]
fn ledger_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.jsonl");
    let base = travel_pkg();
    let p = pre("BookHotel", "card_verified(?card)", EditAction::Add);
    let q = pre("RentCar", "card_verified(?card)", EditAction::Add);
    let (pkg, entries) = {
        let mut pkg = base.clone();
        let mut l = Ledger::open(&path, GovernanceConfig::default(), &mut pkg).unwrap();
        let (_, id) = l.check_and_stage(&p, prov("a"), 0.5, 0, &mut pkg).unwrap();
        l.commit(id.unwrap(), 0, &mut pkg).unwrap();
        l.trust_update(id.unwrap(), true, &mut pkg).unwrap();
        l.queue(&q, prov("b"), "gate", false, vec![], 1, &mut pkg)
            .unwrap();
        (pkg, l.entries().cloned().collect::<Vec<_>>())
    };
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 4);
    let kinds: Vec<String> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["event"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(kinds, ["staged", "committed", "trust_outcome", "queued"]);

    let mut again = base.clone();
    let l = Ledger::open(&path, GovernanceConfig::default(), &mut again).unwrap();
    assert_eq!(again, pkg);
    assert_eq!(l.entries().cloned().collect::<Vec<_>>(), entries);
    assert_eq!(l.review_list().len(), 1);
}

#[test]
fn corrupt_ledger_line_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.jsonl");
    std::fs::write(&path, "{\"event\":\"approved\",\"id\":0}\n").unwrap();
    let mut pkg = travel_pkg();
    assert!(Ledger::open(&path, GovernanceConfig::default(), &mut pkg).is_err());
    std::fs::write(&path, "not json\n").unwrap();
    let err = Ledger::open(&path, GovernanceConfig::default(), &mut pkg).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}

#[test]
fn veto_blocks_before_staging() {
    // No ledger event is written for a value-vetoed patch in a full run.
    let s = builtin_scenario("governance-audit-8").unwrap();
    let mut e = Engine::new(&s, AgentConfig::named("full").unwrap(), 7).unwrap();
    for i in 0..s.tasks.len() {
        e.run_task(i).unwrap();
    }
    let vetoed: BTreeSet<String> = e
        .events
        .iter()
        .filter_map(|ev| match ev {
            ratchet_core::harness::EngineEvent::Guardrails {
                task,
                value_veto: true,
                ..
            } => Some(task.to_string()),
            _ => None,
        })
        .collect();
    assert_eq!(vetoed.len(), 2);
    let staged_tasks: BTreeSet<String> = e
        .ledger
        .events()
        .iter()
        .filter_map(|ev| match ev {
            LedgerEvent::Staged { task, .. }
            | LedgerEvent::Queued { task, .. }
            | LedgerEvent::Escalated { task, .. } => Some(task.to_string()),
            _ => None,
        })
        .collect();
    assert!(
        vetoed.is_disjoint(&staged_tasks),
        "vetoed {vetoed:?} staged {staged_tasks:?}"
    );
    // Every commit was preceded by a canary for the same task.
    let mut canaried = BTreeSet::new();
    for ev in &e.events {
        match ev {
            ratchet_core::harness::EngineEvent::Canary { task, report } if report.passed => {
                canaried.insert(*task);
            }
            ratchet_core::harness::EngineEvent::Committed { task, .. } => {
                assert!(canaried.contains(task))
            }
            _ => {}
        }
    }
}
