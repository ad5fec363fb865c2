mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ratchet_core::envsim::{
    builtin_names, builtin_scenario, parse_scenario, EnvError, Environment, ExecutionResult,
    Persistence, Scenario, ScenarioSandbox, Status,
};
use ratchet_core::fdka::{ReplayCase, ReplayOutcome, Sandbox};
use ratchet_core::knowledge::{
    EditAction, EditType, GroundStep, Patch, PatchBody, ProcessKnowledgeGraph,
};
use ratchet_core::planner::{Planner, PlannerConfig};

fn plan_steps(
    s: &Scenario,
    env: &Environment,
    pkg: &ProcessKnowledgeGraph,
    i: usize,
) -> Vec<GroundStep> {
    let state = env.task_state(i).unwrap();
    let mut planner = Planner::new(PlannerConfig::default());
    let plan = planner
        .plan(&s.tasks[i].instruction(), pkg, &state, &BTreeSet::new())
        .unwrap();
    plan.ground_steps().expect("fully grounded plan")
}

/// Executes the task's plan, stopping at the first failure.
fn run_task(
    s: &Scenario,
    env: &Environment,
    pkg: &ProcessKnowledgeGraph,
    i: usize,
) -> Vec<ExecutionResult> {
    let mut state = env.task_state(i).unwrap();
    let mut ctx = env.task_context(i);
    let mut out = Vec::new();
    for step in plan_steps(s, env, pkg, i) {
        let r = env.execute(&step, &state, pkg, &mut ctx);
        let ok = r.is_success();
        state = r.new_state.clone();
        out.push(r);
        if !ok {
            break;
        }
    }
    out
}

fn schema_fix() -> Patch {
    Patch {
        scope: "BookFlight".into(),
        edit_type: EditType::UpdateToolSchema,
        body: PatchBody::Field("cabin_class:string".parse().unwrap()),
        target: "fare_class".into(),
        action: EditAction::Replace,
        rationale: "v2 rename".into(),
    }
}

fn hotel_guard() -> Patch {
    Patch {
        scope: "BookHotel".into(),
        edit_type: EditType::AddPrecondition,
        body: PatchBody::Predicate("not blocked_card(?card, ?dates)".parse().unwrap()),
        target: "pre".into(),
        action: EditAction::Add,
        rationale: "card blocked".into(),
    }
}

#[test]
fn stress_suite_shape() {
    let s = builtin_scenario("travel-stress-12").unwrap();
    assert_eq!(s.tasks.len(), 12);
    assert_eq!(s.holdout_indices(), (6..12).collect::<Vec<_>>());
    let env = Environment::new(&s, 7);
    let pkg = s.domain.pkg().unwrap();
    let target = s.target_class.clone().unwrap();
    let drift: Vec<usize> = (0..6)
        .filter(|&i| {
            run_task(&s, &env, &pkg, i)
                .last()
                .and_then(|r| r.error.as_ref())
                .is_some_and(|e| format!("BookFlight:{}", e.class) == target)
        })
        .collect();
    assert_eq!(drift, [0, 1, 2]);
}

#[test]
fn flight_drift_then_schema_patch() {
    let s = builtin_scenario("travel-stress-12").unwrap();
    let env = Environment::new(&s, 7);
    let mut pkg = s.domain.pkg().unwrap();
    let rs = run_task(&s, &env, &pkg, 0);
    let last = rs.last().unwrap();
    assert_eq!(last.status, Status::Failure);
    let err = last.error.as_ref().unwrap();
    assert_eq!(err.class, "ToolError:API-V2");
    assert!(!err.retriable);
    assert!(last.log.contains("ERR ToolError:API-V2"));

    // Persistent: the same call fails again.
    assert_eq!(
        run_task(&s, &env, &pkg, 0).last().unwrap().status,
        Status::Failure
    );

    pkg.apply(&schema_fix()).unwrap();
    for i in 0..s.tasks.len() {
        let rs = run_task(&s, &env, &pkg, i);
        assert!(
            rs.iter().all(ExecutionResult::is_success),
            "task {i}: {:?}",
            rs.last().unwrap().log
        );
    }
}

#[test]
fn transient_fails_once_per_task() {
    let s = builtin_scenario("ecommerce-25").unwrap();
    let (idx, inj) = s
        .failure_schedule
        .iter()
        .enumerate()
        .find(|(_, i)| i.persistence == Persistence::Transient)
        .unwrap();
    let env = Environment::new(&s, 7);
    let pkg = s.domain.pkg().unwrap();
    let task = (0..s.tasks.len())
        .find(|&t| inj.tasks.matches(t, s.task_class(t)))
        .unwrap();
    let mut state = env.task_state(task).unwrap();
    let mut ctx = env.task_context(task);
    let steps = plan_steps(&s, &env, &pkg, task);
    let at = steps
        .iter()
        .position(|g| g.operator == inj.operator)
        .unwrap();
    for g in &steps[..at] {
        let r = env.execute(g, &state, &pkg, &mut ctx);
        assert!(r.is_success());
        state = r.new_state;
    }
    let first = env.execute(&steps[at], &state, &pkg, &mut ctx);
    assert_eq!(first.status, Status::Failure, "injection {idx}");
    assert!(first.error.as_ref().unwrap().retriable);
    assert_eq!(first.new_state, state);
    let second = env.execute(&steps[at], &state, &pkg, &mut ctx);
    assert_eq!(second.status, Status::Success);
    // A fresh context for the same task fires again.
    let mut fresh = env.task_context(task);
    assert_eq!(
        env.execute(&steps[at], &state, &pkg, &mut fresh).status,
        Status::Failure
    );
}

#[test]
fn executor_rejects_bad_calls() {
    let s = builtin_scenario("walkthrough").unwrap();
    let env = Environment::new(&s, 7);
    let pkg = s.domain.pkg().unwrap();
    let state = env.task_state(0).unwrap();
    let mut ctx = env.task_context(0);
    let unknown = env.execute(&GroundStep::new("Teleport", &[]), &state, &pkg, &mut ctx);
    assert_eq!(unknown.status, Status::Failure);
    let mistyped = env.execute(
        &GroundStep::new("BookHotel", &["apr10_12", "sf", "corporate_card"]),
        &state,
        &pkg,
        &mut ctx,
    );
    assert_eq!(mistyped.status, Status::Failure);
    let unmet = env.execute(
        &GroundStep::new("BookHotel", &["sf", "apr10_12", "corporate_card"]),
        &state,
        &pkg,
        &mut ctx,
    );
    assert!(unmet.error.unwrap().message.contains("precondition unmet"));
    assert_eq!(ctx.calls, 3);
}

#[test]
fn load_errors() {
    let text = include_str!("../scenarios/travel-stress-12.json");
    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    v["tasks"] = serde_json::json!([]);
    let err = parse_scenario("empty", &v.to_string(), None).unwrap_err();
    assert!(
        matches!(err, EnvError::Invalid { ref field, .. } if field == "tasks"),
        "{err}"
    );

    let broken = text.replacen("\"tasks\"", "\"tasks\" 1", 1);
    match parse_scenario("broken", &broken, None).unwrap_err() {
        EnvError::Schema { line, column, .. } => assert!(line > 1 && column > 0),
        e => panic!("unexpected {e}"),
    }

    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    v["failure_schedule"][0]["surprise"] = serde_json::json!(true);
    assert!(parse_scenario("unknown field", &v.to_string(), None).is_err());

    assert!(matches!(
        builtin_scenario("nope"),
        Err(EnvError::UnknownScenario(_))
    ));
}

#[test]
fn load_from_directory_uses_local_domain() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("domains")).unwrap();
    let mut domain: serde_json::Value =
        serde_json::from_str(include_str!("../scenarios/domains/travel.json")).unwrap();
    domain["name"] = serde_json::json!("travel-local");
    std::fs::write(dir.path().join("domains/travel.json"), domain.to_string()).unwrap();
    let path = dir.path().join("walk.json");
    std::fs::write(&path, include_str!("../scenarios/walkthrough.json")).unwrap();
    let s = ratchet_core::envsim::resolve_scenario(path.to_str().unwrap()).unwrap();
    assert_eq!(s.domain.name, "travel-local");
}

#[test]
fn seeded_loads_are_identical() {
    for name in builtin_names() {
        let a = builtin_scenario(name).unwrap();
        let b = builtin_scenario(name).unwrap();
        assert_eq!(a, b);
        let (ea, eb) = (Environment::new(&a, 7), Environment::new(&b, 7));
        assert_eq!(ea.flip_tasks(), eb.flip_tasks());
        for i in 0..a.tasks.len() {
            assert_eq!(ea.task_state(i).unwrap(), eb.task_state(i).unwrap());
        }
    }
}

#[test]
fn stochastic_outcomes_depend_only_on_seed() {
    let s = builtin_scenario("travel-stochastic-25").unwrap();
    let pkg = s.domain.pkg().unwrap();
    let trace = |seed: u64| -> Vec<String> {
        let env = Environment::new(&s, seed);
        (0..s.tasks.len())
            .flat_map(|i| run_task(&s, &env, &pkg, i).into_iter().map(|r| r.log))
            .collect()
    };
    assert_eq!(trace(7), trace(7));
    let flips: BTreeSet<Vec<usize>> = [7u64, 13, 31, 99, 1234]
        .iter()
        .map(|&seed| {
            Environment::new(&s, seed)
                .flip_tasks()
                .iter()
                .copied()
                .collect()
        })
        .collect();
    assert!(flips.len() > 1, "policy flip window ignores the seed");
}

fn walkthrough_case(s: &Scenario, i: usize) -> ReplayCase {
    let c = &s.canary_suite["BookHotel"][i];
    ReplayCase {
        task_index: usize::MAX,
        state: s.case_state(&c.edit).unwrap(),
        call: c.call.clone(),
    }
}

#[test]
fn sandbox_replay_outcomes() {
    let s = builtin_scenario("walkthrough").unwrap();
    let sandbox = ScenarioSandbox::new(&s);
    let base = s.domain.pkg().unwrap();
    let case = walkthrough_case(&s, 0);
    assert_eq!(sandbox.replay(&case, &base), ReplayOutcome::Fail);

    let mut fixed = base.clone();
    fixed.apply(&hotel_guard()).unwrap();
    assert_eq!(sandbox.replay(&case, &fixed), ReplayOutcome::Pass);

    let mut irrelevant = base.clone();
    irrelevant
        .apply(&Patch {
            scope: "BookHotel".into(),
            edit_type: EditType::RefineEffect,
            body: PatchBody::Predicate("hotel_confirmed(?city, ?dates)".parse().unwrap()),
            target: "eff".into(),
            action: EditAction::Add,
            rationale: "unrelated".into(),
        })
        .unwrap();
    assert_eq!(sandbox.replay(&case, &irrelevant), ReplayOutcome::Fail);

    // A flight call is untouched by the hotel patch.
    let mut flight = case.clone();
    flight
        .state
        .insert("flight_available(ewr, may1_3)".parse().unwrap())
        .unwrap();
    flight.call = GroundStep::new("BookFlight", &["ewr", "may1_3", "corporate_card"]);
    assert_eq!(
        sandbox.replay(&flight, &base),
        sandbox.replay(&flight, &fixed)
    );
}

#[test]
fn sandbox_matches_brute_force_oracle() {
    let s = builtin_scenario("walkthrough").unwrap();
    let sandbox = ScenarioSandbox::new(&s);
    let mut pkg = s.domain.pkg().unwrap();
    pkg.apply(&hotel_guard()).unwrap();
    for i in 0..s.canary_suite["BookHotel"].len() {
        let case = walkthrough_case(&s, i);
        let want = common::case_value(&s, &pkg, &case);
        let got = match sandbox.replay(&case, &pkg) {
            ReplayOutcome::Pass => 1.0,
            ReplayOutcome::Mitigated => 0.5,
            ReplayOutcome::Fail => 0.0,
        };
        assert_eq!(got, want, "case {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sandbox_never_mutates_state(seed in any::<u64>(), case in 0usize..5) {
        let s = builtin_scenario("walkthrough").unwrap();
        let sandbox = ScenarioSandbox::new(&s);
        let base = s.domain.pkg().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch = common::random_patch(&mut rng, &base);
        let mut pkg = base.clone();
        prop_assume!(pkg.apply(&patch).is_ok());
        let c = walkthrough_case(&s, case);
        let before = (c.state.digest(), pkg.clone());
        let first = sandbox.replay(&c, &pkg);
        prop_assert_eq!(&before.0, &c.state.digest());
        prop_assert_eq!(&before.1, &pkg);
        prop_assert_eq!(first, sandbox.replay(&c, &pkg));
    }

    #[test]
    fn persistent_failures_recur_until_patched(task in 0usize..12, repeats in 1usize..4) {
        let s = builtin_scenario("travel-stress-12").unwrap();
        let env = Environment::new(&s, 7);
        let pkg = s.domain.pkg().unwrap();
        let first = run_task(&s, &env, &pkg, task).last().unwrap().clone();
        for _ in 0..repeats {
            let again = run_task(&s, &env, &pkg, task).last().unwrap().clone();
            prop_assert_eq!(&again, &first);
        }
    }
}
