mod common;

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;
use ratchet_core::envsim::builtin_scenario;
use ratchet_core::knowledge::{
    apply_patch, edit_key, EditAction, EditType, Patch, PatchBody, Predicate,
    ProcessKnowledgeGraph, SymbolicState, Term,
};

fn domain_pkg(i: usize) -> ProcessKnowledgeGraph {
    let name = ["travel-25", "ecommerce-25", "itsm-25"][i % 3];
    builtin_scenario(name).unwrap().domain.pkg().unwrap()
}

/// The edit that undoes `p`, written the way a proposer would.
fn inverse(p: &Patch) -> Patch {
    let mut q = p.clone();
    match p.action {
        EditAction::Add => q.action = EditAction::Remove,
        EditAction::Remove => q.action = EditAction::Add,
        EditAction::Replace => {
            q.target = p.body.name().to_string();
            match &mut q.body {
                PatchBody::Predicate(pr) => pr.name = p.target.clone(),
                PatchBody::Field(f) => f.name = p.target.clone(),
            }
        }
    }
    q
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,7}"
}

fn predicate() -> impl Strategy<Value = Predicate> {
    (
        ident(),
        prop::collection::vec((any::<bool>(), ident()), 0..4),
        any::<bool>(),
    )
        .prop_map(|(name, args, negated)| Predicate {
            name,
            args: args
                .into_iter()
                .map(|(var, a)| if var { Term::Var(a) } else { Term::Const(a) })
                .collect(),
            negated,
        })
}

fn ground_atom() -> impl Strategy<Value = Predicate> {
    (ident(), prop::collection::vec(ident(), 0..3)).prop_map(|(name, args)| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        Predicate::new(&name, &refs)
    })
}

#[test]
fn walkthrough_patch_shape() {
    let pkg = domain_pkg(0);
    let patch = Patch {
        scope: "BookHotel".into(),
        edit_type: EditType::AddPrecondition,
        body: PatchBody::Predicate("not blocked_card(?card, ?dates)".parse().unwrap()),
        target: "pre".into(),
        action: EditAction::Add,
        rationale: "card is blocked for the stay dates".into(),
    };
    let op = pkg.operator("BookHotel").unwrap();
    let new = apply_patch(op, &patch).unwrap();
    assert_eq!(new.pre.len(), op.pre.len() + 1);
    assert_eq!(
        new.pre.last().unwrap().to_string(),
        "not blocked_card(?card, ?dates)"
    );
    assert_eq!(edit_key(&patch).len(), 64);

    let json = serde_json::to_value(&patch).unwrap();
    assert_eq!(json["edit_type"], "ADD_PRECONDITION");
    assert_eq!(json["predicate"], "not blocked_card(?card, ?dates)");
    let back: Patch = serde_json::from_value(json).unwrap();
    assert_eq!(back, patch);
}

#[test]
fn unbound_variable_rejected() {
    let pkg = domain_pkg(0);
    let patch = Patch {
        scope: "BookHotel".into(),
        edit_type: EditType::AddPrecondition,
        body: PatchBody::Predicate("loyalty(?member)".parse().unwrap()),
        target: "pre".into(),
        action: EditAction::Add,
        rationale: String::new(),
    };
    assert!(apply_patch(pkg.operator("BookHotel").unwrap(), &patch).is_err());
}

#[test]
fn malformed_predicates() {
    for bad in ["", "p(", "p(a,)", "p(a) x", "$p(a)", "p(?)", "p(a b)"] {
        assert!(bad.parse::<Predicate>().is_err(), "{bad:?} parsed");
    }
    assert_eq!(
        "¬p(a)".parse::<Predicate>().unwrap().to_string(),
        "not p(a)"
    );
    assert_eq!("p".parse::<Predicate>().unwrap().to_string(), "p()");
}

#[test]
fn closed_world_state() {
    let mut s = SymbolicState::new();
    let f: Predicate = "paid(o1)".parse().unwrap();
    assert!(!s.holds(&f).unwrap());
    assert!(s.holds(&f.clone().negate()).unwrap());
    s.apply_effects(&[f.clone().negate(), f.clone()]).unwrap();
    assert!(s.holds(&f).unwrap());
    assert!(s.insert("paid(?o)".parse().unwrap()).is_err());
    assert!(s.holds(&"paid(?o)".parse().unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn apply_then_rollback_restores(seed in any::<u64>(), d in 0usize..3) {
        let base = domain_pkg(d);
        let mut rng = StdRng::seed_from_u64(seed);
        let patch = common::random_patch(&mut rng, &base);
        let mut pkg = base.clone();
        let before = base.operator(&patch.scope).unwrap().clone();
        match pkg.apply(&patch) {
            Ok(rb) => {
                prop_assert!(pkg.version > base.version);
                pkg.rollback(&patch.scope, &rb).unwrap();
                prop_assert!(pkg.same_structure(&base));
            }
            Err(_) => prop_assert!(pkg.same_structure(&base)),
        }
        prop_assert_eq!(base.operator(&patch.scope).unwrap(), &before);
    }

    #[test]
    fn inverse_shares_key_and_negates(seed in any::<u64>(), d in 0usize..3) {
        let base = domain_pkg(d);
        let mut rng = StdRng::seed_from_u64(seed);
        let p = common::random_patch(&mut rng, &base);
        let q = inverse(&p);
        prop_assert_eq!(edit_key(&p), edit_key(&q));
        prop_assert!(q.negates(&p) && p.negates(&q));
        if p.action == EditAction::Add {
            if let PatchBody::Predicate(pr) = &p.body {
                let mut flipped = p.clone();
                flipped.body = PatchBody::Predicate(pr.clone().negate());
                prop_assert!(flipped.negates(&p));
                prop_assert_eq!(edit_key(&flipped), edit_key(&p));
            }
        }
    }

    #[test]
    fn unrelated_scopes_never_negate(seed in any::<u64>(), d in 0usize..3) {
        let base = domain_pkg(d);
        let mut rng = StdRng::seed_from_u64(seed);
        let p = common::random_patch(&mut rng, &base);
        let mut q = inverse(&p);
        q.scope.push_str("_other");
        prop_assert!(!p.negates(&q));
        prop_assert_ne!(edit_key(&p), edit_key(&q));
    }

    #[test]
    fn patch_json_roundtrip(seed in any::<u64>(), d in 0usize..3) {
        let base = domain_pkg(d);
        let mut rng = StdRng::seed_from_u64(seed);
        let p = common::random_patch(&mut rng, &base);
        let back: Patch = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn predicate_display_parse_roundtrip(p in predicate()) {
        let text = p.to_string();
        let back: Predicate = text.parse().unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.to_string(), text);
    }

    #[test]
    fn negation_is_complement(facts in prop::collection::vec(ground_atom(), 0..8), q in ground_atom()) {
        let mut s = SymbolicState::new();
        for f in facts {
            s.insert(f).unwrap();
        }
        let pos = s.holds(&q).unwrap();
        prop_assert_eq!(s.holds(&q.clone().negate()).unwrap(), !pos);
        prop_assert_eq!(s.entails(&[q.clone(), q.clone().negate()]).unwrap(), false);
        prop_assert!(s.entails(&[]).unwrap());
    }

    #[test]
    fn effects_delete_before_add(q in ground_atom(), present in any::<bool>()) {
        let mut s = SymbolicState::new();
        if present {
            s.insert(q.clone()).unwrap();
        }
        s.apply_effects(&[q.clone(), q.clone().negate()]).unwrap();
        prop_assert!(s.holds(&q).unwrap());
    }
}
