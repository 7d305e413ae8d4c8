#[path = "common/exprs.rs"]
mod exprs;

use pact_core::analysis::{calm_report, classify_expression, classify_statement, Coordination, MonoClass, Rule};
use pact_core::ir::build::*;
use pact_core::ir::{Handler, Program};
use pact_core::lattice::ScalarKind;
use pact_core::patterns::{self, actors, covid, futures};
use pact_core::sim::scenario::{Scenario, WorkItem};
use pact_core::sim::{simulate_with, sweep};
use pact_core::value::Value;
use proptest::prelude::*;

fn rules(c: &MonoClass) -> Vec<Rule> {
    c.reasons().iter().map(|r| r.rule.clone()).collect()
}

#[test]
fn tracker_classification() {
    let r = calm_report(&covid::program());
    for h in ["add_person", "add_contact", "trace", "diagnosed"] {
        assert!(r.handlers[h].class.is_monotone(), "{h}");
        assert_eq!(r.handlers[h].coordination, Coordination::CoordinationFree, "{h}");
    }
    let likelihood = &r.handlers["likelihood"];
    assert_eq!(rules(&likelihood.class), vec![Rule::UndeclaredUdf("covid_predict".into())]);
    assert_eq!(likelihood.coordination, Coordination::NeedsCoordination);
    assert!(r.needs_coordination("vaccinate"));
    assert!(rules(&r.handlers["vaccinate"].class).contains(&Rule::Assign));
    assert_eq!(r.summary.needs_coordination, 2);
    assert!(!r.summary.all_coordination_free);
}

#[test]
fn declared_monotone_udf_is_trusted() {
    let mut p = covid::program();
    p.udfs[0].monotone = true;
    let r = calm_report(&p);
    let h = &r.handlers["likelihood"];
    assert!(h.class.is_monotone());
    assert_eq!(h.trusted_udfs, vec!["covid_predict".to_string()]);
    assert_eq!(h.coordination, Coordination::CoordinationFree);
}

#[test]
fn expression_examples() {
    let p = covid::program();
    let transitive = &p.query("transitive").unwrap().bodies[1];
    assert!(classify_expression(&p, transitive).is_monotone());
    assert!(!classify_expression(&p, &sub(var("vaccine_count"), lit(1))).is_monotone());
    let negated = comp(
        vec![gen("q", var("people")), filter(not_in(dot("q", "pid"), lit(Value::empty_set())))],
        dot("q", "pid"),
    );
    let c = classify_expression(&p, &negated);
    assert!(rules(&c).contains(&Rule::Negation), "{c:?}");
}

#[test]
fn statement_examples() {
    let p = covid::program();
    let bound = ["pid"];
    let add = merge(t_table("people"), record([("pid", var("pid"))]));
    assert!(classify_statement(&p, &add, &bound).is_monotone());
    let dec = assign(t_var("vaccine_count"), sub(var("vaccine_count"), lit(1)));
    assert!(!classify_statement(&p, &dec, &bound).is_monotone());
    let relay = send("alert", comp(vec![gen("q", var("people"))], record([("pid", dot("q", "pid"))])));
    assert!(classify_statement(&p, &relay, &bound).is_monotone());
    assert!(!classify_statement(&p, &delete(t_row("people", vec![var("pid")])), &bound).is_monotone());
}

#[test]
fn empty_program_report() {
    let r = calm_report(&Program {
        name: "empty".into(),
        ..Default::default()
    });
    assert!(r.handlers.is_empty());
    assert!(r.summary.all_coordination_free);
}

#[test]
fn blocking_flags_are_non_monotone() {
    let f = calm_report(&futures::program());
    assert!(rules(&f.handlers["futures"].class).contains(&Rule::Assign));
    assert!(rules(&f.handlers["start"].class).contains(&Rule::Assign));
    let a = calm_report(&actors::program());
    assert!(a.handlers.values().any(|h| rules(&h.class).contains(&Rule::Assign)));
    assert!(a.handlers.iter().filter(|(_, h)| !h.class.is_monotone()).all(|(_, h)| !h.class.reasons().is_empty()));
}

#[test]
fn reports_are_deterministic() {
    for p in patterns::all() {
        let a = calm_report(&p.program).to_json_pretty();
        let reloaded = Program::from_json(&p.program.to_json_pretty()).unwrap();
        assert_eq!(a, calm_report(&reloaded).to_json_pretty());
        assert_eq!(a, calm_report(&p.program).to_json_pretty());
    }
}

fn filter_relay() -> Program {
    Program {
        name: "relay".into(),
        channels: vec![channel("out", &["v"])],
        handlers: vec![Handler::new(
            "relay",
            vec![param("v", ScalarKind::Int)],
            vec![send(
                "out",
                comp(vec![gen("m", var("relay")), filter(gt(dot("m", "v"), lit(2)))], record([("v", dot("m", "v"))])),
            )],
        )
        .batch()],
        ..Default::default()
    }
}

#[test]
fn filter_relay_is_coordination_free_and_confluent() {
    let p = std::sync::Arc::new(filter_relay());
    let r = calm_report(&p);
    assert_eq!(r.handlers["relay"].coordination, Coordination::CoordinationFree);

    let mut s = Scenario::new(pact_core::sim::scenario::ProgramRef::Inline(Box::new((*p).clone())), 0);
    s.workload = (0..8).map(|v| WorkItem::new(v as u64 % 3, "relay", [("v", Value::int(v))])).collect();
    s.network.dup_prob = 0.3;
    s.workload_seed = Some(1);
    let outs = sweep(0..100, |seed| {
        let mut s = s.clone();
        s.seed = seed;
        let f = simulate_with(&s, p.clone(), Default::default()).unwrap().result.unwrap();
        f.outputs()
    });
    assert_eq!(outs[0].len(), 5);
    assert!(outs.iter().all(|o| *o == outs[0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn negation_is_never_monotone(e in exprs::expr()) {
        let p = covid::program();
        let c = classify_expression(&p, &e);
        if exprs::has_negation(&e) {
            prop_assert!(!c.is_monotone(), "{:?}", e);
        }
        if !c.is_monotone() {
            prop_assert!(!c.reasons().is_empty());
        }
    }

    #[test]
    fn assign_and_delete_are_never_monotone(s in exprs::statement()) {
        let p = covid::program();
        let c = classify_statement(&p, &s, &["pid"]);
        if s.is_syntactically_non_monotone() {
            prop_assert!(!c.is_monotone());
        }
    }

    #[test]
    fn classification_is_deterministic(e in exprs::expr()) {
        let p = covid::program();
        prop_assert_eq!(classify_expression(&p, &e), classify_expression(&p, &e.clone()));
    }
}
