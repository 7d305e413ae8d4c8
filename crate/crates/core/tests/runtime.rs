use std::collections::BTreeSet;
use std::sync::Arc;

use pact_core::ir::build::*;
use pact_core::ir::{Handler, Program};
use pact_core::lattice::{Scalar, ScalarKind};
use pact_core::lowering::lower_single;
use pact_core::patterns::{covid, reach};
use pact_core::runtime::{RuntimeError, TickResult, Transducer, UdfRegistry};
use pact_core::value::{Message, Value};
use proptest::prelude::*;

fn msg<const N: usize>(mailbox: &str, fields: [(&str, Value); N]) -> Message {
    let row = Value::row(fields);
    Message::new(mailbox, row.as_row().unwrap().clone())
}

fn engines(p: &Program, udfs: &UdfRegistry) -> Vec<Transducer> {
    let p = Arc::new(p.clone());
    let graph = lower_single(&p).unwrap();
    vec![
        Transducer::interpreter(p.clone(), udfs.clone()).unwrap(),
        Transducer::graph(p, graph, udfs.clone()),
    ]
}

fn payloads(r: &TickResult, mailbox: &str) -> Vec<serde_json::Value> {
    r.outbound
        .iter()
        .filter(|o| o.mailbox == mailbox)
        .map(|o| o.row["payload"].to_json())
        .collect()
}

fn counter() -> Program {
    Program {
        name: "counter".into(),
        classes: vec![class("P", vec![scalar_field("pid", ScalarKind::Int)], &["pid"])],
        data: vec![table("people", "P")],
        handlers: vec![
            Handler::new(
                "add",
                vec![param("pid", ScalarKind::Int)],
                vec![merge(t_table("people"), record([("pid", var("pid"))]))],
            ),
            Handler::new("size", vec![], vec![ret(count(var("people")))]),
        ],
        ..Default::default()
    }
}

#[test]
fn merges_are_visible_next_tick() {
    for mut t in engines(&counter(), &UdfRegistry::new()) {
        let r = t.tick(vec![msg("add", [("pid", Value::int(7))]), msg("size", [])]).unwrap();
        assert_eq!(payloads(&r, "size<response>"), vec![serde_json::json!(0)]);
        let r = t.tick(vec![msg("size", [])]).unwrap();
        assert_eq!(payloads(&r, "size<response>"), vec![serde_json::json!(1)]);
    }
}

#[test]
fn sends_leave_in_the_tick_result_only() {
    for mut t in engines(&counter(), &UdfRegistry::new()) {
        let r = t.tick(vec![msg("size", [])]).unwrap();
        assert_eq!(r.outbound.len(), 1);
        assert!(t.state().mailboxes.is_empty());
    }
}

#[test]
fn handled_messages_are_consumed() {
    let p = covid::program();
    for mut t in engines(&p, &covid::udfs()) {
        t.tick(vec![msg("add_person", [("pid", Value::int(1)), ("country", Value::str("fr"))])])
            .unwrap();
        assert_eq!(t.state().buffered(), 0);
    }
}

fn contacts(t: &mut Transducer, pairs: &[(i64, i64)]) {
    let msgs = pairs
        .iter()
        .map(|(a, b)| msg("add_contact", [("id1", Value::int(*a)), ("id2", Value::int(*b))]))
        .collect();
    t.tick(msgs).unwrap();
}

fn transitive_pairs(t: &Transducer) -> BTreeSet<(i64, i64)> {
    let v = t.eval_with(&var("transitive"), &[]).unwrap();
    v.as_set()
        .unwrap()
        .iter()
        .map(|x| match x.as_scalar() {
            Some(Scalar::Tuple(items)) => (items[0].as_int().unwrap(), items[1].as_int().unwrap()),
            other => panic!("not a pair: {other:?}"),
        })
        .collect()
}

fn symmetric_bfs(edges: &[(i64, i64)]) -> BTreeSet<(i64, i64)> {
    let directed: BTreeSet<(i64, i64)> = edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    reach::closure(&directed)
}

#[test]
fn chain_closure_within_one_tick() {
    for mut t in engines(&covid::program(), &covid::udfs()) {
        contacts(&mut t, &[(1, 2), (2, 3)]);
        let r = t.tick(vec![msg("trace", [("pid", Value::int(1))])]).unwrap();
        assert_eq!(payloads(&r, "trace<response>"), vec![serde_json::json!({ "$set": [2, 3] })]);
    }
}

#[test]
fn complete_graph_has_twelve_pairs() {
    let k4: Vec<(i64, i64)> = (1..=4).flat_map(|a| (a + 1..=4).map(move |b| (a, b))).collect();
    for mut t in engines(&covid::program(), &covid::udfs()) {
        contacts(&mut t, &k4);
        let self_free: BTreeSet<_> = transitive_pairs(&t).into_iter().filter(|(a, b)| a != b).collect();
        assert_eq!(self_free.len(), 12);
        assert_eq!(transitive_pairs(&t), symmetric_bfs(&k4));
    }
}

#[test]
fn chains_match_bfs() {
    for n in [1i64, 2, 5, 17, 50] {
        let chain: Vec<(i64, i64)> = (1..n).map(|i| (i, i + 1)).collect();
        let want = symmetric_bfs(&chain);
        for mut t in engines(&covid::program(), &covid::udfs()) {
            contacts(&mut t, &chain);
            assert_eq!(transitive_pairs(&t), want, "chain of {n}");
            let self_free = transitive_pairs(&t).into_iter().filter(|(a, b)| a != b).count() as i64;
            assert_eq!(self_free, if n > 1 { n * (n - 1) } else { 0 });
        }
    }
}

#[test]
fn empty_input_settles_in_one_round() {
    let p = reach::program();
    for mut t in engines(&p, &UdfRegistry::new()) {
        let r = t.tick(vec![msg("reachable", [("src", Value::int(0))])]).unwrap();
        assert_eq!(payloads(&r, "reachable<response>"), vec![serde_json::json!({ "$set": [] })]);
        assert_eq!(r.iterations, 1);
    }
    let graph = lower_single(&p).unwrap();
    let mut t = Transducer::graph(Arc::new(p), graph, UdfRegistry::new());
    let r = t.tick(vec![]).unwrap();
    assert!(r.outbound.is_empty());
}

fn naturals() -> Program {
    Program {
        name: "naturals".into(),
        queries: vec![query(
            "nat",
            vec![
                comp(vec![gen("x", range(lit(0), lit(1)))], var("x")),
                comp(vec![gen("n", var("nat"))], add(var("n"), lit(1))),
            ],
        )],
        handlers: vec![Handler::new("probe", vec![], vec![ret(count(var("nat")))])],
        ..Default::default()
    }
}

#[test]
fn unbounded_recursion_hits_the_cap() {
    for mut t in engines(&naturals(), &UdfRegistry::new()) {
        t.options.iteration_cap = 50;
        match t.tick(vec![msg("probe", [])]) {
            Err(RuntimeError::FixpointDivergence { cap, .. }) => assert_eq!(cap, 50),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert_eq!(t.state().buffered(), 0);
    }
}

#[test]
fn udf_memoized_per_tick() {
    let p = covid::program();
    for mut t in engines(&p, &covid::udfs()) {
        t.tick(vec![msg("add_person", [("pid", Value::int(1)), ("country", Value::str("fr"))])])
            .unwrap();
        let person = t.eval_with(&lookup("people", vec![lit(1)]), &[]).unwrap();
        let calls = vec![vec![person.clone()], vec![person.clone()], vec![person]];
        assert_eq!(t.memo_probe("covid_predict", &calls).unwrap(), (1, 3));

        let asks: Vec<Message> = (0..3)
            .map(|i| msg("likelihood", [("pid", Value::int(1)), ("message_id", Value::int(100 + i))]))
            .collect();
        let before = t.state().udf_invocations.get("covid_predict").copied().unwrap_or(0);
        let r = t.tick(asks).unwrap();
        assert_eq!(payloads(&r, "likelihood<response>").len(), 3);
        assert_eq!(t.state().udf_invocations["covid_predict"] - before, 1);
    }
}

#[test]
fn assign_conflicts_are_errors() {
    let p = Program {
        name: "conflict".into(),
        data: vec![var_decl("n", pact_core::ir::FieldType::Scalar(ScalarKind::Int), Some(Value::int(0)))],
        handlers: vec![Handler::new(
            "set",
            vec![param("v", ScalarKind::Int)],
            vec![assign(t_var("n"), var("v"))],
        )],
        ..Default::default()
    };
    for mut t in engines(&p, &UdfRegistry::new()) {
        let r = t.tick(vec![msg("set", [("v", Value::int(1))]), msg("set", [("v", Value::int(2))])]);
        assert!(matches!(r, Err(RuntimeError::AmbiguousAssign(_))), "{r:?}");
        assert_eq!(t.state().vars["n"], Value::int(0));
    }
}

fn monotone_messages() -> impl Strategy<Value = Vec<Message>> {
    // Country is write-once, so it is a function of pid.
    let person = (1..8i64).prop_map(|pid| {
        msg("add_person", [("pid", Value::int(pid)), ("country", Value::str(["fr", "jp", "us"][pid as usize % 3]))])
    });
    let contact = (1..8i64, 1..8i64).prop_map(|(a, b)| msg("add_contact", [("id1", Value::int(a)), ("id2", Value::int(b))]));
    let diag = (1..8i64).prop_map(|pid| msg("diagnosed", [("pid", Value::int(pid))]));
    prop::collection::vec(prop_oneof![person, contact, diag], 0..20)
}

fn shuffled_bodies(p: &Program, seed: u64) -> Program {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut q = p.clone();
    for h in &mut q.handlers {
        h.body.shuffle(&mut rng);
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batching_does_not_change_monotone_state(msgs in monotone_messages()) {
        let p = covid::program();
        for (mut all, mut one) in engines(&p, &covid::udfs()).into_iter().zip(engines(&p, &covid::udfs())) {
            all.tick(msgs.clone()).unwrap();
            for m in &msgs {
                one.tick(vec![m.clone()]).unwrap();
            }
            prop_assert_eq!(all.state().data_json(), one.state().data_json());
        }
    }

    #[test]
    fn statement_order_is_irrelevant(msgs in monotone_messages(), seed in any::<u64>()) {
        let p = covid::program();
        let q = shuffled_bodies(&p, seed);
        let mut a = engines(&p, &covid::udfs());
        let mut b = engines(&q, &covid::udfs());
        for (x, y) in a.iter_mut().zip(b.iter_mut()) {
            let rx = x.tick(msgs.clone()).unwrap();
            let ry = y.tick(msgs.clone()).unwrap();
            prop_assert_eq!(&rx.outbound, &ry.outbound);
            prop_assert_eq!(x.state().data_json(), y.state().data_json());
            let probe = vec![msg("trace", [("pid", Value::int(1))])];
            prop_assert_eq!(x.tick(probe.clone()).unwrap().outbound, y.tick(probe).unwrap().outbound);
        }
    }

    #[test]
    fn engines_agree_tick_by_tick(batches in prop::collection::vec(monotone_messages(), 1..4)) {
        let p = covid::program();
        let mut ts = engines(&p, &covid::udfs());
        for batch in batches {
            let a = ts[0].tick(batch.clone()).unwrap();
            let b = ts[1].tick(batch).unwrap();
            prop_assert_eq!(a.outbound, b.outbound);
            prop_assert_eq!(ts[0].state().data_json(), ts[1].state().data_json());
        }
    }
}
