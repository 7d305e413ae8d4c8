use std::collections::BTreeSet;

use pact_core::patterns::covid;
use pact_core::sim::scenario::{NetworkModel, NodeSpec, Scenario, WorkItem};
use pact_core::sim::{simulate, Cluster, SimError, TraceEvent, TraceKind};
use pact_core::value::Value;
use proptest::prelude::*;

fn person(tick: u64, pid: i64) -> WorkItem {
    WorkItem::new(tick, "add_person", [("pid", Value::int(pid)), ("country", Value::str("NZ"))])
}

fn contact(tick: u64, a: i64, b: i64) -> WorkItem {
    WorkItem::new(tick, "add_contact", [("id1", Value::int(a)), ("id2", Value::int(b))])
}

fn of_kind(trace: &[TraceEvent], kind: TraceKind) -> Vec<&TraceEvent> {
    trace.iter().filter(|e| e.kind == kind).collect()
}

#[test]
fn delay_is_respected() {
    let mut s = Scenario::named(covid::NAME, 4);
    s.network = NetworkModel::fixed(2);
    s.workload = vec![person(3, 1)];
    let mut c = Cluster::new(s).unwrap();
    c.run_to_quiescence().unwrap();
    let sent = of_kind(c.trace(), TraceKind::Sent)[0];
    let delivered = of_kind(c.trace(), TraceKind::Delivered)[0];
    assert_eq!((sent.tick, delivered.tick), (3, 5));
    assert_eq!(sent.payload["deliver_at"], 5);
}

#[test]
fn add_person_settles_quickly() {
    let mut s = Scenario::named(covid::NAME, 1);
    s.network = NetworkModel::fixed(1);
    s.workload = vec![person(0, 1)];
    let f = Cluster::new(s).unwrap().run_to_quiescence().unwrap();
    assert!(f.tick <= 3, "took {}", f.tick);
    assert!(f.unanswered.is_empty());
}

fn monotone_workload() -> Vec<WorkItem> {
    let mut w: Vec<WorkItem> = (1..=5).map(|pid| person(0, pid)).collect();
    w.extend([contact(1, 1, 2), contact(2, 2, 3), contact(2, 4, 5)]);
    w.push(WorkItem::new(40, "diagnosed", [("pid", Value::int(1))]));
    w
}

#[test]
fn duplication_leaves_monotone_state_alone() {
    let mut once = Scenario::named(covid::NAME, 9);
    once.workload = monotone_workload();
    let mut twice = once.clone();
    twice.network.dup_prob = 1.0;

    let a = simulate(&once).unwrap();
    let b = simulate(&twice).unwrap();
    let sent = of_kind(&b.trace, TraceKind::Sent).len();
    assert_eq!(of_kind(&b.trace, TraceKind::Duplicated).len(), sent);
    assert_eq!(of_kind(&b.trace, TraceKind::Delivered).len(), 2 * sent);
    let (a, b) = (a.result.unwrap(), b.result.unwrap());
    assert_eq!(a.live_states(), b.live_states());
    assert!(b.responses.values().all(|n| *n >= 1));
}

#[test]
fn crash_drops_in_flight_messages() {
    let mut s = Scenario::named(covid::NAME, 2);
    s.network = NetworkModel::fixed(5);
    s.workload = vec![person(0, 1)];
    let mut c = Cluster::new(s).unwrap();
    c.inject_failure(&["az0".to_string()], 2).unwrap();
    let f = c.run_to_quiescence().unwrap();
    assert!(of_kind(c.trace(), TraceKind::Delivered).is_empty());
    assert_eq!(of_kind(c.trace(), TraceKind::Crashed).len(), 1);
    assert_eq!(f.unanswered.len(), 1);
    assert!(!f.nodes[0].alive);
}

fn racked() -> Scenario {
    let mut s = Scenario::named(covid::NAME, 1);
    s.nodes = vec![
        NodeSpec::new("main", &["az0", "dc0", "rack0", "vm0"]),
        NodeSpec::new("main", &["az0", "dc0", "rack0", "vm1"]),
        NodeSpec::new("main", &["az0", "dc1", "rack0", "vm0"]),
        NodeSpec::new("main", &["az1", "dc0", "rack0", "vm0"]),
    ];
    s
}

fn domain(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|p| p.to_string()).collect()
}

fn alive(c: &Cluster) -> Vec<bool> {
    (0..4).map(|i| c.is_alive(i)).collect()
}

#[test]
fn failure_domains_are_prefixes() {
    let mut c = Cluster::new(racked()).unwrap();
    c.inject_failure(&domain(&["az0"]), 0).unwrap();
    c.step().unwrap();
    assert_eq!(alive(&c), vec![false, false, false, true]);

    let mut c = Cluster::new(racked()).unwrap();
    c.inject_failure(&domain(&["az0", "dc0", "rack0", "vm1"]), 0).unwrap();
    c.step().unwrap();
    assert_eq!(alive(&c), vec![true, false, true, true]);

    let mut c = Cluster::new(racked()).unwrap();
    c.inject_failure(&domain(&["az0", "dc0"]), 0).unwrap();
    c.step().unwrap();
    assert_eq!(alive(&c), vec![false, false, true, true]);

    let mut c = Cluster::new(racked()).unwrap();
    assert_eq!(
        c.inject_failure(&domain(&["az0", "dc7"]), 0),
        Err(SimError::UnknownDomain(domain(&["az0", "dc7"])))
    );
}

#[test]
fn failure_after_quiescence_changes_nothing() {
    let mut s = racked();
    s.workload = monotone_workload();
    let mut c = Cluster::new(s).unwrap();
    let before = c.run_to_quiescence().unwrap();
    c.inject_failure(&domain(&["az0"]), before.tick + 5).unwrap();
    let after = c.run_to_quiescence().unwrap();
    assert_eq!(before, after);
    assert!(of_kind(c.trace(), TraceKind::Crashed).is_empty());
}

fn workload() -> impl Strategy<Value = Vec<WorkItem>> {
    let p = (0..15u64, 1..6i64).prop_map(|(t, pid)| person(t, pid));
    let c = (0..15u64, 1..6i64, 1..6i64).prop_map(|(t, a, b)| contact(t, a, b));
    let d = (1..6i64).prop_map(|pid| WorkItem::new(60, "diagnosed", [("pid", Value::int(pid))]));
    prop::collection::vec(prop_oneof![p, c, d], 0..15)
}

fn key(e: &TraceEvent) -> (String, String, String, i64) {
    let p = &e.payload;
    let id = p.get("message_id").or_else(|| p["row"].get("message_id"));
    (
        p["from"].as_str().unwrap().to_string(),
        p["to"].as_str().unwrap().to_string(),
        p["mailbox"].as_str().unwrap().to_string(),
        id.and_then(|v| v.as_i64()).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn deliveries_follow_their_sends(items in workload(), seed in any::<u64>(), dup in 0.0..0.5f64) {
        let mut s = Scenario::named(covid::NAME, seed);
        s.workload = items;
        s.network.dup_prob = dup;
        let run = simulate(&s).unwrap();
        prop_assert!(run.result.is_ok());
        let mut sent = BTreeSet::new();
        for e in &run.trace {
            match e.kind {
                TraceKind::Sent | TraceKind::Duplicated => {
                    sent.insert(key(e));
                }
                TraceKind::Delivered => prop_assert!(sent.contains(&key(e)), "{:?}", e),
                _ => {}
            }
        }
        let ticks: Vec<u64> = run.trace.iter().map(|e| e.tick).collect();
        prop_assert!(ticks.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn same_seed_same_run(items in workload(), seed in any::<u64>()) {
        let mut s = Scenario::named(covid::NAME, seed).with_azs(2);
        s.workload = items;
        s.network.dup_prob = 0.2;
        let a = simulate(&s).unwrap();
        let b = simulate(&s).unwrap();
        prop_assert_eq!(a.trace, b.trace);
        prop_assert_eq!(a.result, b.result);
    }
}
