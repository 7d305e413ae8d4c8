use std::collections::BTreeSet;

use pact_core::ir::{stratify, Program};
use pact_core::lowering::{lower, lower_single, partition_index, route_mailboxes, LoweringError, PlacementHints, Route};
use pact_core::patterns::{covid, reach};
use pact_core::runtime::graph::{OpKind, OperatorGraph};
use pact_core::sim::scenario::{NetworkModel, NodeSpec, Scenario, WorkItem};
use pact_core::sim::{Cluster, TraceKind};
use pact_core::value::Value;

fn kinds_for(g: &OperatorGraph, handler: &str) -> Vec<&'static str> {
    g.operators
        .iter()
        .filter(|o| o.handler.as_deref() == Some(handler))
        .map(|o| match &o.kind {
            OpKind::MailboxIngress { .. } => "ingress",
            OpKind::Map { .. } => "map",
            OpKind::Filter { .. } => "filter",
            OpKind::Join { .. } => "join",
            OpKind::LatticeFold { .. } => "fold",
            OpKind::FixpointGroup { .. } => "fixpoint",
            OpKind::UdfOp { .. } => "udf",
            OpKind::MutationSink { .. } => "mutation",
            OpKind::SendEgress { .. } => "send",
            OpKind::Inspect { .. } => "inspect",
        })
        .collect()
}

#[test]
fn add_person_shape() {
    let g = lower_single(&covid::program()).unwrap();
    let k = kinds_for(&g, "add_person");
    assert_eq!(k.first(), Some(&"ingress"));
    assert_eq!(k.iter().filter(|x| **x == "mutation").count(), 1);
    assert_eq!(k.iter().filter(|x| **x == "send").count(), 1);
    for e in &g.edges {
        assert!(e.from < g.operators.len() && e.to < g.operators.len());
    }
}

#[test]
fn closure_lowers_to_a_fixpoint_group() {
    for p in [covid::program(), reach::program()] {
        let g = lower_single(&p).unwrap();
        let groups: Vec<_> = g
            .operators
            .iter()
            .filter_map(|o| match &o.kind {
                OpKind::FixpointGroup { members, .. } => Some((o.id, members.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(groups.len(), 1, "{}", p.name);
        let (gid, members) = &groups[0];
        assert!(!members.is_empty());
        for m in members {
            assert_eq!(g.op(*m).group, Some(*gid));
        }
    }
}

#[test]
fn empty_program_has_no_graphs() {
    let p = Program {
        name: "empty".into(),
        ..Default::default()
    };
    let plan = lower(&p, &stratify(&p).unwrap(), &PlacementHints::default()).unwrap();
    assert!(plan.graphs.is_empty());
    assert!(plan.routes.is_empty());
}

fn by_country(n: usize) -> PlacementHints {
    let mut h = PlacementHints::default();
    h.nodes.insert("main".into(), n);
    h.partitioned.insert("people".into());
    h
}

#[test]
fn partitioned_routing() {
    let p = covid::program();
    let routes = route_mailboxes(&p, &by_country(2)).unwrap();
    assert_eq!(
        routes["add_person"],
        Route::Partitioned {
            role: "main".into(),
            field: "country".into(),
            nodes: 2
        }
    );
    assert_eq!(routes["add_person<response>"], Route::ReplyTo);

    let countries = ["NZ", "FR", "JP", "BR", "US", "KE"];
    let mut s = Scenario::named(covid::NAME, 3);
    s.placement = by_country(2);
    s.nodes = vec![NodeSpec::new("main", &["az0"]), NodeSpec::new("main", &["az1"])];
    s.network = NetworkModel::fixed(1);
    s.workload = countries
        .iter()
        .enumerate()
        .map(|(i, c)| WorkItem::new(0, "add_person", [("pid", Value::int(i as i64)), ("country", Value::str(*c))]))
        .collect();
    let mut c = Cluster::new(s).unwrap();
    c.run_to_quiescence().unwrap();
    let mut landed = BTreeSet::new();
    for e in c.trace().iter().filter(|e| e.kind == TraceKind::Sent && e.payload["mailbox"] == "add_person") {
        let country = e.payload["row"]["country"].as_str().unwrap().to_string();
        let want = format!("node/{}", partition_index(&Value::str(country.clone()), 2));
        assert_eq!(e.payload["to"], want.as_str(), "{country}");
        landed.insert(want);
    }
    assert_eq!(landed.len(), 2, "all countries hashed to one node");
}

#[test]
fn single_node_routes_to_the_role() {
    let routes = route_mailboxes(&covid::program(), &by_country(1)).unwrap();
    assert_eq!(routes["add_person"], Route::Role { role: "main".into() });
    for n in 1..4 {
        assert_eq!(partition_index(&Value::str("NZ"), 1), 0);
        assert!(partition_index(&Value::int(n), n as usize) < n as usize);
    }
}

#[test]
fn unknown_role_is_an_error() {
    let mut h = PlacementHints::default();
    h.roles.insert("trace".into(), "tracer".into());
    assert_eq!(
        route_mailboxes(&covid::program(), &h),
        Err(LoweringError::UnknownRole("tracer".into()))
    );
    h.nodes.insert("tracer".into(), 1);
    let p = covid::program();
    let plan = lower(&p, &stratify(&p).unwrap(), &h).unwrap();
    assert_eq!(plan.graph_for("trace").unwrap().role, "tracer");
    assert_eq!(plan.graph_for("add_person").unwrap().role, "main");
}

#[test]
fn lowering_is_deterministic() {
    for pat in pact_core::patterns::all() {
        let strata = stratify(&pat.program).unwrap();
        let a = lower(&pat.program, &strata, &pat.hints).unwrap();
        let b = lower(&pat.program, &strata, &pat.hints).unwrap();
        assert_eq!(a.to_json_pretty(), b.to_json_pretty(), "{}", pat.name);
    }
}
