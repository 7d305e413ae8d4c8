//! Reachability over a directed edge table: the recursive join used to
//! compare naive and semi-naive evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{expect, single_node, Outputs, PatternProgram, Workload};
use crate::ir::build::*;
use crate::ir::{Handler, Program};
use crate::lattice::ScalarKind;
use crate::lowering::PlacementHints;
use crate::runtime::UdfRegistry;
use crate::sim::scenario::WorkItem;
use crate::value::Value;

pub const NAME: &str = "transitive_closure";

pub fn program() -> Program {
    Program {
        name: NAME.into(),
        classes: vec![class(
            "Edge",
            vec![scalar_field("src", ScalarKind::Int), scalar_field("dst", ScalarKind::Int)],
            &["src", "dst"],
        )],
        data: vec![table("edges", "Edge")],
        queries: vec![query(
            "reach",
            vec![
                comp(vec![gen("e", var("edges"))], tuple(vec![dot("e", "src"), dot("e", "dst")])),
                comp(
                    vec![
                        gen_tuple(&["a", "b"], var("reach")),
                        gen("e", var("edges")),
                        filter(eq(dot("e", "src"), var("b"))),
                    ],
                    tuple(vec![var("a"), dot("e", "dst")]),
                ),
            ],
        )],
        handlers: vec![
            Handler::new(
                "add_edge",
                vec![param("src", ScalarKind::Int), param("dst", ScalarKind::Int)],
                vec![merge(t_table("edges"), record([("src", var("src")), ("dst", var("dst"))]))],
            ),
            Handler::new(
                "reachable",
                vec![param("src", ScalarKind::Int)],
                vec![ret(comp(
                    vec![gen_tuple(&["a", "b"], var("reach")), filter(eq(var("a"), var("src")))],
                    var("b"),
                ))],
            ),
        ],
        ..Default::default()
    }
}

pub fn transitive_closure() -> PatternProgram {
    PatternProgram {
        name: NAME,
        program: Arc::new(program()),
        udfs: UdfRegistry::new(),
        hints: PlacementHints::default(),
        nodes: single_node(),
        workload,
        oracle,
        observed: &["reachable<response>"],
    }
}

/// A random directed graph on at most 50 nodes.
pub fn random_graph(rng: &mut ChaCha8Rng) -> BTreeSet<(i64, i64)> {
    let n = rng.gen_range(1..=50i64);
    let m = rng.gen_range(0..=2 * n);
    (0..m).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect()
}

pub fn workload(seed: u64) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = random_graph(&mut rng);
    let mut items: Vec<WorkItem> = edges
        .iter()
        .map(|(a, b)| WorkItem::new(rng.gen_range(0..10), "add_edge", [("src", Value::int(*a)), ("dst", Value::int(*b))]))
        .collect();
    if let Some((a, _)) = edges.iter().next() {
        items.push(WorkItem::new(100, "reachable", [("src", Value::int(*a))]));
    }
    Workload {
        items,
        init: Default::default(),
    }
}

/// Pairs `(a, b)` with a non-empty path from `a` to `b`, by BFS from every
/// source.
pub fn closure(edges: &BTreeSet<(i64, i64)>) -> BTreeSet<(i64, i64)> {
    let mut adj: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
    for (a, b) in edges {
        adj.entry(*a).or_default().push(*b);
    }
    let mut out = BTreeSet::new();
    for &s in adj.keys() {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<i64> = adj[&s].clone();
        while let Some(x) = stack.pop() {
            if seen.insert(x) {
                stack.extend(adj.get(&x).into_iter().flatten());
            }
        }
        out.extend(seen.into_iter().map(|x| (s, x)));
    }
    out
}

pub fn oracle(w: &Workload) -> Outputs {
    let mut edges = BTreeSet::new();
    let mut asks = Vec::new();
    for item in &w.items {
        let int = |k: &str| item.payload[k].as_int().expect("int field");
        match item.mailbox.as_str() {
            "add_edge" => {
                edges.insert((int("src"), int("dst")));
            }
            "reachable" => asks.push(int("src")),
            _ => {}
        }
    }
    let c = closure(&edges);
    asks.into_iter()
        .map(|s| {
            let targets: Vec<i64> = c.iter().filter(|(a, _)| *a == s).map(|(_, b)| *b).collect();
            expect("reachable<response>", serde_json::json!({ "payload": { "$set": targets } }))
        })
        .collect()
}
