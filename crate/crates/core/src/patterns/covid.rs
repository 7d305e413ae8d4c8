//! Contact tracing: people, symmetric contacts, transitive exposure, alerts
//! on diagnosis, a stubbed risk model, and a serializable vaccine allocator.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{expect, single_node, Outputs, PatternProgram, Workload};
use crate::ir::build::*;
use crate::ir::{AvailSpec, DomainLevel, FacetTable, FieldType, Handler, Program, TargetSpec};
use crate::lattice::{ScalarKind, Shape};
use crate::lowering::PlacementHints;
use crate::runtime::UdfRegistry;
use crate::sim::scenario::WorkItem;
use crate::value::Value;

pub const NAME: &str = "covid_tracker";
const COUNTRIES: [&str; 3] = ["fr", "jp", "us"];

fn person_class() -> crate::ir::ClassDecl {
    let mut c = class(
        "Person",
        vec![
            scalar_field("pid", ScalarKind::Int),
            scalar_field("country", ScalarKind::Str),
            ref_set_field("contacts", "Person"),
            lattice_field("covid", Shape::BoolOr),
            lattice_field("vaccinated", Shape::BoolOr),
        ],
        &["pid"],
    );
    c.partition = Some("country".into());
    c
}

fn transitive() -> crate::ir::QueryDef {
    query(
        "transitive",
        vec![
            comp(
                vec![gen("p", var("people")), gen("p1", dot("p", "contacts"))],
                tuple(vec![dot("p", "pid"), var("p1")]),
            ),
            comp(
                vec![
                    gen_tuple(&["p", "p1"], var("transitive")),
                    gen("q", lookup("people", vec![var("p1")])),
                    gen("p2", dot("q", "contacts")),
                ],
                tuple(vec![var("p"), var("p2")]),
            ),
        ],
    )
}

/// Everyone reachable from `pid` other than `pid` itself.
fn exposed(pid: crate::ir::Expr) -> crate::ir::Expr {
    comp(
        vec![
            gen_tuple(&["src", "dst"], var("transitive")),
            filter(eq(var("src"), pid.clone())),
            filter(ne(var("dst"), pid)),
        ],
        var("dst"),
    )
}

pub fn program() -> Program {
    let pid = || param("pid", ScalarKind::Int);
    let handlers = vec![
        Handler::new(
            "add_person",
            vec![pid(), param("country", ScalarKind::Str)],
            vec![
                merge(t_table("people"), record([("pid", var("pid")), ("country", var("country"))])),
                ret(lit("OK")),
            ],
        ),
        // Row merges rather than field merges, so a contact recorded before
        // its person still lands.
        Handler::new(
            "add_contact",
            vec![param("id1", ScalarKind::Int), param("id2", ScalarKind::Int)],
            vec![
                merge(t_row("people", vec![var("id1")]), record([("contacts", var("id2"))])),
                merge(t_row("people", vec![var("id2")]), record([("contacts", var("id1"))])),
                ret(lit("OK")),
            ],
        ),
        Handler::new("trace", vec![pid()], vec![ret(exposed(var("pid")))]),
        Handler::new(
            "diagnosed",
            vec![pid()],
            vec![
                merge(t_row("people", vec![var("pid")]), record([("covid", lit(true))])),
                send("alert", exposed(var("pid"))),
                ret(lit("OK")),
            ],
        ),
        Handler::new(
            "likelihood",
            vec![pid()],
            vec![ret(call("covid_predict", vec![lookup("people", vec![var("pid")])]))],
        ),
        Handler::new(
            "vaccinate",
            vec![pid()],
            vec![
                merge(t_field("people", vec![var("pid")], "vaccinated"), lit(true)),
                assign(t_var("vaccine_count"), sub(var("vaccine_count"), lit(1))),
                ret(lit("OK")),
            ],
        )
        .serializable(vec![ge(var("vaccine_count"), lit(0)), has_key("people", vec![var("pid")])]),
    ];
    let mut p = Program {
        name: NAME.into(),
        classes: vec![person_class()],
        data: vec![
            table("people", "Person"),
            var_decl("vaccine_count", FieldType::Scalar(ScalarKind::Int), Some(Value::int(0))),
        ],
        channels: vec![channel("alert", &["pid"])],
        queries: vec![transitive()],
        handlers,
        udfs: vec![udf("covid_predict", 1, false)],
        availability: FacetTable::default(),
        targets: FacetTable::default(),
    };
    p.availability.default = Some(AvailSpec {
        domain: DomainLevel::Az,
        failures: 2,
    });
    p.availability.overrides.insert(
        "likelihood".into(),
        AvailSpec {
            domain: DomainLevel::Az,
            failures: 1,
        },
    );
    p.targets.default = Some(TargetSpec {
        latency_ms: Some(100.0),
        cost: Some(0.01),
        features: BTreeSet::new(),
    });
    p.targets.overrides.insert(
        "likelihood".into(),
        TargetSpec {
            latency_ms: None,
            cost: Some(0.1),
            features: BTreeSet::from(["GPU".to_string()]),
        },
    );
    p
}

/// Stub risk model: 90 for a diagnosed person, 10 otherwise, 0 when unknown.
pub fn udfs() -> UdfRegistry {
    UdfRegistry::new().with("covid_predict", |args| {
        let rows = args.first().and_then(Value::as_set).ok_or("expected a set of rows")?;
        let Some(row) = rows.iter().next() else { return Ok(Value::int(0)) };
        let covid = row.field("covid").and_then(Value::as_bool).unwrap_or(false);
        Ok(Value::int(if covid { 90 } else { 10 }))
    })
}

pub fn covid_tracker() -> PatternProgram {
    PatternProgram {
        name: NAME,
        program: Arc::new(program()),
        udfs: udfs(),
        hints: PlacementHints::default(),
        nodes: single_node(),
        workload,
        oracle,
        observed: &["alert"],
    }
}

/// Monotone subset: people, random contacts, then diagnoses well after
/// every contact has landed.
pub fn workload(seed: u64) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=12i64);
    let mut items = Vec::new();
    for pid in 1..=n {
        let country = COUNTRIES[rng.gen_range(0..COUNTRIES.len())];
        let t = rng.gen_range(0..10);
        items.push(WorkItem::new(t, "add_person", [("pid", Value::int(pid)), ("country", Value::str(country))]));
    }
    let edges = rng.gen_range(0..=n + 2);
    for _ in 0..edges {
        let a = rng.gen_range(1..=n);
        let b = rng.gen_range(1..=n);
        if a != b {
            let t = rng.gen_range(0..10);
            items.push(WorkItem::new(t, "add_contact", [("id1", Value::int(a)), ("id2", Value::int(b))]));
        }
    }
    for _ in 0..rng.gen_range(1..=2) {
        let pid = rng.gen_range(1..=n);
        items.push(WorkItem::new(100, "diagnosed", [("pid", Value::int(pid))]));
    }
    Workload {
        items,
        init: Default::default(),
    }
}

/// Breadth-first search over the contact graph from each diagnosed person.
pub fn oracle(w: &Workload) -> Outputs {
    let mut adj: BTreeMap<i64, BTreeSet<i64>> = BTreeMap::new();
    let mut diagnosed = Vec::new();
    for item in &w.items {
        let int = |k: &str| item.payload[k].as_int().expect("int field");
        match item.mailbox.as_str() {
            "add_contact" => {
                let (a, b) = (int("id1"), int("id2"));
                adj.entry(a).or_default().insert(b);
                adj.entry(b).or_default().insert(a);
            }
            "diagnosed" => diagnosed.push(int("pid")),
            _ => {}
        }
    }
    let mut out = Outputs::new();
    for pid in diagnosed {
        for p in bfs(&adj, pid) {
            out.insert(expect("alert", serde_json::json!({ "pid": p })));
        }
    }
    out
}

pub fn bfs(adj: &BTreeMap<i64, BTreeSet<i64>>, start: i64) -> BTreeSet<i64> {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([start]);
    while let Some(x) = queue.pop_front() {
        for &y in adj.get(&x).into_iter().flatten() {
            if seen.insert(y) {
                queue.push_back(y);
            }
        }
    }
    seen.remove(&start);
    seen
}

/// `vaccinate` requests for `pids`, all at tick `at`, with fixed ids.
pub fn vaccinate_requests(pids: &[i64], at: u64) -> Vec<WorkItem> {
    pids.iter()
        .enumerate()
        .map(|(i, pid)| {
            WorkItem::new(at, "vaccinate", [("pid", Value::int(*pid))])
                .with_id(1000 + i as i64)
                .from_client(i)
        })
        .collect()
}

/// Outcome of one serial execution of vaccinate requests.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SerialOutcome {
    /// Message ids answered OK.
    pub committed: BTreeSet<i64>,
    pub count: i64,
    pub vaccinated: BTreeSet<i64>,
}

/// All outcomes of running `requests` (message id, pid) in every order
/// against `people` and an initial `count`.
pub fn serial_outcomes(requests: &[(i64, i64)], people: &BTreeSet<i64>, count: i64) -> BTreeSet<SerialOutcome> {
    let mut out = BTreeSet::new();
    let mut order: Vec<usize> = (0..requests.len()).collect();
    permute(&mut order, 0, &mut |ord| {
        let mut o = SerialOutcome {
            committed: BTreeSet::new(),
            count,
            vaccinated: BTreeSet::new(),
        };
        for &i in ord {
            let (id, pid) = requests[i];
            if o.count - 1 >= 0 && people.contains(&pid) {
                o.count -= 1;
                o.vaccinated.insert(pid);
                o.committed.insert(id);
            }
        }
        out.insert(o);
    });
    out
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

pub fn init_people(pids: &[i64], vaccines: i64) -> crate::sim::scenario::InitData {
    let rows = pids
        .iter()
        .map(|p| BTreeMap::from([("pid".to_string(), Value::int(*p)), ("country".to_string(), Value::str("us"))]))
        .collect();
    crate::sim::scenario::InitData {
        tables: BTreeMap::from([("people".to_string(), rows)]),
        vars: BTreeMap::from([("vaccine_count".to_string(), Value::int(vaccines))]),
    }
}

/// The vaccinate outcome a run produced, read from `node`'s state and the
/// responses clients received.
pub fn observed_outcome(f: &crate::sim::FinalState, node: usize) -> SerialOutcome {
    let state = f.node_state(node);
    let count = state["vars"]["vaccine_count"].as_i64().unwrap_or(i64::MIN);
    let vaccinated = state["tables"]["people"]
        .as_array()
        .into_iter()
        .flatten()
        .filter(|r| r["vaccinated"]["value"] == serde_json::json!(true))
        .filter_map(|r| r["pid"].as_i64())
        .collect();
    let committed = f
        .clients
        .values()
        .flatten()
        .filter(|m| m.mailbox == "vaccinate<response>" && m.row["payload"] == serde_json::json!("OK"))
        .filter_map(|m| m.row["message_id"].as_i64())
        .collect();
    SerialOutcome {
        committed,
        count,
        vaccinated,
    }
}

/// Handlers outside the coordination-free subset.
pub const NON_MONOTONE: [&str; 2] = ["likelihood", "vaccinate"];

