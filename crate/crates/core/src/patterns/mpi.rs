//! MPI-style collectives over a static agents table: bcast, scatter,
//! gather, reduce, allgather, allreduce, and alltoall.
//!
//! Gather-style requests fire once per request id: on the tick the last
//! contribution is visible, by the message with the largest index in the
//! mailbox, after which the request's rows are tombstoned.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{expect, single_node, Outputs, PatternProgram, Workload};
use crate::ir::build::*;
use crate::ir::{Expr, FoldKind, Handler, Program, Statement};
use crate::lattice::{Scalar, ScalarKind, Shape};
use crate::lowering::PlacementHints;
use crate::runtime::UdfRegistry;
use crate::sim::scenario::WorkItem;
use crate::value::Value;

pub const NAME: &str = "mpi_collectives";
const GATHERING: [&str; 4] = ["mpi_gather", "mpi_reduce", "mpi_allgather", "mpi_allreduce"];
pub const REDUCERS: [&str; 3] = ["add", "max", "min"];

fn agents_of(f: impl Fn(Expr) -> Expr) -> Expr {
    comp(vec![gen("a", var("agents"))], f(dot("a", "agent_id")))
}

fn chunk_size() -> Expr {
    div(len(var("arr")), var("acount"))
}

/// `arr[a*cs, (a+1)*cs)`.
fn chunk_for(agent: Expr) -> Expr {
    slice(
        var("arr"),
        mul(agent.clone(), chunk_size()),
        mul(add(agent, lit(1)), chunk_size()),
    )
}

/// `(ix, val)` pairs seen so far for this request: stored rows plus this
/// tick's messages on every gathering mailbox.
fn entries() -> Expr {
    comp(
        vec![gen_tuple(&["r", "i", "v"], var("gall")), filter(eq(var("r"), var("req_id")))],
        tuple(vec![var("i"), var("v")]),
    )
}

fn complete(mailbox: &str) -> Expr {
    let seen = len(comp(
        vec![gen_tuple(&["r", "i", "_"], var("gall")), filter(eq(var("r"), var("req_id")))],
        var("i"),
    ));
    let tombstoned = fold(
        FoldKind::Exists,
        comp(
            vec![gen("g", lookup("gathered", vec![var("req_id")])), filter(dot("g", "tombstone"))],
            lit(true),
        ),
    );
    let last_here = eq(
        var("ix"),
        fold(
            FoldKind::Max,
            comp(
                vec![gen("mm", var(mailbox)), filter(eq(dot("mm", "req_id"), var("req_id")))],
                dot("mm", "ix"),
            ),
        ),
    );
    and(and(ge(seen, var("acount")), not(tombstoned)), last_here)
}

fn gather_handler(name: &str, reduce: bool, all: bool) -> Handler {
    let mut params = vec![
        param("req_id", ScalarKind::Int),
        param("ix", ScalarKind::Int),
        param("val", ScalarKind::Any),
    ];
    if reduce {
        params.push(param("lambda", ScalarKind::Str));
    }
    let result = if reduce {
        fold(
            FoldKind::Reduce {
                func: Box::new(var("lambda")),
            },
            entries(),
        )
    } else {
        fold(FoldKind::ArrayAgg, entries())
    };
    let publish: Statement = if all {
        send("mpi_bcast", record([("msg_id", var("req_id")), ("msg", result)]))
    } else {
        send(&format!("{name}_result"), record([("req_id", var("req_id")), ("result", result)]))
    };
    Handler::new(
        name,
        params,
        vec![
            merge(
                t_table("gathered"),
                record([("request_id", var("req_id")), ("ix", var("ix")), ("val", var("val"))]),
            ),
            when(
                complete(name),
                vec![publish, merge(t_field("gathered", vec![var("req_id")], "tombstone"), lit(true))],
            ),
        ],
    )
}

pub fn program() -> Program {
    let mut gall = vec![comp(
        vec![gen("g", var("gathered"))],
        tuple(vec![dot("g", "request_id"), dot("g", "ix"), dot("g", "val")]),
    )];
    for mb in GATHERING {
        gall.push(comp(
            vec![gen("m", var(mb))],
            tuple(vec![dot("m", "req_id"), dot("m", "ix"), dot("m", "val")]),
        ));
    }
    Program {
        name: NAME.into(),
        classes: vec![
            class("Agent", vec![scalar_field("agent_id", ScalarKind::Int)], &["agent_id"]),
            class(
                "Gathered",
                vec![
                    scalar_field("request_id", ScalarKind::Int),
                    scalar_field("ix", ScalarKind::Int),
                    scalar_field("val", ScalarKind::Any),
                    lattice_field("tombstone", Shape::BoolOr),
                ],
                &["request_id", "ix"],
            ),
        ],
        data: vec![table("agents", "Agent"), table("gathered", "Gathered")],
        channels: vec![
            channel("mpi_bcast_channel", &["agent_id", "msg_id", "msg"]),
            channel("mpi_scatter_channel", &["agent_id", "req_id", "subarray"]),
            channel("mpi_gather_result", &["req_id", "result"]),
            channel("mpi_reduce_result", &["req_id", "result"]),
            channel("mpi_alltoall_channel", &["agent_id", "req_id", "from", "chunk"]),
        ],
        queries: vec![query("acount", vec![count(var("agents"))]), query("gall", gall)],
        handlers: vec![
            Handler::new(
                "mpi_bcast",
                vec![param("msg_id", ScalarKind::Int), param("msg", ScalarKind::Any)],
                vec![send(
                    "mpi_bcast_channel",
                    agents_of(|a| tuple(vec![a, var("msg_id"), var("msg")])),
                )],
            ),
            Handler::new(
                "mpi_scatter",
                vec![param("req_id", ScalarKind::Int), param("arr", ScalarKind::Tuple)],
                vec![send(
                    "mpi_scatter_channel",
                    if_(
                        gt(chunk_size(), lit(1)),
                        agents_of(|a| tuple(vec![a.clone(), var("req_id"), chunk_for(a)])),
                        comp(
                            vec![gen("a", var("agents")), filter(lt(dot("a", "agent_id"), len(var("arr"))))],
                            tuple(vec![dot("a", "agent_id"), var("req_id"), index(var("arr"), dot("a", "agent_id"))]),
                        ),
                    ),
                )],
            ),
            gather_handler("mpi_gather", false, false),
            gather_handler("mpi_reduce", true, false),
            gather_handler("mpi_allgather", false, true),
            gather_handler("mpi_allreduce", true, true),
            Handler::new(
                "mpi_alltoall",
                vec![
                    param("req_id", ScalarKind::Int),
                    param("ix", ScalarKind::Int),
                    param("arr", ScalarKind::Tuple),
                ],
                vec![send(
                    "mpi_alltoall_channel",
                    agents_of(|a| tuple(vec![a.clone(), var("req_id"), var("ix"), chunk_for(a)])),
                )],
            ),
        ],
        udfs: REDUCERS.iter().map(|r| udf(r, 2, false)).collect(),
        ..Default::default()
    }
}

pub fn reduce_op(name: &str, a: i64, b: i64) -> Option<i64> {
    match name {
        "add" => a.checked_add(b),
        "max" => Some(a.max(b)),
        "min" => Some(a.min(b)),
        _ => None,
    }
}

pub fn udfs() -> UdfRegistry {
    let mut r = UdfRegistry::new();
    for name in REDUCERS {
        r.register(name, move |args| {
            let a = args.first().and_then(Value::as_int).ok_or("expected ints")?;
            let b = args.get(1).and_then(Value::as_int).ok_or("expected ints")?;
            reduce_op(name, a, b).map(Value::int).ok_or_else(|| "overflow".to_string())
        });
    }
    r
}

pub fn mpi_collectives() -> PatternProgram {
    PatternProgram {
        name: NAME,
        program: Arc::new(program()),
        udfs: udfs(),
        hints: PlacementHints::default(),
        nodes: single_node(),
        workload,
        oracle,
        observed: &[
            "mpi_bcast_channel",
            "mpi_scatter_channel",
            "mpi_gather_result",
            "mpi_reduce_result",
            "mpi_alltoall_channel",
        ],
    }
}

pub fn agents_init(n: i64) -> crate::sim::scenario::InitData {
    let rows = (0..n)
        .map(|a| BTreeMap::from([("agent_id".to_string(), Value::int(a))]))
        .collect();
    crate::sim::scenario::InitData {
        tables: BTreeMap::from([("agents".to_string(), rows)]),
        vars: BTreeMap::new(),
    }
}

fn arr(values: &[i64]) -> Value {
    super::ints(values)
}

pub fn workload(seed: u64) -> Workload {
    sized_workload(seed, 16)
}

/// One request of every collective over `1..=max_agents` agents, with
/// random contents. Agents are the clients; every contribution arrives
/// within the first 10 ticks.
pub fn sized_workload(seed: u64, max_agents: i64) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_agents);
    let mut items = Vec::new();
    let mut req = 0;
    let mut next_req = || {
        req += 1;
        req
    };
    let at = |rng: &mut ChaCha8Rng| rng.gen_range(0..10);
    let client = |rng: &mut ChaCha8Rng| rng.gen_range(0..n) as usize;

    let r = next_req();
    let t = at(&mut rng);
    let c = client(&mut rng);
    items.push(WorkItem::new(t, "mpi_bcast", [("msg_id", Value::int(r)), ("msg", Value::int(rng.gen_range(0..100)))]).from_client(c));

    let r = next_req();
    let len = rng.gen_range(1..=3 * n);
    let values: Vec<i64> = (0..len).map(|_| rng.gen_range(-50..50)).collect();
    let t = at(&mut rng);
    let c = client(&mut rng);
    items.push(WorkItem::new(t, "mpi_scatter", [("req_id", Value::int(r)), ("arr", arr(&values))]).from_client(c));

    for mb in GATHERING {
        let r = next_req();
        let lambda = REDUCERS[rng.gen_range(0..REDUCERS.len())];
        for ix in 0..n {
            let val = Value::int(rng.gen_range(-1000..1000));
            let mut item = WorkItem::new(at(&mut rng), mb, [("req_id", Value::int(r)), ("ix", Value::int(ix)), ("val", val)]);
            if mb.ends_with("reduce") {
                item.payload.insert("lambda".into(), Value::str(lambda));
            }
            items.push(item.from_client(ix as usize));
        }
    }

    let r = next_req();
    let per = rng.gen_range(1..=3);
    for ix in 0..n {
        let values: Vec<i64> = (0..per * n).map(|_| rng.gen_range(0..100)).collect();
        items.push(
            WorkItem::new(at(&mut rng), "mpi_alltoall", [("req_id", Value::int(r)), ("ix", Value::int(ix)), ("arr", arr(&values))])
                .from_client(ix as usize),
        );
    }
    Workload {
        items,
        init: agents_init(n),
    }
}

fn ints_of(v: &Value) -> Vec<i64> {
    match v {
        Value::Scalar(Scalar::Tuple(items)) => items.iter().map(|s| s.as_int().expect("int element")).collect(),
        _ => panic!("expected a tuple"),
    }
}

/// Sequential reference for every collective in the workload.
pub fn oracle(w: &Workload) -> Outputs {
    let n = w.init.tables.get("agents").map(Vec::len).unwrap_or(0) as i64;
    let mut out = Outputs::new();
    let mut groups: BTreeMap<(String, i64), (Option<String>, BTreeMap<i64, i64>)> = BTreeMap::new();
    let bcast = |out: &mut Outputs, msg_id: i64, msg: serde_json::Value| {
        for a in 0..n {
            out.insert(expect("mpi_bcast_channel", json!({ "agent_id": a, "msg_id": msg_id, "msg": msg })));
        }
    };
    for item in &w.items {
        let p = &item.payload;
        let int = |k: &str| p[k].as_int().expect("int field");
        match item.mailbox.as_str() {
            "mpi_bcast" => bcast(&mut out, int("msg_id"), p["msg"].to_json()),
            "mpi_scatter" => {
                let values = ints_of(&p["arr"]);
                let cs = values.len() as i64 / n;
                if cs > 1 {
                    for a in 0..n {
                        let chunk = &values[(a * cs) as usize..((a + 1) * cs) as usize];
                        out.insert(expect("mpi_scatter_channel", json!({ "agent_id": a, "req_id": int("req_id"), "subarray": chunk })));
                    }
                } else {
                    for a in 0..n.min(values.len() as i64) {
                        out.insert(expect(
                            "mpi_scatter_channel",
                            json!({ "agent_id": a, "req_id": int("req_id"), "subarray": values[a as usize] }),
                        ));
                    }
                }
            }
            "mpi_alltoall" => {
                let values = ints_of(&p["arr"]);
                let cs = values.len() as i64 / n;
                for a in 0..n {
                    let lo = ((a * cs) as usize).min(values.len());
                    let hi = (((a + 1) * cs) as usize).min(values.len());
                    out.insert(expect(
                        "mpi_alltoall_channel",
                        json!({ "agent_id": a, "req_id": int("req_id"), "from": int("ix"), "chunk": &values[lo..hi] }),
                    ));
                }
            }
            mb if GATHERING.contains(&mb) => {
                let g = groups.entry((mb.to_string(), int("req_id"))).or_default();
                g.0 = p.get("lambda").and_then(|l| l.as_scalar()).and_then(|s| s.as_str()).map(str::to_string);
                g.1.insert(int("ix"), int("val"));
            }
            _ => {}
        }
    }
    for ((mb, req), (lambda, vals)) in groups {
        if vals.len() as i64 != n {
            continue;
        }
        let ordered: Vec<i64> = vals.values().copied().collect();
        let result = match &lambda {
            Some(op) => json!(ordered
                .iter()
                .copied()
                .reduce(|a, b| reduce_op(op, a, b).expect("reducer"))
                .expect("non-empty")),
            None => json!(ordered),
        };
        match mb.as_str() {
            "mpi_allgather" | "mpi_allreduce" => bcast(&mut out, req, result),
            _ => {
                out.insert(expect(&format!("{mb}_result"), json!({ "req_id": req, "result": result })));
            }
        }
    }
    out
}
