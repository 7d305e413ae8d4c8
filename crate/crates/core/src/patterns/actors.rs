//! Actors: spawn, a plain RPC method, and a method that blocks mid-way on a
//! second mailbox, split into two guarded handlers around a waiting flag.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{expect, single_node, Outputs, PatternProgram, Workload};
use crate::ir::build::*;
use crate::ir::{Expr, FoldKind, Handler, Program};
use crate::lattice::ScalarKind;
use crate::lowering::PlacementHints;
use crate::runtime::UdfRegistry;
use crate::sim::scenario::WorkItem;
use crate::value::{Value, MESSAGE_ID};

pub const NAME: &str = "actor_patterns";

/// Gap between the steps of one actor's script, above the largest default
/// network delay, so each step lands after the previous one.
pub const STEP: u64 = 50;

fn actor_field(f: &str) -> Expr {
    field(lookup("actors", vec![var("actor_id")]), f)
}

/// True when this message has the least id among the buffered messages of
/// `mailbox` for the same actor: pending messages drain one at a time in id
/// order.
fn oldest_pending(mailbox: &str) -> Expr {
    eq(
        var(MESSAGE_ID),
        fold(
            FoldKind::Min,
            comp(
                vec![gen("pending", var(mailbox)), filter(eq(dot("pending", "actor_id"), var("actor_id")))],
                dot("pending", MESSAGE_ID),
            ),
        ),
    )
}

pub fn program() -> Program {
    let mut waiting = scalar_field("waiting", ScalarKind::Bool);
    waiting.default = Some(Value::bool(false));
    Program {
        name: NAME.into(),
        classes: vec![class(
            "Actor",
            vec![
                scalar_field("actor_id", ScalarKind::Int),
                // Opaque continuation captured between the two halves of m.
                scalar_field("state", ScalarKind::Any),
                waiting,
            ],
            &["actor_id"],
        )],
        data: vec![table("actors", "Actor")],
        handlers: vec![
            Handler::new(
                "spawn",
                vec![],
                vec![
                    merge(t_table("actors"), record([("actor_id", var(MESSAGE_ID))])),
                    ret(var(MESSAGE_ID)),
                ],
            ),
            Handler::new(
                "do_foo",
                vec![param("actor_id", ScalarKind::Int), param("msg", ScalarKind::Any)],
                vec![ret(call("foo", vec![var("msg")]))],
            ),
            Handler::new(
                "m",
                vec![param("actor_id", ScalarKind::Int), param("msg", ScalarKind::Any)],
                vec![
                    assign(t_field("actors", vec![var("actor_id")], "state"), call("m_pre", vec![var("msg")])),
                    assign(t_field("actors", vec![var("actor_id")], "waiting"), lit(true)),
                ],
            )
            .guarded(and(
                and(has_key("actors", vec![var("actor_id")]), not(actor_field("waiting"))),
                oldest_pending("m"),
            )),
            Handler::new(
                "m_receive_mybox",
                vec![param("actor_id", ScalarKind::Int), param("newmsg", ScalarKind::Any)],
                vec![
                    ret(call("m_post", vec![actor_field("state"), var("newmsg")])),
                    assign(t_field("actors", vec![var("actor_id")], "waiting"), lit(false)),
                ],
            )
            .guarded(and(
                and(has_key("actors", vec![var("actor_id")]), actor_field("waiting")),
                oldest_pending("m_receive_mybox"),
            )),
        ],
        udfs: vec![udf("foo", 1, false), udf("m_pre", 1, false), udf("m_post", 2, false)],
        ..Default::default()
    }
}

fn int_arg(args: &[Value], i: usize) -> Result<i64, String> {
    args.get(i).and_then(Value::as_int).ok_or_else(|| format!("argument {i} must be an int"))
}

pub fn udfs() -> UdfRegistry {
    UdfRegistry::new()
        .with("foo", |a| Ok(Value::int(int_arg(a, 0)? + 1000)))
        .with("m_pre", |a| Ok(Value::int(int_arg(a, 0)? * 10)))
        .with("m_post", |a| Ok(Value::int(int_arg(a, 0)? + int_arg(a, 1)?)))
}

pub fn actor_patterns() -> PatternProgram {
    PatternProgram {
        name: NAME,
        program: Arc::new(program()),
        udfs: udfs(),
        hints: PlacementHints::default(),
        nodes: single_node(),
        workload,
        oracle,
        observed: &["spawn<response>", "do_foo<response>", "m_receive_mybox<response>"],
    }
}

/// Each actor is spawned with a fixed id, then runs a script of m /
/// m_receive_mybox pairs and RPCs, one step every `STEP` ticks. Actors run
/// concurrently.
pub fn workload(seed: u64) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    let mut next_id = 1;
    let mut id = || {
        next_id += 1;
        next_id
    };
    for a in 0..rng.gen_range(1..=4) {
        let actor = 100 * (a + 1);
        let start = rng.gen_range(0..10);
        items.push(WorkItem::new(start, "spawn", []).with_id(actor));
        let mut t = start + STEP;
        for _ in 0..rng.gen_range(1..=3) {
            let aid = ("actor_id", Value::int(actor));
            if rng.gen_bool(0.5) {
                items.push(WorkItem::new(t, "do_foo", [aid.clone(), ("msg", Value::int(rng.gen_range(0..50)))]).with_id(id()));
                t += STEP;
            }
            items.push(WorkItem::new(t, "m", [aid.clone(), ("msg", Value::int(rng.gen_range(0..50)))]).with_id(id()));
            t += STEP;
            items.push(WorkItem::new(t, "m_receive_mybox", [aid, ("newmsg", Value::int(rng.gen_range(0..50)))]).with_id(id()));
            t += STEP;
        }
    }
    Workload {
        items,
        init: Default::default(),
    }
}

/// Runs each actor's script sequentially.
pub fn oracle(w: &Workload) -> Outputs {
    let mut out = Outputs::new();
    let mut continuation: BTreeMap<i64, i64> = BTreeMap::new();
    let mut items: Vec<&WorkItem> = w.items.iter().collect();
    items.sort_by_key(|i| i.tick);
    for item in items {
        let int = |k: &str| item.payload[k].as_int().expect("int field");
        match item.mailbox.as_str() {
            "spawn" => {
                out.insert(expect("spawn<response>", serde_json::json!({ "payload": int(MESSAGE_ID) })));
            }
            "do_foo" => {
                out.insert(expect("do_foo<response>", serde_json::json!({ "payload": int("msg") + 1000 })));
            }
            "m" => {
                continuation.insert(int("actor_id"), int("msg") * 10);
            }
            "m_receive_mybox" => {
                let s = continuation.remove(&int("actor_id")).expect("receive follows m");
                out.insert(expect("m_receive_mybox<response>", serde_json::json!({ "payload": s + int("newmsg") })));
            }
            _ => {}
        }
    }
    out
}
