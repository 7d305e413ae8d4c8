//! Promises and futures: eager dispatch of four promises to an engine role,
//! local work, then a guarded batch completion once all four results are in.

use std::sync::Arc;

use super::{expect, Outputs, PatternProgram, Workload};
use crate::ir::build::*;
use crate::ir::{Expr, FieldType, FoldKind, Handler, Program};
use crate::lattice::ScalarKind;
use crate::lowering::PlacementHints;
use crate::runtime::UdfRegistry;
use crate::sim::scenario::{NodeSpec, WorkItem};
use crate::value::{Value, MESSAGE_ID};

pub const NAME: &str = "futures_pattern";
pub const ENGINE_ROLE: &str = "engine";
pub const PROMISES: i64 = 4;

pub fn program() -> Program {
    Program {
        name: NAME.into(),
        data: vec![
            var_decl("waiting", FieldType::Scalar(ScalarKind::Bool), Some(Value::bool(false))),
            var_decl("x", FieldType::Scalar(ScalarKind::Int), Some(Value::int(0))),
        ],
        channels: vec![channel("output", &["result"])],
        handlers: vec![
            Handler::new(
                "start",
                vec![],
                vec![
                    send(
                        "promises",
                        comp(
                            vec![gen("i", range(lit(0), lit(PROMISES)))],
                            tuple(vec![tuple(vec![var(MESSAGE_ID), var("i")]), lit("f"), var("i")]),
                        ),
                    ),
                    assign(t_var("x"), call("g", vec![])),
                    assign(t_var("waiting"), lit(true)),
                ],
            ),
            Handler::new(
                "promises",
                vec![
                    param("handle", ScalarKind::Tuple),
                    param("f", ScalarKind::Str),
                    param("i", ScalarKind::Int),
                ],
                vec![send(
                    "futures",
                    record([
                        ("handle", var("handle")),
                        ("result", Expr::CallDyn {
                            func: Box::new(var("f")),
                            args: vec![var("i")],
                        }),
                    ]),
                )],
            ),
            Handler::new(
                "futures",
                vec![param("handle", ScalarKind::Tuple), param("result", ScalarKind::Any)],
                vec![
                    send(
                        "output",
                        record([(
                            "result",
                            fold(
                                FoldKind::ArrayAgg,
                                comp(
                                    vec![gen("fut", var("futures"))],
                                    tuple(vec![index(dot("fut", "handle"), lit(1)), dot("fut", "result")]),
                                ),
                            ),
                        )]),
                    ),
                    assign(t_var("waiting"), lit(false)),
                ],
            )
            .batch()
            .guarded(and(ge(len(var("futures")), lit(PROMISES)), var("waiting"))),
        ],
        udfs: vec![udf("f", 1, false), udf("g", 0, false)],
        ..Default::default()
    }
}

pub fn udfs() -> UdfRegistry {
    UdfRegistry::new()
        .with("f", |a| {
            let i = a.first().and_then(Value::as_int).ok_or("f takes an int")?;
            Ok(Value::int(i * i + 1))
        })
        .with("g", |_| Ok(Value::int(7)))
}

pub fn hints() -> PlacementHints {
    let mut h = PlacementHints::default();
    h.roles.insert("promises".into(), ENGINE_ROLE.into());
    h.nodes.insert(ENGINE_ROLE.into(), 1);
    h
}

pub fn futures_pattern() -> PatternProgram {
    PatternProgram {
        name: NAME,
        program: Arc::new(program()),
        udfs: udfs(),
        hints: hints(),
        nodes: vec![
            NodeSpec::new(crate::lowering::DEFAULT_ROLE, &["az0", "dc0", "rack0", "vm0"]),
            NodeSpec::new(ENGINE_ROLE, &["az0", "dc0", "rack0", "vm1"]),
        ],
        workload,
        oracle,
        observed: &["output"],
    }
}

pub fn workload(_seed: u64) -> Workload {
    Workload {
        items: vec![WorkItem::new(0, "start", [])],
        init: Default::default(),
    }
}

pub fn oracle(w: &Workload) -> Outputs {
    let f = |i: i64| i * i + 1;
    w.items
        .iter()
        .filter(|i| i.mailbox == "start")
        .map(|_| expect("output", serde_json::json!({ "result": (0..PROMISES).map(f).collect::<Vec<_>>() })))
        .collect()
}
