//! Random expressions and statements over the tracker's data model.

#![allow(dead_code)]

use pact_core::ir::build::*;
use pact_core::ir::{BinOp, Expr, FoldKind, Statement, UnOp};
use proptest::prelude::*;

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (-5i64..5).prop_map(lit),
        Just(var("people")),
        Just(var("transitive")),
        Just(var("vaccine_count")),
        Just(var("pid")),
        Just(lookup("people", vec![var("pid")])),
    ]
}

pub fn expr() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(4, 24, 3, |inner| {
        prop_oneof![
            inner.clone().prop_map(not),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| not_in(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| add(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| eq(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| sub(a, b)),
            inner.clone().prop_map(count),
            inner.clone().prop_map(|a| fold(FoldKind::Min, a)),
            (inner.clone(), inner.clone()).prop_map(|(src, cond)| comp(vec![gen("x", src), filter(cond)], var("x"))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| tuple(vec![a, b])),
        ]
    })
}

pub fn statement() -> impl Strategy<Value = Statement> {
    prop_oneof![
        expr().prop_map(|e| merge(t_table("people"), e)),
        expr().prop_map(|e| assign(t_var("vaccine_count"), e)),
        expr().prop_map(|e| send("alert", e)),
        expr().prop_map(ret),
        Just(delete(t_row("people", vec![var("pid")]))),
        (expr(), expr()).prop_map(|(k, e)| delete(t_row("people", vec![k, e]))),
    ]
}

/// True when `e` contains negation anywhere.
pub fn has_negation(e: &Expr) -> bool {
    let mut found = false;
    e.visit(&mut |x| {
        if matches!(x, Expr::Unary { op: UnOp::Not, .. } | Expr::Binary { op: BinOp::NotIn, .. }) {
            found = true;
        }
    });
    found
}
