#![allow(dead_code)]

use pact_core::lattice::{bottom, merge, leq, LatticeValue, Scalar, Shape};
use proptest::prelude::*;

pub fn shapes() -> Vec<Shape> {
    vec![
        Shape::BoolOr,
        Shape::MaxInt,
        Shape::MinInt,
        Shape::SetUnion,
        Shape::map_of(Shape::MaxInt),
        Shape::map_of(Shape::SetUnion),
        Shape::pair(Shape::MaxInt, Shape::SetUnion),
    ]
}

fn scalar() -> impl Strategy<Value = Scalar> {
    prop_oneof![(-20i64..20).prop_map(Scalar::Int), "[a-d]{1,2}".prop_map(Scalar::Str)]
}

pub fn value(shape: &Shape) -> BoxedStrategy<LatticeValue> {
    match shape {
        Shape::BoolOr => any::<bool>().prop_map(LatticeValue::BoolOr).boxed(),
        Shape::MaxInt => any::<i64>().prop_map(LatticeValue::MaxInt).boxed(),
        Shape::MinInt => any::<i64>().prop_map(LatticeValue::MinInt).boxed(),
        Shape::SetUnion => prop::collection::btree_set(scalar(), 0..6)
            .prop_map(LatticeValue::SetUnion)
            .boxed(),
        Shape::MapUnion(v) => {
            let vs = (**v).clone();
            prop::collection::vec((scalar(), value(v)), 0..5)
                .prop_map(move |es| LatticeValue::map(vs.clone(), es).expect("homogeneous"))
                .boxed()
        }
        Shape::Pair(a, b) => (value(a), value(b)).prop_map(|(x, y)| LatticeValue::pair(x, y)).boxed(),
    }
}

pub fn triple(shape: &Shape) -> BoxedStrategy<(LatticeValue, LatticeValue, LatticeValue)> {
    (value(shape), value(shape), value(shape)).boxed()
}

/// Associativity, commutativity, idempotence, bottom identity, and the
/// order agreeing with merge.
pub fn check_laws(a: &LatticeValue, b: &LatticeValue, c: &LatticeValue) -> Result<(), String> {
    let m = |x: &LatticeValue, y: &LatticeValue| merge(x, y).map_err(|e| e.to_string());
    let l = |x: &LatticeValue, y: &LatticeValue| leq(x, y).map_err(|e| e.to_string());
    if m(&m(a, b)?, c)? != m(a, &m(b, c)?)? {
        return Err(format!("not associative: {a:?} {b:?} {c:?}"));
    }
    if m(a, b)? != m(b, a)? {
        return Err(format!("not commutative: {a:?} {b:?}"));
    }
    if m(a, a)? != *a {
        return Err(format!("not idempotent: {a:?}"));
    }
    if m(a, &bottom(&a.shape()))? != *a {
        return Err(format!("bottom is not an identity for {a:?}"));
    }
    let ab = m(a, b)?;
    if !l(a, &ab)? || !l(b, &ab)? {
        return Err(format!("merge is not an upper bound: {a:?} {b:?}"));
    }
    if l(a, b)? != (ab == *b) {
        return Err(format!("leq disagrees with merge: {a:?} {b:?}"));
    }
    if !l(a, a)? {
        return Err(format!("leq not reflexive: {a:?}"));
    }
    if l(a, b)? && l(b, c)? && !l(a, c)? {
        return Err(format!("leq not transitive: {a:?} {b:?} {c:?}"));
    }
    let json = serde_json::to_string(a).map_err(|e| e.to_string())?;
    let back: LatticeValue = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    if back != *a {
        return Err(format!("json round trip changed {a:?}"));
    }
    Ok(())
}
