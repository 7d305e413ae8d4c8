//! Join-semilattice values.
//!
//! Every piece of mergeable state in the stack is a [`LatticeValue`]: a tagged
//! value drawn from a small set of built-in lattices and their compositions.
//!
//! - `BoolOr`: `false < true`, merge is logical or.
//! - `MaxInt` / `MinInt`: integers ordered up / down, merge is max / min.
//! - `SetUnion`: finite sets of [`Scalar`]s, merge is union.
//! - `MapUnion`: finite maps from [`Scalar`] to a single value shape, merged
//!   pointwise with absent keys treated as bottom.
//! - `Pair`: the product lattice of two values.
//!
//! Merge is associative, commutative and idempotent for every variant, and
//! `leq(a, b)` holds exactly when `merge(a, b) == b`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// A plain data value. Ordered within each kind (tuples lexicographically) so
/// sets and maps iterate and serialize deterministically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Str(String),
    Tuple(Vec<Scalar>),
}

impl Scalar {
    pub fn str(s: impl Into<String>) -> Self {
        Scalar::Str(s.into())
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Scalar::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Scalar::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn kind(&self) -> ScalarKind {
        match self {
            Scalar::Bool(_) => ScalarKind::Bool,
            Scalar::Int(_) => ScalarKind::Int,
            Scalar::Str(_) => ScalarKind::Str,
            Scalar::Tuple(_) => ScalarKind::Tuple,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Str(s) => write!(f, "{s:?}"),
            Scalar::Tuple(items) => {
                write!(f, "(")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{item}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

impl From<&str> for Scalar {
    fn from(v: &str) -> Self {
        Scalar::Str(v.to_string())
    }
}

impl From<String> for Scalar {
    fn from(v: String) -> Self {
        Scalar::Str(v)
    }
}

/// Kind of a [`Scalar`], used in declarations. `Any` accepts every kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarKind {
    Bool,
    Int,
    Str,
    Tuple,
    Any,
}

impl ScalarKind {
    pub fn admits(self, s: &Scalar) -> bool {
        self == ScalarKind::Any || s.kind() == self
    }
}

/// The variant structure of a lattice value, without its contents.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Shape {
    BoolOr,
    MaxInt,
    MinInt,
    SetUnion,
    MapUnion(Box<Shape>),
    Pair(Box<Shape>, Box<Shape>),
}

impl Shape {
    pub fn map_of(value: Shape) -> Shape {
        Shape::MapUnion(Box::new(value))
    }

    pub fn pair(a: Shape, b: Shape) -> Shape {
        Shape::Pair(Box::new(a), Box::new(b))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::BoolOr => write!(f, "BoolOr"),
            Shape::MaxInt => write!(f, "MaxInt"),
            Shape::MinInt => write!(f, "MinInt"),
            Shape::SetUnion => write!(f, "SetUnion"),
            Shape::MapUnion(v) => write!(f, "MapUnion<{v}>"),
            Shape::Pair(a, b) => write!(f, "Pair<{a}, {b}>"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LatticeError {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },
    #[error("map value of shape {found} in map declared over {declared}")]
    HeterogeneousMap { declared: Shape, found: Shape },
}

/// A join-semilattice value. Immutable once built; all operations return new
/// values.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LatticeValue {
    BoolOr(bool),
    MaxInt(i64),
    MinInt(i64),
    SetUnion(BTreeSet<Scalar>),
    MapUnion {
        value_shape: Shape,
        entries: BTreeMap<Scalar, LatticeValue>,
    },
    Pair(Box<LatticeValue>, Box<LatticeValue>),
}

impl LatticeValue {
    pub fn set<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<Scalar>,
    {
        LatticeValue::SetUnion(items.into_iter().map(Into::into).collect())
    }

    /// Builds a map, rejecting values whose shape differs from `value_shape`.
    /// Keys bound to bottom are dropped: absent and bottom are the same.
    pub fn map<I>(value_shape: Shape, entries: I) -> Result<Self, LatticeError>
    where
        I: IntoIterator<Item = (Scalar, LatticeValue)>,
    {
        let mut out: BTreeMap<Scalar, LatticeValue> = BTreeMap::new();
        for (k, v) in entries {
            let found = v.shape();
            if found != value_shape {
                return Err(LatticeError::HeterogeneousMap {
                    declared: value_shape,
                    found,
                });
            }
            let merged = match out.remove(&k) {
                Some(prev) => merge(&prev, &v)?,
                None => v,
            };
            out.insert(k, merged);
        }
        out.retain(|_, v| !v.is_bottom());
        Ok(LatticeValue::MapUnion {
            value_shape,
            entries: out,
        })
    }

    pub fn pair(a: LatticeValue, b: LatticeValue) -> Self {
        LatticeValue::Pair(Box::new(a), Box::new(b))
    }

    pub fn shape(&self) -> Shape {
        match self {
            LatticeValue::BoolOr(_) => Shape::BoolOr,
            LatticeValue::MaxInt(_) => Shape::MaxInt,
            LatticeValue::MinInt(_) => Shape::MinInt,
            LatticeValue::SetUnion(_) => Shape::SetUnion,
            LatticeValue::MapUnion { value_shape, .. } => Shape::MapUnion(Box::new(value_shape.clone())),
            LatticeValue::Pair(a, b) => Shape::Pair(Box::new(a.shape()), Box::new(b.shape())),
        }
    }

    pub fn merge(&self, other: &LatticeValue) -> Result<LatticeValue, LatticeError> {
        merge(self, other)
    }

    pub fn leq(&self, other: &LatticeValue) -> Result<bool, LatticeError> {
        leq(self, other)
    }

    pub fn is_bottom(&self) -> bool {
        *self == bottom(&self.shape())
    }
}

fn mismatch(a: &LatticeValue, b: &LatticeValue) -> LatticeError {
    LatticeError::ShapeMismatch {
        left: a.shape(),
        right: b.shape(),
    }
}

/// Least upper bound of two values of the same shape.
pub fn merge(a: &LatticeValue, b: &LatticeValue) -> Result<LatticeValue, LatticeError> {
    use LatticeValue::*;
    Ok(match (a, b) {
        (BoolOr(x), BoolOr(y)) => BoolOr(*x || *y),
        (MaxInt(x), MaxInt(y)) => MaxInt(*x.max(y)),
        (MinInt(x), MinInt(y)) => MinInt(*x.min(y)),
        (SetUnion(x), SetUnion(y)) => {
            let (big, small) = if x.len() >= y.len() { (x, y) } else { (y, x) };
            let mut out = big.clone();
            out.extend(small.iter().cloned());
            SetUnion(out)
        }
        (
            MapUnion {
                value_shape: sx,
                entries: ex,
            },
            MapUnion {
                value_shape: sy,
                entries: ey,
            },
        ) => {
            if sx != sy {
                return Err(mismatch(a, b));
            }
            let mut out = ex.clone();
            for (k, v) in ey {
                let merged = match out.get(k) {
                    Some(prev) => merge(prev, v)?,
                    None => v.clone(),
                };
                out.insert(k.clone(), merged);
            }
            out.retain(|_, v| !v.is_bottom());
            MapUnion {
                value_shape: sx.clone(),
                entries: out,
            }
        }
        (Pair(a1, a2), Pair(b1, b2)) => Pair(Box::new(merge(a1, b1)?), Box::new(merge(a2, b2)?)),
        _ => return Err(mismatch(a, b)),
    })
}

/// Partial order induced by merge: `leq(a, b)` iff `merge(a, b) == b`.
pub fn leq(a: &LatticeValue, b: &LatticeValue) -> Result<bool, LatticeError> {
    use LatticeValue::*;
    Ok(match (a, b) {
        (BoolOr(x), BoolOr(y)) => !*x || *y,
        (MaxInt(x), MaxInt(y)) => x <= y,
        (MinInt(x), MinInt(y)) => x >= y,
        (SetUnion(x), SetUnion(y)) => x.is_subset(y),
        (
            MapUnion {
                value_shape: sx,
                entries: ex,
            },
            MapUnion {
                value_shape: sy,
                entries: ey,
            },
        ) => {
            if sx != sy {
                return Err(mismatch(a, b));
            }
            for (k, v) in ex {
                let below = match ey.get(k) {
                    Some(w) => leq(v, w)?,
                    None => v.is_bottom(),
                };
                if !below {
                    return Ok(false);
                }
            }
            true
        }
        (Pair(a1, a2), Pair(b1, b2)) => leq(a1, b1)? && leq(a2, b2)?,
        _ => return Err(mismatch(a, b)),
    })
}

/// Least element of a shape.
pub fn bottom(shape: &Shape) -> LatticeValue {
    match shape {
        Shape::BoolOr => LatticeValue::BoolOr(false),
        Shape::MaxInt => LatticeValue::MaxInt(i64::MIN),
        Shape::MinInt => LatticeValue::MinInt(i64::MAX),
        Shape::SetUnion => LatticeValue::SetUnion(BTreeSet::new()),
        Shape::MapUnion(v) => LatticeValue::MapUnion {
            value_shape: (**v).clone(),
            entries: BTreeMap::new(),
        },
        Shape::Pair(a, b) => LatticeValue::Pair(Box::new(bottom(a)), Box::new(bottom(b))),
    }
}

/// Merges a sequence of values, starting from the bottom of `shape`.
pub fn merge_all<'a, I>(shape: &Shape, values: I) -> Result<LatticeValue, LatticeError>
where
    I: IntoIterator<Item = &'a LatticeValue>,
{
    let mut acc = bottom(shape);
    for v in values {
        acc = merge(&acc, v)?;
    }
    Ok(acc)
}

/// Vector clocks as `MapUnion(node-id -> MaxInt)`.
pub fn vector_clock<I>(entries: I) -> LatticeValue
where
    I: IntoIterator<Item = (Scalar, i64)>,
{
    LatticeValue::map(
        Shape::MaxInt,
        entries.into_iter().map(|(k, v)| (k, LatticeValue::MaxInt(v))),
    )
    .expect("homogeneous by construction")
}

// Canonical JSON: {"variant": "...", "value": ...}. BTree containers give the
// sorted element order.
#[derive(Serialize, Deserialize)]
#[serde(tag = "variant", content = "value")]
enum Repr {
    BoolOr(bool),
    MaxInt(i64),
    MinInt(i64),
    SetUnion(Vec<Scalar>),
    MapUnion {
        shape: Shape,
        entries: Vec<(Scalar, LatticeValue)>,
    },
    Pair(Box<LatticeValue>, Box<LatticeValue>),
}

impl Serialize for LatticeValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let repr = match self {
            LatticeValue::BoolOr(b) => Repr::BoolOr(*b),
            LatticeValue::MaxInt(v) => Repr::MaxInt(*v),
            LatticeValue::MinInt(v) => Repr::MinInt(*v),
            LatticeValue::SetUnion(s) => Repr::SetUnion(s.iter().cloned().collect()),
            LatticeValue::MapUnion { value_shape, entries } => Repr::MapUnion {
                shape: value_shape.clone(),
                entries: entries.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            },
            LatticeValue::Pair(a, b) => Repr::Pair(a.clone(), b.clone()),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LatticeValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(match Repr::deserialize(deserializer)? {
            Repr::BoolOr(b) => LatticeValue::BoolOr(b),
            Repr::MaxInt(v) => LatticeValue::MaxInt(v),
            Repr::MinInt(v) => LatticeValue::MinInt(v),
            Repr::SetUnion(s) => LatticeValue::SetUnion(s.into_iter().collect()),
            Repr::MapUnion { shape, entries } => {
                LatticeValue::map(shape, entries).map_err(serde::de::Error::custom)?
            }
            Repr::Pair(a, b) => LatticeValue::Pair(a, b),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_map(entries: &[(&str, i64)]) -> LatticeValue {
        LatticeValue::map(
            Shape::MaxInt,
            entries.iter().map(|(k, v)| (Scalar::from(*k), LatticeValue::MaxInt(*v))),
        )
        .unwrap()
    }

    #[test]
    fn set_union_merge() {
        let a = LatticeValue::set([1i64, 2]);
        let b = LatticeValue::set([2i64, 3]);
        assert_eq!(merge(&a, &b).unwrap(), LatticeValue::set([1i64, 2, 3]));
    }

    #[test]
    fn max_merge() {
        let r = merge(&LatticeValue::MaxInt(3), &LatticeValue::MaxInt(5)).unwrap();
        assert_eq!(r, LatticeValue::MaxInt(5));
    }

    #[test]
    fn bottom_is_identity() {
        let samples = [
            LatticeValue::BoolOr(true),
            LatticeValue::MaxInt(-4),
            LatticeValue::MinInt(9),
            LatticeValue::set([1i64]),
            max_map(&[("a", 1)]),
            LatticeValue::pair(LatticeValue::MaxInt(2), LatticeValue::set(["x"])),
        ];
        for x in samples {
            assert_eq!(merge(&bottom(&x.shape()), &x).unwrap(), x);
        }
    }

    #[test]
    fn map_union_is_pointwise() {
        let a = max_map(&[("a", 1)]);
        let b = max_map(&[("a", 2), ("b", 0)]);
        assert_eq!(merge(&a, &b).unwrap(), max_map(&[("a", 2), ("b", 0)]));
    }

    #[test]
    fn leq_examples() {
        assert!(leq(&LatticeValue::set([1i64]), &LatticeValue::set([1i64, 2])).unwrap());
        assert!(!leq(&LatticeValue::MaxInt(5), &LatticeValue::MaxInt(3)).unwrap());
        let one = LatticeValue::set([1i64]);
        let two = LatticeValue::set([2i64]);
        assert!(!leq(&one, &two).unwrap());
        assert!(!leq(&two, &one).unwrap());
    }

    #[test]
    fn map_leq_treats_absent_as_bottom() {
        let with_bottom = LatticeValue::map(
            Shape::SetUnion,
            [(Scalar::from("k"), LatticeValue::set(Vec::<i64>::new()))],
        )
        .unwrap();
        assert!(leq(&with_bottom, &bottom(&Shape::map_of(Shape::SetUnion))).unwrap());
    }

    #[test]
    fn bottoms() {
        assert_eq!(bottom(&Shape::SetUnion), LatticeValue::SetUnion(BTreeSet::new()));
        assert_eq!(bottom(&Shape::BoolOr), LatticeValue::BoolOr(false));
        assert_eq!(
            bottom(&Shape::pair(Shape::MaxInt, Shape::SetUnion)),
            LatticeValue::pair(LatticeValue::MaxInt(i64::MIN), LatticeValue::SetUnion(BTreeSet::new()))
        );
    }

    #[test]
    fn mismatched_shapes_error() {
        let err = merge(&LatticeValue::MaxInt(1), &LatticeValue::MinInt(1)).unwrap_err();
        assert!(matches!(err, LatticeError::ShapeMismatch { .. }));
        assert!(leq(&LatticeValue::BoolOr(true), &LatticeValue::set([1i64])).is_err());
        let m1 = max_map(&[]);
        let m2 = bottom(&Shape::map_of(Shape::MinInt));
        assert!(merge(&m1, &m2).is_err());
    }

    #[test]
    fn heterogeneous_map_rejected() {
        let err = LatticeValue::map(Shape::MaxInt, [(Scalar::Int(1), LatticeValue::BoolOr(true))]);
        assert!(matches!(err, Err(LatticeError::HeterogeneousMap { .. })));
    }

    #[test]
    fn canonical_json() {
        let v = LatticeValue::set([3i64, 1, 2]);
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"{"variant":"SetUnion","value":[1,2,3]}"#);
        let m = max_map(&[("b", 2), ("a", 1)]);
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"variant":"MapUnion","value":{"shape":"MaxInt","entries":[["a",{"variant":"MaxInt","value":1}],["b",{"variant":"MaxInt","value":2}]]}}"#
        );
    }

    #[test]
    fn vector_clock_merges_pointwise() {
        let a = vector_clock([(Scalar::from("n1"), 3), (Scalar::from("n2"), 1)]);
        let b = vector_clock([(Scalar::from("n2"), 4)]);
        let m = merge(&a, &b).unwrap();
        assert_eq!(m, vector_clock([(Scalar::from("n1"), 3), (Scalar::from("n2"), 4)]));
        assert!(leq(&a, &m).unwrap() && leq(&b, &m).unwrap());
    }
}
