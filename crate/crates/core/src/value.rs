//! Dynamic values flowing through programs: scalars, lattice values, records
//! (table rows and messages) and sets produced by comprehensions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::lattice::{LatticeValue, Scalar};

/// A record with named fields. Shared, immutable.
pub type Row = Arc<BTreeMap<String, Value>>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Scalar(Scalar),
    Lattice(LatticeValue),
    Row(Row),
    Set(Arc<BTreeSet<Value>>),
}

impl Value {
    pub fn int(v: i64) -> Value {
        Value::Scalar(Scalar::Int(v))
    }

    pub fn bool(v: bool) -> Value {
        Value::Scalar(Scalar::Bool(v))
    }

    pub fn str(v: impl Into<String>) -> Value {
        Value::Scalar(Scalar::Str(v.into()))
    }

    pub fn tuple(items: Vec<Scalar>) -> Value {
        Value::Scalar(Scalar::Tuple(items))
    }

    pub fn set(items: impl IntoIterator<Item = Value>) -> Value {
        Value::Set(Arc::new(items.into_iter().collect()))
    }

    pub fn empty_set() -> Value {
        Value::Set(Arc::new(BTreeSet::new()))
    }

    pub fn row<I, K>(fields: I) -> Value
    where
        I: IntoIterator<Item = (K, Value)>,
        K: Into<String>,
    {
        Value::Row(Arc::new(fields.into_iter().map(|(k, v)| (k.into(), v)).collect()))
    }

    pub fn as_scalar(&self) -> Option<&Scalar> {
        match self {
            Value::Scalar(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        self.as_scalar().and_then(Scalar::as_int)
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Scalar(Scalar::Bool(b)) => Some(*b),
            Value::Lattice(LatticeValue::BoolOr(b)) => Some(*b),
            _ => None,
        }
    }

    pub fn as_row(&self) -> Option<&Row> {
        match self {
            Value::Row(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_set(&self) -> Option<&BTreeSet<Value>> {
        match self {
            Value::Set(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_lattice(&self) -> Option<&LatticeValue> {
        match self {
            Value::Lattice(l) => Some(l),
            _ => None,
        }
    }

    pub fn field(&self, name: &str) -> Option<&Value> {
        self.as_row().and_then(|r| r.get(name))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Value::Scalar(Scalar::Bool(_)) => "bool",
            Value::Scalar(Scalar::Int(_)) => "int",
            Value::Scalar(Scalar::Str(_)) => "str",
            Value::Scalar(Scalar::Tuple(_)) => "tuple",
            Value::Lattice(_) => "lattice",
            Value::Row(_) => "row",
            Value::Set(_) => "set",
        }
    }

    /// Canonical JSON. Rows become objects, sets become `{"$set": [...]}`,
    /// lattice values use their `{"variant", "value"}` encoding.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Scalar(s) => serde_json::to_value(s).expect("scalar encodes"),
            Value::Lattice(l) => serde_json::to_value(l).expect("lattice encodes"),
            Value::Row(r) => serde_json::Value::Object(r.iter().map(|(k, v)| (k.clone(), v.to_json())).collect()),
            Value::Set(s) => {
                let items = s.iter().map(Value::to_json).collect();
                serde_json::json!({ "$set": serde_json::Value::Array(items) })
            }
        }
    }

    pub fn from_json(json: &serde_json::Value) -> Result<Value, String> {
        use serde_json::Value as J;
        match json {
            J::Null => Err("null is not a value".into()),
            J::Bool(b) => Ok(Value::bool(*b)),
            J::Number(n) => n
                .as_i64()
                .map(Value::int)
                .ok_or_else(|| format!("number {n} is not a 64-bit integer")),
            J::String(s) => Ok(Value::str(s.clone())),
            J::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    match Value::from_json(item)? {
                        Value::Scalar(s) => out.push(s),
                        other => return Err(format!("tuple element must be scalar, found {}", other.kind_name())),
                    }
                }
                Ok(Value::tuple(out))
            }
            J::Object(map) => {
                if map.len() == 1 {
                    if let Some(J::Array(items)) = map.get("$set") {
                        let vals = items.iter().map(Value::from_json).collect::<Result<Vec<_>, _>>()?;
                        return Ok(Value::set(vals));
                    }
                }
                if map.len() == 2 && map.contains_key("variant") && map.contains_key("value") {
                    if let Ok(l) = serde_json::from_value::<LatticeValue>(json.clone()) {
                        return Ok(Value::Lattice(l));
                    }
                }
                let mut row = BTreeMap::new();
                for (k, v) in map {
                    row.insert(k.clone(), Value::from_json(v)?);
                }
                Ok(Value::Row(Arc::new(row)))
            }
        }
    }
}

impl From<Scalar> for Value {
    fn from(s: Scalar) -> Self {
        Value::Scalar(s)
    }
}

impl From<LatticeValue> for Value {
    fn from(l: LatticeValue) -> Self {
        Value::Lattice(l)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::int(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::str(v)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let json = serde_json::Value::deserialize(deserializer)?;
        Value::from_json(&json).map_err(serde::de::Error::custom)
    }
}

/// A message in flight or sitting in a mailbox. The row always carries the
/// handler parameters plus `message_id` and `reply_to` once stamped.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Message {
    pub mailbox: String,
    pub row: Row,
}

impl Message {
    pub fn new(mailbox: impl Into<String>, row: Row) -> Self {
        Message {
            mailbox: mailbox.into(),
            row,
        }
    }

    pub fn message_id(&self) -> Option<i64> {
        self.row.get(MESSAGE_ID).and_then(Value::as_int)
    }

    pub fn reply_to(&self) -> Option<&str> {
        match self.row.get(REPLY_TO) {
            Some(Value::Scalar(Scalar::Str(s))) => Some(s),
            _ => None,
        }
    }
}

pub const MESSAGE_ID: &str = "message_id";
pub const REPLY_TO: &str = "reply_to";
pub const PAYLOAD: &str = "payload";
