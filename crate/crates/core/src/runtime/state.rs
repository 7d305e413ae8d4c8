//! Node-local state: keyed tables, vars, buffered mailboxes, and the
//! deferred effects applied atomically at the end of a tick.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use super::RuntimeError;
use crate::ir::{ClassDecl, DataKind, FieldType, Program};
use crate::lattice::{bottom, LatticeValue, Scalar, Shape};
use crate::value::{Message, Row, Value};

#[derive(Debug, Clone)]
pub struct Table {
    pub class: ClassDecl,
    rows: BTreeMap<Scalar, Row>,
    as_value: OnceLock<Value>,
}

impl PartialEq for Table {
    fn eq(&self, other: &Self) -> bool {
        self.class.name == other.class.name && self.rows == other.rows
    }
}

impl Table {
    pub fn new(class: ClassDecl) -> Table {
        Table {
            class,
            rows: BTreeMap::new(),
            as_value: OnceLock::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.values()
    }

    pub fn key_of(&self, row: &Row) -> Result<Scalar, RuntimeError> {
        let mut parts = Vec::with_capacity(self.class.key.len());
        for k in &self.class.key {
            match row.get(k).map(reveal) {
                Some(Value::Scalar(s)) => parts.push(s),
                _ => return Err(RuntimeError::Eval(format!("{} row lacks scalar key field {k}", self.class.name))),
            }
        }
        Ok(compose_key(parts))
    }

    /// Rows whose key starts with `prefix`.
    pub fn prefix(&self, prefix: &[Scalar]) -> Vec<&Row> {
        if prefix.len() == self.class.key.len() {
            return self.rows.get(&compose_key(prefix.to_vec())).into_iter().collect();
        }
        if prefix.is_empty() {
            return self.rows.values().collect();
        }
        let lo = Scalar::Tuple(prefix.to_vec());
        self.rows
            .range(lo..)
            .take_while(|(k, _)| matches!(k, Scalar::Tuple(items) if items.starts_with(prefix)))
            .map(|(_, r)| r)
            .collect()
    }

    fn prefix_keys(&self, prefix: &[Scalar]) -> Vec<Scalar> {
        self.prefix(prefix)
            .into_iter()
            .map(|r| self.key_of(r).expect("stored rows carry keys"))
            .collect()
    }

    /// All rows as a set value; cached until the next mutation.
    pub fn as_value(&self) -> Value {
        self.as_value
            .get_or_init(|| Value::set(self.rows.values().map(|r| Value::Row(r.clone()))))
            .clone()
    }

    fn touch(&mut self) {
        self.as_value = OnceLock::new();
    }

    fn insert(&mut self, key: Scalar, row: Row) {
        self.rows.insert(key, row);
        self.touch();
    }

    fn remove(&mut self, key: &Scalar) {
        self.rows.remove(key);
        self.touch();
    }

    fn clear(&mut self) {
        self.rows.clear();
        self.touch();
    }

    fn get(&self, key: &Scalar) -> Option<&Row> {
        self.rows.get(key)
    }

    /// Merges `incoming` into the row with the same key. Lattice fields
    /// join; scalar fields are write-once.
    pub fn merge_row(&mut self, incoming: &Row) -> Result<(), RuntimeError> {
        let mut fields = BTreeMap::new();
        for (name, v) in incoming.iter() {
            let decl = self.class.field(name).ok_or_else(|| {
                RuntimeError::Eval(format!("{} has no field {name}", self.class.name))
            })?;
            fields.insert(name.clone(), coerce_field(&decl.ty, v)?);
        }
        let key = self.key_of(&Arc::new(fields.clone()))?;
        let merged = match self.get(&key) {
            None => {
                for f in &self.class.fields {
                    if fields.contains_key(&f.name) {
                        continue;
                    }
                    if let Some(shape) = f.ty.lattice_shape() {
                        fields.insert(f.name.clone(), Value::Lattice(bottom(&shape)));
                    } else if let Some(d) = &f.default {
                        fields.insert(f.name.clone(), d.clone());
                    }
                }
                fields
            }
            Some(existing) => {
                let mut out = (**existing).clone();
                for (name, v) in fields {
                    let slot = out.get(&name).cloned();
                    let nv = match (slot, v) {
                        (None, v) => v,
                        (Some(Value::Lattice(a)), Value::Lattice(b)) => Value::Lattice(a.merge(&b)?),
                        (Some(a), b) if a == b => a,
                        (Some(_), _) => {
                            return Err(RuntimeError::KeyConflict {
                                table: self.class.name.clone(),
                                key: key.to_string(),
                                field: name,
                            })
                        }
                    };
                    out.insert(name, nv);
                }
                out
            }
        };
        self.insert(key, Arc::new(merged));
        Ok(())
    }

    fn update_field(&mut self, key: &Scalar, field: &str, value: &Value, merge: bool) -> Result<(), RuntimeError> {
        let decl = self
            .class
            .field(field)
            .ok_or_else(|| RuntimeError::Eval(format!("{} has no field {field}", self.class.name)))?;
        let v = coerce_field(&decl.ty, value)?;
        let Some(row) = self.get(key) else { return Ok(()) };
        let mut row = (**row).clone();
        let nv = match (merge, row.get(field)) {
            (true, Some(Value::Lattice(a))) => match &v {
                Value::Lattice(b) => Value::Lattice(a.merge(b)?),
                _ => unreachable!("lattice field coerces to lattice"),
            },
            _ => v,
        };
        row.insert(field.to_string(), nv);
        self.insert(key.clone(), Arc::new(row));
        Ok(())
    }
}

pub fn compose_key(mut parts: Vec<Scalar>) -> Scalar {
    if parts.len() == 1 {
        parts.pop().unwrap()
    } else {
        Scalar::Tuple(parts)
    }
}

/// Single-valued lattices read as their scalar.
pub fn reveal(v: &Value) -> Value {
    match v {
        Value::Lattice(LatticeValue::BoolOr(b)) => Value::bool(*b),
        Value::Lattice(LatticeValue::MaxInt(i)) | Value::Lattice(LatticeValue::MinInt(i)) => Value::int(*i),
        other => other.clone(),
    }
}

pub fn coerce_lattice(shape: &Shape, v: &Value) -> Result<LatticeValue, RuntimeError> {
    let fail = || RuntimeError::Eval(format!("cannot read {} as {shape}", v.kind_name()));
    match (shape, v) {
        (_, Value::Lattice(l)) if &l.shape() == shape => Ok(l.clone()),
        (Shape::BoolOr, Value::Scalar(Scalar::Bool(b))) => Ok(LatticeValue::BoolOr(*b)),
        (Shape::MaxInt, Value::Scalar(Scalar::Int(i))) => Ok(LatticeValue::MaxInt(*i)),
        (Shape::MinInt, Value::Scalar(Scalar::Int(i))) => Ok(LatticeValue::MinInt(*i)),
        (Shape::SetUnion, Value::Scalar(s)) => Ok(LatticeValue::set([s.clone()])),
        (Shape::SetUnion, Value::Set(items)) => {
            let mut out = BTreeSet::new();
            for item in items.iter() {
                match reveal(item) {
                    Value::Scalar(s) => {
                        out.insert(s);
                    }
                    _ => return Err(fail()),
                }
            }
            Ok(LatticeValue::SetUnion(out))
        }
        (shape, Value::Set(items)) => {
            let mut acc = bottom(shape);
            for item in items.iter() {
                acc = acc.merge(&coerce_lattice(shape, item)?)?;
            }
            Ok(acc)
        }
        _ => Err(fail()),
    }
}

fn coerce_field(ty: &FieldType, v: &Value) -> Result<Value, RuntimeError> {
    match ty.lattice_shape() {
        Some(shape) => Ok(Value::Lattice(coerce_lattice(&shape, v)?)),
        None => match reveal(v) {
            s @ Value::Scalar(_) => Ok(s),
            other => Err(RuntimeError::Eval(format!("scalar field given a {}", other.kind_name()))),
        },
    }
}

/// A deferred mutation. Applied at end of tick: deletes, then merges, then
/// assignments.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    ResetVar { var: String },
    ClearTable { table: String },
    DeleteRows { table: String, key: Vec<Scalar> },
    MergeVar { var: String, value: Value },
    MergeRow { table: String, row: Row },
    MergeField { table: String, key: Vec<Scalar>, field: String, value: Value },
    AssignVar { var: String, value: Value },
    AssignField { table: String, key: Vec<Scalar>, field: String, value: Value },
    AssignRow { table: String, key: Vec<Scalar>, row: Row },
    AssignTable { table: String, rows: Vec<Row> },
}

impl Effect {
    fn phase(&self) -> u8 {
        match self {
            Effect::ResetVar { .. } | Effect::ClearTable { .. } | Effect::DeleteRows { .. } => 0,
            Effect::MergeVar { .. } | Effect::MergeRow { .. } => 1,
            Effect::MergeField { .. } => 2,
            _ => 3,
        }
    }

    /// Identity of the location an assignment overwrites.
    fn assign_slot(&self) -> Option<String> {
        match self {
            Effect::AssignVar { var, .. } => Some(format!("var {var}")),
            Effect::AssignField { table, key, field, .. } => Some(format!("{table}{key:?}.{field}")),
            Effect::AssignRow { table, key, .. } => Some(format!("{table}{key:?}")),
            Effect::AssignTable { table, .. } => Some(format!("table {table}")),
            _ => None,
        }
    }

    fn assigned_value(&self) -> Value {
        match self {
            Effect::AssignVar { value, .. } | Effect::AssignField { value, .. } => value.clone(),
            Effect::AssignRow { row, .. } => Value::Row(row.clone()),
            Effect::AssignTable { rows, .. } => Value::set(rows.iter().map(|r| Value::Row(r.clone()))),
            _ => unreachable!(),
        }
    }

    pub fn data_name(&self) -> &str {
        match self {
            Effect::ResetVar { var } | Effect::MergeVar { var, .. } | Effect::AssignVar { var, .. } => var,
            Effect::ClearTable { table }
            | Effect::DeleteRows { table, .. }
            | Effect::MergeRow { table, .. }
            | Effect::MergeField { table, .. }
            | Effect::AssignField { table, .. }
            | Effect::AssignRow { table, .. }
            | Effect::AssignTable { table, .. } => table,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub tables: BTreeMap<String, Table>,
    pub vars: BTreeMap<String, Value>,
    /// Buffered messages per mailbox; set semantics, so redelivery of an
    /// identical message before it is handled is absorbed.
    pub mailboxes: BTreeMap<String, BTreeSet<Message>>,
    /// Completed ticks.
    pub tick: u64,
    /// Host invocations per UDF, across all ticks.
    pub udf_invocations: BTreeMap<String, u64>,
    pub(crate) next_local_id: i64,
}

impl NodeState {
    pub fn new(p: &Program) -> NodeState {
        let mut tables = BTreeMap::new();
        let mut vars = BTreeMap::new();
        for d in &p.data {
            match &d.kind {
                DataKind::Table { class } => {
                    if let Some(c) = p.class(class) {
                        tables.insert(d.name.clone(), Table::new(c.clone()));
                    }
                }
                DataKind::Var { ty, init } => {
                    let v = match (init, ty.lattice_shape()) {
                        (Some(v), _) => Some(v.clone()),
                        (None, Some(shape)) => Some(Value::Lattice(bottom(&shape))),
                        (None, None) => None,
                    };
                    if let Some(v) = v {
                        vars.insert(d.name.clone(), v);
                    }
                }
            }
        }
        NodeState {
            tables,
            vars,
            mailboxes: BTreeMap::new(),
            tick: 0,
            udf_invocations: BTreeMap::new(),
            next_local_id: 1,
        }
    }

    /// Tables and vars only: the state compared across replicas and runs.
    pub fn data_json(&self) -> serde_json::Value {
        let tables: serde_json::Map<String, serde_json::Value> = self
            .tables
            .iter()
            .map(|(n, t)| {
                let rows = t.rows().map(|r| Value::Row(r.clone()).to_json()).collect();
                (n.clone(), serde_json::Value::Array(rows))
            })
            .collect();
        let vars: serde_json::Map<String, serde_json::Value> =
            self.vars.iter().map(|(n, v)| (n.clone(), v.to_json())).collect();
        serde_json::json!({ "tables": tables, "vars": vars })
    }

    pub fn same_data(&self, other: &NodeState) -> bool {
        self.tables == other.tables && self.vars == other.vars
    }

    pub fn buffered(&self) -> usize {
        self.mailboxes.values().map(BTreeSet::len).sum()
    }

    /// Seeds a table row outside of any tick (initial data).
    pub fn load_row(&mut self, table: &str, row: Row) -> Result<(), RuntimeError> {
        self.tables
            .get_mut(table)
            .ok_or_else(|| RuntimeError::Eval(format!("unknown table {table}")))?
            .merge_row(&row)
    }

    pub fn set_var(&mut self, var: &str, value: Value) {
        self.vars.insert(var.to_string(), value);
    }

    fn table_mut<'a>(
        staged: &'a mut BTreeMap<String, Table>,
        live: &BTreeMap<String, Table>,
        name: &str,
    ) -> Result<&'a mut Table, RuntimeError> {
        if !staged.contains_key(name) {
            let t = live.get(name).ok_or_else(|| RuntimeError::Eval(format!("unknown table {name}")))?;
            staged.insert(name.to_string(), t.clone());
        }
        Ok(staged.get_mut(name).unwrap())
    }

    /// Applies `effects` atomically: either all take effect or the state is
    /// unchanged. Returns the canonical (sorted, deduplicated) effect list.
    pub fn apply(&mut self, p: &Program, mut effects: Vec<Effect>) -> Result<Vec<Effect>, RuntimeError> {
        effects.sort();
        effects.dedup();
        let mut slots: BTreeMap<String, Value> = BTreeMap::new();
        for e in &effects {
            if let Some(slot) = e.assign_slot() {
                let v = e.assigned_value();
                if let Some(prev) = slots.insert(slot.clone(), v.clone()) {
                    if prev != v {
                        return Err(RuntimeError::AmbiguousAssign(slot));
                    }
                }
            }
        }
        let mut ordered: Vec<&Effect> = effects.iter().collect();
        ordered.sort_by_key(|e| e.phase());

        let mut tables: BTreeMap<String, Table> = BTreeMap::new();
        let mut vars: BTreeMap<String, Option<Value>> = BTreeMap::new();
        for e in ordered {
            match e {
                Effect::ResetVar { var } => {
                    let init = initial_var(p, var)?;
                    vars.insert(var.clone(), init);
                }
                Effect::ClearTable { table } => Self::table_mut(&mut tables, &self.tables, table)?.clear(),
                Effect::DeleteRows { table, key } => {
                    let t = Self::table_mut(&mut tables, &self.tables, table)?;
                    for k in t.prefix_keys(key) {
                        t.remove(&k);
                    }
                }
                Effect::MergeVar { var, value } => {
                    let shape = var_shape(p, var)?;
                    let cur = match vars.get(var) {
                        Some(v) => v.clone(),
                        None => self.vars.get(var).cloned(),
                    };
                    let cur = cur.map(|v| coerce_lattice(&shape, &v)).transpose()?.unwrap_or_else(|| bottom(&shape));
                    let merged = cur.merge(&coerce_lattice(&shape, value)?)?;
                    vars.insert(var.clone(), Some(Value::Lattice(merged)));
                }
                Effect::MergeRow { table, row } => Self::table_mut(&mut tables, &self.tables, table)?.merge_row(row)?,
                Effect::MergeField { table, key, field, value } => {
                    let t = Self::table_mut(&mut tables, &self.tables, table)?;
                    for k in t.prefix_keys(key) {
                        t.update_field(&k, field, value, true)?;
                    }
                }
                Effect::AssignVar { var, value } => {
                    let v = match p.data(var).map(|d| &d.kind) {
                        Some(DataKind::Var { ty, .. }) => match ty.lattice_shape() {
                            Some(shape) => Value::Lattice(coerce_lattice(&shape, value)?),
                            None => reveal(value),
                        },
                        _ => return Err(RuntimeError::Eval(format!("unknown var {var}"))),
                    };
                    vars.insert(var.clone(), Some(v));
                }
                Effect::AssignField { table, key, field, value } => {
                    let t = Self::table_mut(&mut tables, &self.tables, table)?;
                    for k in t.prefix_keys(key) {
                        t.update_field(&k, field, value, false)?;
                    }
                }
                Effect::AssignRow { table, key, row } => {
                    let t = Self::table_mut(&mut tables, &self.tables, table)?;
                    for k in t.prefix_keys(key) {
                        t.remove(&k);
                    }
                    t.merge_row(row)?;
                }
                Effect::AssignTable { table, rows } => {
                    let t = Self::table_mut(&mut tables, &self.tables, table)?;
                    t.clear();
                    for r in rows {
                        t.merge_row(r)?;
                    }
                }
            }
        }
        self.tables.extend(tables);
        for (name, v) in vars {
            match v {
                Some(v) => self.vars.insert(name, v),
                None => self.vars.remove(&name),
            };
        }
        Ok(effects)
    }
}

fn var_shape(p: &Program, var: &str) -> Result<Shape, RuntimeError> {
    match p.data(var).map(|d| &d.kind) {
        Some(DataKind::Var { ty, .. }) => ty
            .lattice_shape()
            .ok_or_else(|| RuntimeError::Eval(format!("{var} is not a lattice"))),
        _ => Err(RuntimeError::Eval(format!("unknown var {var}"))),
    }
}

fn initial_var(p: &Program, var: &str) -> Result<Option<Value>, RuntimeError> {
    match p.data(var).map(|d| &d.kind) {
        Some(DataKind::Var { ty, init }) => Ok(match (init, ty.lattice_shape()) {
            (Some(v), _) => Some(v.clone()),
            (None, Some(shape)) => Some(Value::Lattice(bottom(&shape))),
            (None, None) => None,
        }),
        _ => Err(RuntimeError::Eval(format!("unknown var {var}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::build::*;
    use crate::lattice::ScalarKind;

    fn program() -> Program {
        Program {
            name: "t".into(),
            classes: vec![class(
                "G",
                vec![
                    scalar_field("r", ScalarKind::Int),
                    scalar_field("ix", ScalarKind::Int),
                    scalar_field("val", ScalarKind::Any),
                    lattice_field("done", Shape::BoolOr),
                ],
                &["r", "ix"],
            )],
            data: vec![
                table("g", "G"),
                var_decl("n", FieldType::Scalar(ScalarKind::Int), Some(Value::int(1))),
            ],
            ..Default::default()
        }
    }

    fn row(r: i64, ix: i64, val: i64) -> Row {
        Arc::new([("r", r), ("ix", ix), ("val", val)].into_iter().map(|(k, v)| (k.to_string(), Value::int(v))).collect())
    }

    #[test]
    fn prefix_field_merge_reaches_rows_created_same_tick() {
        let p = program();
        let mut s = NodeState::new(&p);
        s.apply(
            &p,
            vec![
                Effect::MergeField {
                    table: "g".into(),
                    key: vec![Scalar::Int(1)],
                    field: "done".into(),
                    value: Value::bool(true),
                },
                Effect::MergeRow { table: "g".into(), row: row(1, 0, 5) },
                Effect::MergeRow { table: "g".into(), row: row(2, 0, 5) },
            ],
        )
        .unwrap();
        let t = &s.tables["g"];
        assert_eq!(t.prefix(&[Scalar::Int(1)]).len(), 1);
        assert_eq!(t.prefix(&[Scalar::Int(1)])[0]["done"], Value::Lattice(LatticeValue::BoolOr(true)));
        assert_eq!(t.prefix(&[Scalar::Int(2)])[0]["done"], Value::Lattice(LatticeValue::BoolOr(false)));
    }

    #[test]
    fn scalar_fields_are_write_once() {
        let p = program();
        let mut s = NodeState::new(&p);
        let err = s.apply(
            &p,
            vec![
                Effect::MergeRow { table: "g".into(), row: row(1, 0, 5) },
                Effect::MergeRow { table: "g".into(), row: row(1, 0, 6) },
            ],
        );
        assert!(matches!(err, Err(RuntimeError::KeyConflict { .. })));
        assert!(s.tables["g"].is_empty(), "failed apply leaves state unchanged");
    }

    #[test]
    fn conflicting_assigns() {
        let p = program();
        let mut s = NodeState::new(&p);
        let assign = |v| Effect::AssignVar { var: "n".into(), value: Value::int(v) };
        assert!(matches!(s.apply(&p, vec![assign(0), assign(2)]), Err(RuntimeError::AmbiguousAssign(_))));
        s.apply(&p, vec![assign(0), assign(0)]).unwrap();
        assert_eq!(s.vars["n"], Value::int(0));
    }
}
