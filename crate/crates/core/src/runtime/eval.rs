//! Expression evaluation against a tick snapshot. Shared by both engines.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use super::state::{coerce_lattice, compose_key, reveal, NodeState};
use super::{RuntimeError, UdfRegistry};
use crate::ir::{BinOp, Clause, Expr, FoldKind, Pattern, Program, UnOp};
use crate::lattice::{bottom, LatticeValue, Scalar};
use crate::value::Value;

/// Variable bindings, innermost last.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Env(Vec<(String, Value)>);

impl Env {
    pub fn empty() -> Env {
        Env(Vec::new())
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.iter().rev().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn with(&self, name: &str, v: Value) -> Env {
        let mut out = self.clone();
        out.0.push((name.to_string(), v));
        out
    }

    pub fn extend(&self, bindings: &[(String, Value)]) -> Env {
        let mut out = self.clone();
        out.0.extend(bindings.iter().cloned());
        out
    }

    pub fn bindings(&self) -> &[(String, Value)] {
        &self.0
    }
}

/// Per-tick UDF memo: each distinct input is computed once per tick.
#[derive(Debug, Default)]
pub struct Memo {
    cache: HashMap<(String, Vec<Value>), Value>,
    pub invocations: BTreeMap<String, u64>,
    pub uses: BTreeMap<String, u64>,
}

impl Memo {
    pub fn clear(&mut self) {
        self.cache.clear();
        self.invocations.clear();
        self.uses.clear();
    }
}

/// Everything an expression may read during one tick.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub program: &'a Program,
    pub state: &'a NodeState,
    pub mailboxes: &'a BTreeMap<String, Value>,
    pub queries: &'a BTreeMap<String, Value>,
    pub udfs: &'a UdfRegistry,
    pub memo: &'a RefCell<Memo>,
    pub endpoint: &'a str,
}

fn err(msg: impl Into<String>) -> RuntimeError {
    RuntimeError::Eval(msg.into())
}

fn overflow(op: &str) -> RuntimeError {
    RuntimeError::Overflow(op.to_string())
}

/// Elements of a collection-valued value.
pub fn elements(v: &Value) -> Result<Vec<Value>, RuntimeError> {
    match v {
        Value::Set(items) => Ok(items.iter().cloned().collect()),
        Value::Lattice(LatticeValue::SetUnion(items)) => Ok(items.iter().cloned().map(Value::Scalar).collect()),
        Value::Lattice(LatticeValue::MapUnion { entries, .. }) => Ok(entries
            .iter()
            .map(|(k, v)| Value::row([("key", Value::Scalar(k.clone())), ("value", Value::Lattice(v.clone()))]))
            .collect()),
        Value::Scalar(Scalar::Tuple(items)) => Ok(items.iter().cloned().map(Value::Scalar).collect()),
        other => Err(err(format!("cannot iterate over {}", other.kind_name()))),
    }
}

fn as_bool(v: &Value) -> Result<bool, RuntimeError> {
    reveal(v).as_bool().ok_or_else(|| err(format!("expected bool, found {}", v.kind_name())))
}

fn as_int(v: &Value) -> Result<i64, RuntimeError> {
    reveal(v).as_int().ok_or_else(|| err(format!("expected int, found {}", v.kind_name())))
}

fn as_scalar(v: &Value) -> Result<Scalar, RuntimeError> {
    match reveal(v) {
        Value::Scalar(s) => Ok(s),
        other => Err(err(format!("expected scalar, found {}", other.kind_name()))),
    }
}

/// Binds `pat` against `v`; `None` when the shape does not match.
pub fn bind(pat: &Pattern, v: &Value, out: &mut Vec<(String, Value)>) -> bool {
    match pat {
        Pattern::Wild => true,
        Pattern::Bind(n) => {
            out.push((n.clone(), v.clone()));
            true
        }
        Pattern::Tuple(ps) => match v {
            Value::Scalar(Scalar::Tuple(items)) if items.len() == ps.len() => ps
                .iter()
                .zip(items)
                .all(|(p, item)| bind(p, &Value::Scalar(item.clone()), out)),
            _ => false,
        },
    }
}

impl<'a> Ctx<'a> {
    /// A name not bound in the environment: query, table, var, or mailbox.
    pub fn resolve(&self, name: &str) -> Result<Value, RuntimeError> {
        if let Some(v) = self.queries.get(name) {
            return Ok(v.clone());
        }
        if let Some(t) = self.state.tables.get(name) {
            return Ok(t.as_value());
        }
        if let Some(v) = self.state.vars.get(name) {
            return Ok(v.clone());
        }
        if self.program.data(name).is_some() {
            return Err(err(format!("var {name} is unset")));
        }
        if let Some(v) = self.mailboxes.get(name) {
            return Ok(v.clone());
        }
        if self.program.is_mailbox(name) {
            return Ok(Value::empty_set());
        }
        if self.program.query(name).is_some() {
            return Err(err(format!("query {name} read before it was computed")));
        }
        Err(err(format!("unresolved name {name}")))
    }

    pub fn lookup(&self, table: &str, key: &[Expr], env: &Env) -> Result<Vec<Value>, RuntimeError> {
        let t = self.state.tables.get(table).ok_or_else(|| err(format!("unknown table {table}")))?;
        let key = self.key(key, env)?;
        Ok(t.prefix(&key).into_iter().map(|r| Value::Row(r.clone())).collect())
    }

    pub fn key(&self, key: &[Expr], env: &Env) -> Result<Vec<Scalar>, RuntimeError> {
        key.iter().map(|k| as_scalar(&self.eval(k, env)?)).collect()
    }

    pub fn call(&self, udf: &str, args: Vec<Value>) -> Result<Value, RuntimeError> {
        let f = self.udfs.get(udf).ok_or_else(|| RuntimeError::UnknownUdf(udf.to_string()))?;
        let mut memo = self.memo.borrow_mut();
        *memo.uses.entry(udf.to_string()).or_default() += 1;
        let k = (udf.to_string(), args);
        if let Some(v) = memo.cache.get(&k) {
            return Ok(v.clone());
        }
        *memo.invocations.entry(udf.to_string()).or_default() += 1;
        let v = f(&k.1).map_err(|message| RuntimeError::UdfFailure {
            udf: udf.to_string(),
            message,
        })?;
        memo.cache.insert(k, v.clone());
        Ok(v)
    }

    /// Calls `f` once per binding produced by `clauses`.
    pub fn for_bindings(
        &self,
        clauses: &[Clause],
        env: &Env,
        f: &mut dyn FnMut(&Env) -> Result<(), RuntimeError>,
    ) -> Result<(), RuntimeError> {
        let Some((first, rest)) = clauses.split_first() else {
            return f(env);
        };
        match first {
            Clause::Gen { pat, source } => {
                let src = self.eval(source, env)?;
                for item in elements(&src)? {
                    let mut b = Vec::new();
                    if bind(pat, &item, &mut b) {
                        self.for_bindings(rest, &env.extend(&b), f)?;
                    }
                }
                Ok(())
            }
            Clause::Filter { cond } => {
                if as_bool(&self.eval(cond, env)?)? {
                    self.for_bindings(rest, env, f)?;
                }
                Ok(())
            }
            Clause::Let { name, value } => {
                let v = self.eval(value, env)?;
                self.for_bindings(rest, &env.with(name, v), f)
            }
        }
    }

    pub fn eval(&self, e: &Expr, env: &Env) -> Result<Value, RuntimeError> {
        match e {
            Expr::Lit { value } => Ok(value.clone()),
            Expr::Var { name } => match env.get(name) {
                Some(v) => Ok(v.clone()),
                None => self.resolve(name),
            },
            Expr::SelfEndpoint => Ok(Value::str(self.endpoint)),
            Expr::Field { base, field } => {
                let b = self.eval(base, env)?;
                field_of(&b, field)
            }
            Expr::Index { base, index } => {
                let b = self.eval(base, env)?;
                let i = as_int(&self.eval(index, env)?)?;
                match reveal(&b) {
                    Value::Scalar(Scalar::Tuple(items)) => usize::try_from(i)
                        .ok()
                        .and_then(|i| items.get(i))
                        .cloned()
                        .map(Value::Scalar)
                        .ok_or_else(|| err(format!("index {i} out of range for length {}", items.len()))),
                    other => Err(err(format!("cannot index {}", other.kind_name()))),
                }
            }
            Expr::Slice { base, start, end } => {
                let b = self.eval(base, env)?;
                let s = as_int(&self.eval(start, env)?)?;
                let t = as_int(&self.eval(end, env)?)?;
                match reveal(&b) {
                    Value::Scalar(Scalar::Tuple(items)) => {
                        let n = items.len() as i64;
                        let s = s.clamp(0, n) as usize;
                        let t = t.clamp(0, n) as usize;
                        Ok(Value::tuple(items[s..t.max(s)].to_vec()))
                    }
                    other => Err(err(format!("cannot slice {}", other.kind_name()))),
                }
            }
            Expr::Tuple { items } => {
                let mut out = Vec::with_capacity(items.len());
                for i in items {
                    out.push(as_scalar(&self.eval(i, env)?)?);
                }
                Ok(Value::tuple(out))
            }
            Expr::Record { fields } => {
                let mut row = BTreeMap::new();
                for (k, e) in fields {
                    row.insert(k.clone(), self.eval(e, env)?);
                }
                Ok(Value::Row(Arc::new(row)))
            }
            Expr::Lookup { table, key } => Ok(Value::set(self.lookup(table, key, env)?)),
            Expr::HasKey { table, key } => Ok(Value::bool(!self.lookup(table, key, env)?.is_empty())),
            Expr::Unary { op, arg } => {
                let v = self.eval(arg, env)?;
                match op {
                    UnOp::Not => Ok(Value::bool(!as_bool(&v)?)),
                    UnOp::Neg => as_int(&v)?.checked_neg().map(Value::int).ok_or_else(|| overflow("negation")),
                }
            }
            Expr::Binary { op, left, right } => self.binary(*op, left, right, env),
            Expr::Comprehension { clauses, yield_ } => {
                let mut out = BTreeSet::new();
                self.for_bindings(clauses, env, &mut |b| {
                    out.insert(self.eval(yield_, b)?);
                    Ok(())
                })?;
                Ok(Value::Set(Arc::new(out)))
            }
            Expr::Fold { kind, arg } => {
                let items = elements(&self.eval(arg, env)?)?;
                self.fold(kind, items, env)
            }
            Expr::Call { udf, args } => {
                let args = args.iter().map(|a| self.eval(a, env)).collect::<Result<Vec<_>, _>>()?;
                self.call(udf, args)
            }
            Expr::CallDyn { func, args } => {
                let name = match self.eval(func, env)? {
                    Value::Scalar(Scalar::Str(s)) => s,
                    other => return Err(err(format!("cannot call a {}", other.kind_name()))),
                };
                let args = args.iter().map(|a| self.eval(a, env)).collect::<Result<Vec<_>, _>>()?;
                self.call(&name, args)
            }
            Expr::If { cond, then, else_ } => {
                if as_bool(&self.eval(cond, env)?)? {
                    self.eval(then, env)
                } else {
                    self.eval(else_, env)
                }
            }
            Expr::Range { lo, hi } => {
                let lo = as_int(&self.eval(lo, env)?)?;
                let hi = as_int(&self.eval(hi, env)?)?;
                Ok(Value::set((lo..hi.max(lo)).map(Value::int)))
            }
            Expr::Len { arg } => {
                let v = self.eval(arg, env)?;
                let n = match &v {
                    Value::Scalar(Scalar::Str(s)) => s.chars().count(),
                    Value::Row(r) => r.len(),
                    other => elements(other)?.len(),
                };
                Ok(Value::int(n as i64))
            }
            Expr::ToSetLattice { arg } => {
                let v = self.eval(arg, env)?;
                Ok(Value::Lattice(coerce_lattice(&crate::lattice::Shape::SetUnion, &v)?))
            }
        }
    }

    fn binary(&self, op: BinOp, left: &Expr, right: &Expr, env: &Env) -> Result<Value, RuntimeError> {
        match op {
            BinOp::And => {
                return Ok(Value::bool(as_bool(&self.eval(left, env)?)? && as_bool(&self.eval(right, env)?)?));
            }
            BinOp::Or => {
                return Ok(Value::bool(as_bool(&self.eval(left, env)?)? || as_bool(&self.eval(right, env)?)?));
            }
            _ => {}
        }
        let l = self.eval(left, env)?;
        let r = self.eval(right, env)?;
        match op {
            BinOp::Add => match (reveal(&l), reveal(&r)) {
                (Value::Scalar(Scalar::Str(a)), Value::Scalar(Scalar::Str(b))) => Ok(Value::str(a + &b)),
                (Value::Scalar(Scalar::Tuple(mut a)), Value::Scalar(Scalar::Tuple(b))) => {
                    a.extend(b);
                    Ok(Value::tuple(a))
                }
                (a, b) => as_int(&a)?.checked_add(as_int(&b)?).map(Value::int).ok_or_else(|| overflow("addition")),
            },
            BinOp::Sub => as_int(&l)?.checked_sub(as_int(&r)?).map(Value::int).ok_or_else(|| overflow("subtraction")),
            BinOp::Mul => as_int(&l)?.checked_mul(as_int(&r)?).map(Value::int).ok_or_else(|| overflow("multiplication")),
            BinOp::Div => {
                let d = as_int(&r)?;
                if d == 0 {
                    return Err(err("division by zero"));
                }
                as_int(&l)?.checked_div_euclid(d).map(Value::int).ok_or_else(|| overflow("division"))
            }
            BinOp::Mod => {
                let d = as_int(&r)?;
                if d == 0 {
                    return Err(err("modulo by zero"));
                }
                as_int(&l)?.checked_rem_euclid(d).map(Value::int).ok_or_else(|| overflow("modulo"))
            }
            BinOp::Eq => Ok(Value::bool(reveal(&l) == reveal(&r))),
            BinOp::Ne => Ok(Value::bool(reveal(&l) != reveal(&r))),
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                let (a, b) = (reveal(&l), reveal(&r));
                let comparable = matches!(
                    (&a, &b),
                    (Value::Scalar(x), Value::Scalar(y)) if x.kind() == y.kind()
                );
                if !comparable {
                    return Err(err(format!("cannot order {} and {}", a.kind_name(), b.kind_name())));
                }
                let ord = a.cmp(&b);
                Ok(Value::bool(match op {
                    BinOp::Lt => ord.is_lt(),
                    BinOp::Le => ord.is_le(),
                    BinOp::Gt => ord.is_gt(),
                    _ => ord.is_ge(),
                }))
            }
            BinOp::In | BinOp::NotIn => {
                let needle = reveal(&l);
                let found = elements(&r)?.iter().any(|x| reveal(x) == needle);
                Ok(Value::bool(found == (op == BinOp::In)))
            }
            BinOp::Union => match (&l, &r) {
                (Value::Lattice(a), Value::Lattice(b)) => Ok(Value::Lattice(a.merge(b)?)),
                _ => {
                    let mut out: BTreeSet<Value> = elements(&l)?.into_iter().collect();
                    out.extend(elements(&r)?);
                    Ok(Value::Set(Arc::new(out)))
                }
            },
            BinOp::Difference => {
                let remove: BTreeSet<Value> = elements(&r)?.into_iter().collect();
                Ok(Value::set(elements(&l)?.into_iter().filter(|x| !remove.contains(x))))
            }
            BinOp::And | BinOp::Or => unreachable!(),
        }
    }

    fn fold(&self, kind: &FoldKind, items: Vec<Value>, env: &Env) -> Result<Value, RuntimeError> {
        let ordered_pairs = |items: Vec<Value>| -> Result<Vec<(Scalar, Scalar)>, RuntimeError> {
            let mut pairs = Vec::with_capacity(items.len());
            for item in items {
                match reveal(&item) {
                    Value::Scalar(Scalar::Tuple(t)) if t.len() == 2 => pairs.push((t[0].clone(), t[1].clone())),
                    other => return Err(err(format!("ordered fold expects (order, value) pairs, found {}", other.kind_name()))),
                }
            }
            pairs.sort();
            Ok(pairs)
        };
        match kind {
            FoldKind::Count => Ok(Value::int(items.len() as i64)),
            FoldKind::Exists => Ok(Value::bool(!items.is_empty())),
            FoldKind::Sum => {
                let mut acc: i64 = 0;
                for i in &items {
                    acc = acc.checked_add(as_int(i)?).ok_or_else(|| overflow("sum"))?;
                }
                Ok(Value::int(acc))
            }
            FoldKind::Min | FoldKind::Max => {
                let revealed: Vec<Value> = items.iter().map(reveal).collect();
                let pick = if matches!(kind, FoldKind::Min) {
                    revealed.into_iter().min()
                } else {
                    revealed.into_iter().max()
                };
                pick.ok_or_else(|| err("min/max of an empty collection"))
            }
            FoldKind::Merge { shape } => {
                let mut acc = bottom(shape);
                for i in &items {
                    acc = acc.merge(&coerce_lattice(shape, i)?)?;
                }
                Ok(Value::Lattice(acc))
            }
            FoldKind::ArrayAgg => Ok(Value::tuple(ordered_pairs(items)?.into_iter().map(|(_, v)| v).collect())),
            FoldKind::Any => items.into_iter().min().ok_or_else(|| err("any of an empty collection")),
            FoldKind::Reduce { func } => {
                let name = match self.eval(func, env)? {
                    Value::Scalar(Scalar::Str(s)) => s,
                    other => return Err(err(format!("reduce needs a udf name, found {}", other.kind_name()))),
                };
                let mut vals = ordered_pairs(items)?.into_iter().map(|(_, v)| Value::Scalar(v));
                let mut acc = vals.next().ok_or_else(|| err("reduce of an empty collection"))?;
                for v in vals {
                    acc = self.call(&name, vec![acc, v])?;
                }
                Ok(acc)
            }
        }
    }
}

pub fn field_of(base: &Value, field: &str) -> Result<Value, RuntimeError> {
    match base {
        Value::Row(r) => r.get(field).cloned().ok_or_else(|| err(format!("row has no field {field}"))),
        Value::Set(items) if items.len() == 1 => field_of(items.iter().next().unwrap(), field),
        Value::Set(items) if items.is_empty() => Err(err(format!("field {field} of a missing row"))),
        other => Err(err(format!("cannot read field {field} of {}", other.kind_name()))),
    }
}

/// Key of a full-key lookup, for callers that build composite keys.
pub fn full_key(parts: Vec<Scalar>) -> Scalar {
    compose_key(parts)
}
