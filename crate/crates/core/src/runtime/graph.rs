//! Lowered operator graphs and their executor.
//!
//! Operators pass collections of variable bindings. Query bodies end in a
//! `LatticeFold` that publishes the query value; recursive query groups run
//! inside a `FixpointGroup` with semi-naive rounds.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::eval::{bind, elements, Ctx, Env};
use super::state::reveal;
use super::{combine, leaf, truthy, Evaluated, RuntimeError, Snapshot};
use crate::ir::{Expr, Pattern, Statement};
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Differential,
    AllAtOnce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Collection,
    LatticeStream,
    ReactiveCell,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum MapFn {
    /// Source of a single empty binding.
    Unit,
    Generate { pat: Pattern, source: Expr },
    Bind { name: String, value: Expr },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpKind {
    MailboxIngress { mailbox: String, bind: String },
    Map { f: MapFn },
    Filter { cond: Expr },
    /// Independent generator joined to the incoming bindings; a hash join
    /// when an equality between the two sides follows it.
    Join {
        pat: Pattern,
        source: Expr,
        left_key: Option<Expr>,
        right_key: Option<Expr>,
    },
    /// Publishes a query body: the set of yields, or the expression value
    /// itself when `whole`.
    LatticeFold { query: String, yield_: Expr, whole: bool },
    FixpointGroup { queries: Vec<String>, members: Vec<usize> },
    UdfOp { statement: Statement },
    MutationSink { statement: Statement },
    SendEgress { statement: Statement },
    Inspect { point: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Operator {
    pub id: usize,
    #[serde(flatten)]
    pub kind: OpKind,
    pub mode: Mode,
    pub inputs: Vec<usize>,
    pub stratum: usize,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub handler: Option<String>,
    /// Owning fixpoint group operator, for members of recursive groups.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub synthesized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorGraph {
    pub role: String,
    pub operators: Vec<Operator>,
    pub edges: Vec<Edge>,
    /// Operator ids per stratum, each in topological order.
    pub strata: Vec<Vec<usize>>,
    pub synthesized: bool,
}

type Rows = Vec<Env>;

impl OperatorGraph {
    pub fn op(&self, id: usize) -> &Operator {
        &self.operators[id]
    }

    pub fn handlers(&self) -> BTreeSet<String> {
        self.operators.iter().filter_map(|o| o.handler.clone()).collect()
    }

    /// Operators from the chain source to `id`, in order.
    fn chain(&self, id: usize) -> Vec<usize> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(&i) = self.operators[cur].inputs.first() {
            out.push(i);
            cur = i;
        }
        out.reverse();
        out
    }

    pub fn evaluate(&self, snap: &Snapshot<'_>) -> Result<Evaluated, RuntimeError> {
        let mut ev = Evaluated::default();
        let active: BTreeSet<&str> = snap
            .program
            .handlers
            .iter()
            .filter(|h| snap.runs(&h.name) && snap.mailboxes.contains_key(&h.name))
            .map(|h| h.name.as_str())
            .collect();
        let mut outputs: Vec<Option<Rows>> = vec![None; self.operators.len()];
        let mut pending: BTreeMap<String, Value> = BTreeMap::new();
        for stratum in &self.strata {
            for &id in stratum {
                let op = &self.operators[id];
                if op.group.is_some() {
                    continue;
                }
                if let Some(h) = &op.handler {
                    if !active.contains(h.as_str()) {
                        continue;
                    }
                }
                match &op.kind {
                    OpKind::FixpointGroup { queries, members } => {
                        let rounds = self.fixpoint(snap, queries, members, &mut ev)?;
                        ev.iterations += rounds;
                    }
                    OpKind::LatticeFold { query, yield_, whole } => {
                        let input = take_input(&outputs, op)?;
                        let v = {
                            let ctx = snap.ctx(&ev.queries);
                            fold_value(&ctx, input, yield_, *whole)?
                        };
                        count_rows(&mut ev, op, 1);
                        let acc = pending.remove(query).unwrap_or_else(Value::empty_set);
                        let acc = combine(acc, v)?;
                        if self.last_body(id, query) {
                            ev.queries.insert(query.clone(), acc);
                            ev.iterations += 1;
                        } else {
                            pending.insert(query.clone(), acc);
                        }
                    }
                    _ => {
                        let queries = std::mem::take(&mut ev.queries);
                        let out = {
                            let ctx = snap.ctx(&queries);
                            let input = op.inputs.first().map(|&i| outputs[i].as_deref().unwrap_or(&[]));
                            self.step(&ctx, op, input.unwrap_or(&[]), None, snap.options.inspect, &mut ev)
                        };
                        ev.queries = queries;
                        let out = out?;
                        count_rows(&mut ev, op, out.len());
                        outputs[id] = Some(out);
                    }
                }
            }
        }
        Ok(ev)
    }

    /// True when `id` is the final body fold of `query` in evaluation order.
    fn last_body(&self, id: usize, query: &str) -> bool {
        !self.operators[id + 1..].iter().any(|o| {
            o.group.is_none() && matches!(&o.kind, OpKind::LatticeFold { query: q, .. } if q == query)
        })
    }

    fn fixpoint(&self, snap: &Snapshot<'_>, queries: &[String], members: &[usize], ev: &mut Evaluated) -> Result<usize, RuntimeError> {
        let names: BTreeSet<&str> = queries.iter().map(String::as_str).collect();
        // Per body: its chain, and the ops that scan a group query directly.
        struct Body {
            chain: Vec<usize>,
            query: String,
            delta_ops: Vec<(usize, String)>,
            naive: bool,
        }
        let mut bodies = Vec::new();
        for &fold in members {
            let chain = self.chain(fold);
            let OpKind::LatticeFold { query, whole, .. } = &self.operators[fold].kind else {
                continue;
            };
            let mut delta_ops = Vec::new();
            let mut naive = *whole;
            for &id in &chain {
                let op = &self.operators[id];
                let direct = match &op.kind {
                    OpKind::Map { f: MapFn::Generate { source: Expr::Var { name }, .. } }
                    | OpKind::Join { source: Expr::Var { name }, .. }
                        if names.contains(name.as_str()) =>
                    {
                        delta_ops.push((id, name.clone()));
                        true
                    }
                    _ => false,
                };
                let mut refs = Vec::new();
                op_exprs(&op.kind, direct, &mut refs);
                if refs.iter().any(|e| mentions(e, &names)) {
                    naive = true;
                }
            }
            bodies.push(Body {
                chain,
                query: query.clone(),
                delta_ops,
                naive,
            });
        }

        for q in queries {
            ev.queries.insert(q.clone(), Value::empty_set());
        }
        let mut delta: BTreeMap<String, Value> = BTreeMap::new();
        let mut round = 0;
        loop {
            round += 1;
            if round > snap.options.iteration_cap {
                return Err(RuntimeError::FixpointDivergence {
                    group: queries.join(","),
                    cap: snap.options.iteration_cap,
                });
            }
            let mut fresh: BTreeMap<String, Value> = BTreeMap::new();
            for b in &bodies {
                let runs: Vec<Option<(usize, &Value)>> = if round == 1 || b.naive {
                    vec![None]
                } else {
                    b.delta_ops
                        .iter()
                        .filter_map(|(id, q)| delta.get(q).map(|d| Some((*id, d))))
                        .collect()
                };
                for over in runs {
                    let v = self.run_chain(snap, &b.chain, over, ev)?;
                    let acc = fresh.remove(&b.query).unwrap_or_else(Value::empty_set);
                    fresh.insert(b.query.clone(), combine(acc, v)?);
                }
            }
            let mut next_delta = BTreeMap::new();
            for q in queries {
                let cur = ev.queries[q].clone();
                let merged = combine(cur.clone(), fresh.remove(q).unwrap_or_else(Value::empty_set))?;
                if merged != cur {
                    let d = match (&merged, &cur) {
                        (Value::Set(m), Value::Set(c)) => Value::set(m.difference(c).cloned()),
                        _ => merged.clone(),
                    };
                    next_delta.insert(q.clone(), d);
                    ev.queries.insert(q.clone(), merged);
                }
            }
            if next_delta.is_empty() {
                return Ok(round);
            }
            delta = next_delta;
        }
    }

    fn run_chain(&self, snap: &Snapshot<'_>, chain: &[usize], over: Option<(usize, &Value)>, ev: &mut Evaluated) -> Result<Value, RuntimeError> {
        let queries = std::mem::take(&mut ev.queries);
        let out = self.run_chain_with(snap, &queries, chain, over, ev);
        ev.queries = queries;
        out
    }

    fn run_chain_with(
        &self,
        snap: &Snapshot<'_>,
        queries: &BTreeMap<String, Value>,
        chain: &[usize],
        over: Option<(usize, &Value)>,
        ev: &mut Evaluated,
    ) -> Result<Value, RuntimeError> {
        let ctx = snap.ctx(queries);
        let mut rows: Rows = Vec::new();
        for &id in chain {
            let op = &self.operators[id];
            if let OpKind::LatticeFold { yield_, whole, .. } = &op.kind {
                count_rows(ev, op, 1);
                return fold_value(&ctx, &rows, yield_, *whole);
            }
            let source = over.and_then(|(oid, v)| (oid == id).then_some(v));
            rows = self.step(&ctx, op, &rows, source, false, ev)?;
            count_rows(ev, op, rows.len());
        }
        Err(RuntimeError::Eval("query chain without a fold".into()))
    }

    fn step(
        &self,
        ctx: &Ctx<'_>,
        op: &Operator,
        input: &[Env],
        source_override: Option<&Value>,
        inspect: bool,
        ev: &mut Evaluated,
    ) -> Result<Rows, RuntimeError> {
        let mut out = Vec::new();
        match &op.kind {
            OpKind::MailboxIngress { mailbox, bind: name } => {
                if let Some(v) = ctx.mailboxes.get(mailbox) {
                    for m in elements(v)? {
                        out.push(Env::empty().with(name, m));
                    }
                }
            }
            OpKind::Map { f: MapFn::Unit } => out.push(Env::empty()),
            OpKind::Map { f: MapFn::Generate { pat, source } } => {
                for env in input {
                    let src = match source_override {
                        Some(v) => v.clone(),
                        None => ctx.eval(source, env)?,
                    };
                    for item in elements(&src)? {
                        let mut b = Vec::new();
                        if bind(pat, &item, &mut b) {
                            out.push(env.extend(&b));
                        }
                    }
                }
            }
            OpKind::Map { f: MapFn::Bind { name, value } } => {
                for env in input {
                    out.push(env.with(name, ctx.eval(value, env)?));
                }
            }
            OpKind::Filter { cond } => {
                for env in input {
                    if truthy(&ctx.eval(cond, env)?)? {
                        out.push(env.clone());
                    }
                }
            }
            OpKind::Join { pat, source, left_key, right_key } => {
                if input.is_empty() {
                    return Ok(out);
                }
                let src = match source_override {
                    Some(v) => v.clone(),
                    None => ctx.eval(source, &Env::empty())?,
                };
                let mut right = Vec::new();
                for item in elements(&src)? {
                    let mut b = Vec::new();
                    if bind(pat, &item, &mut b) {
                        right.push(b);
                    }
                }
                if right.is_empty() {
                    return Ok(out);
                }
                let mut pairs: Vec<(usize, usize)> = Vec::new();
                match (left_key, right_key) {
                    (Some(lk), Some(rk)) => {
                        let lkeys = input
                            .iter()
                            .map(|e| ctx.eval(lk, e).map(|v| reveal(&v)))
                            .collect::<Result<Vec<_>, _>>()?;
                        let rkeys = right
                            .iter()
                            .map(|b| ctx.eval(rk, &Env::empty().extend(b)).map(|v| reveal(&v)))
                            .collect::<Result<Vec<_>, _>>()?;
                        // Build on the smaller side.
                        if rkeys.len() <= lkeys.len() {
                            let mut table: HashMap<&Value, Vec<usize>> = HashMap::new();
                            for (ri, k) in rkeys.iter().enumerate() {
                                table.entry(k).or_default().push(ri);
                            }
                            for (li, k) in lkeys.iter().enumerate() {
                                for &ri in table.get(k).map(Vec::as_slice).unwrap_or(&[]) {
                                    pairs.push((li, ri));
                                }
                            }
                        } else {
                            let mut table: HashMap<&Value, Vec<usize>> = HashMap::new();
                            for (li, k) in lkeys.iter().enumerate() {
                                table.entry(k).or_default().push(li);
                            }
                            for (ri, k) in rkeys.iter().enumerate() {
                                for &li in table.get(k).map(Vec::as_slice).unwrap_or(&[]) {
                                    pairs.push((li, ri));
                                }
                            }
                            pairs.sort_unstable();
                        }
                    }
                    _ => {
                        for li in 0..input.len() {
                            for ri in 0..right.len() {
                                pairs.push((li, ri));
                            }
                        }
                    }
                }
                for (li, ri) in pairs {
                    out.push(input[li].extend(&right[ri]));
                }
            }
            OpKind::UdfOp { statement } | OpKind::MutationSink { statement } | OpKind::SendEgress { statement } => {
                for env in input {
                    leaf(ctx, statement, env, &mut ev.effects, &mut ev.outbound)?;
                }
            }
            OpKind::Inspect { point } => {
                if inspect {
                    ev.inspect.push(serde_json::json!({
                        "operator": op.id,
                        "point": point,
                        "handler": op.handler,
                        "rows": input.len(),
                    }));
                }
                out.extend(input.iter().cloned());
            }
            OpKind::LatticeFold { .. } | OpKind::FixpointGroup { .. } => unreachable!("handled by the scheduler"),
        }
        Ok(out)
    }
}

fn take_input<'r>(outputs: &'r [Option<Rows>], op: &Operator) -> Result<&'r [Env], RuntimeError> {
    match op.inputs.first() {
        Some(&i) => Ok(outputs[i].as_deref().unwrap_or(&[])),
        None => Err(RuntimeError::Eval(format!("operator {} has no input", op.id))),
    }
}

fn fold_value(ctx: &Ctx<'_>, rows: &[Env], yield_: &Expr, whole: bool) -> Result<Value, RuntimeError> {
    if whole {
        return match rows.first() {
            Some(env) => ctx.eval(yield_, env),
            None => Ok(Value::empty_set()),
        };
    }
    let mut out = BTreeSet::new();
    for env in rows {
        out.insert(ctx.eval(yield_, env)?);
    }
    Ok(Value::Set(std::sync::Arc::new(out)))
}

fn count_rows(ev: &mut Evaluated, op: &Operator, n: usize) {
    *ev.op_rows.entry(format!("{:03}:{}", op.id, op.label)).or_default() += n as u64;
}

/// Expressions an operator evaluates. With `skip_source`, a direct scan's
/// source is left out.
pub(crate) fn op_exprs<'a>(kind: &'a OpKind, skip_source: bool, out: &mut Vec<&'a Expr>) {
    match kind {
        OpKind::Map { f: MapFn::Generate { source, .. } } => {
            if !skip_source {
                out.push(source)
            }
        }
        OpKind::Map { f: MapFn::Bind { value, .. } } => out.push(value),
        OpKind::Filter { cond } => out.push(cond),
        OpKind::Join { source, left_key, right_key, .. } => {
            if !skip_source {
                out.push(source);
            }
            out.extend(left_key.iter());
            out.extend(right_key.iter());
        }
        OpKind::LatticeFold { yield_, .. } => out.push(yield_),
        OpKind::UdfOp { statement } | OpKind::MutationSink { statement } | OpKind::SendEgress { statement } => {
            out.extend(statement.own_exprs())
        }
        _ => {}
    }
}

pub(crate) fn mentions(e: &Expr, names: &BTreeSet<&str>) -> bool {
    let mut hit = false;
    e.visit(&mut |x| {
        if let Expr::Var { name } = x {
            hit |= names.contains(name.as_str());
        }
    });
    hit
}
