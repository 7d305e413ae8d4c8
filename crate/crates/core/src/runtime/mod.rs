//! One transducer: snapshot, fixpoint, atomic end-of-tick mutation, buffered
//! sends. Two engines share the tick skeleton: a direct IR interpreter and
//! the lowered operator graph.

pub mod eval;
pub mod graph;
pub mod interp;
pub mod state;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::ir::desugar::message_clauses;
use crate::ir::{DataKind, Expr, HandlerMode, Program, Statement, Target};
use crate::lattice::{LatticeError, Scalar};
use crate::value::{Message, Row, Value, MESSAGE_ID, REPLY_TO};
use eval::{elements, Ctx, Env, Memo};
pub use graph::OperatorGraph;
pub use state::{Effect, NodeState, Table};

pub const DEFAULT_ITERATION_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("integer overflow in {0}")]
    Overflow(String),
    #[error("fixpoint for {group} did not converge within {cap} rounds")]
    FixpointDivergence { group: String, cap: usize },
    #[error("udf {udf} failed: {message}")]
    UdfFailure { udf: String, message: String },
    #[error("no implementation registered for udf {0}")]
    UnknownUdf(String),
    #[error("conflicting assignments to {0} in one tick")]
    AmbiguousAssign(String),
    #[error("key conflict in {table} at {key}: scalar field {field} already set")]
    KeyConflict { table: String, key: String, field: String },
    #[error("unstratifiable: {0}")]
    Unstratifiable(String),
    #[error("non-monotone operator inside recursive group {0}")]
    NonMonotoneRecursion(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

pub type UdfFn = Arc<dyn Fn(&[Value]) -> Result<Value, String> + Send + Sync>;

/// Host implementations of UDFs, by name.
#[derive(Clone, Default)]
pub struct UdfRegistry {
    fns: BTreeMap<String, UdfFn>,
}

impl fmt::Debug for UdfRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.fns.keys()).finish()
    }
}

impl UdfRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, f: F) -> &mut Self
    where
        F: Fn(&[Value]) -> Result<Value, String> + Send + Sync + 'static,
    {
        self.fns.insert(name.to_string(), Arc::new(f));
        self
    }

    pub fn with<F>(mut self, name: &str, f: F) -> Self
    where
        F: Fn(&[Value]) -> Result<Value, String> + Send + Sync + 'static,
    {
        self.register(name, f);
        self
    }

    pub fn get(&self, name: &str) -> Option<&UdfFn> {
        self.fns.get(name)
    }

    pub fn extend(&mut self, other: &UdfRegistry) {
        self.fns.extend(other.fns.iter().map(|(k, v)| (k.clone(), v.clone())));
    }
}

/// A message produced by a Send, with an optional explicit destination.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Outbound {
    pub mailbox: String,
    pub row: Row,
    pub to: Option<String>,
}

impl Outbound {
    pub fn message(&self) -> Message {
        Message::new(self.mailbox.clone(), self.row.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TickResult {
    pub tick: u64,
    pub outbound: Vec<Outbound>,
    pub delta: Vec<Effect>,
    pub iterations: usize,
    pub op_rows: BTreeMap<String, u64>,
    pub consumed: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub inspect: Vec<serde_json::Value>,
}

/// What an engine computes from one snapshot.
#[derive(Debug, Default)]
pub struct Evaluated {
    pub queries: BTreeMap<String, Value>,
    pub effects: Vec<Effect>,
    pub outbound: Vec<Outbound>,
    pub iterations: usize,
    pub op_rows: BTreeMap<String, u64>,
    pub inspect: Vec<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub enum Engine {
    Interpreter(Arc<interp::Interpreter>),
    Graph(Arc<OperatorGraph>),
}

#[derive(Debug, Clone)]
pub struct TickOptions {
    pub iteration_cap: usize,
    pub inspect: bool,
}

impl Default for TickOptions {
    fn default() -> Self {
        TickOptions {
            iteration_cap: DEFAULT_ITERATION_CAP,
            inspect: false,
        }
    }
}

/// Inputs shared by both engines for one tick.
pub struct Snapshot<'a> {
    pub program: &'a Program,
    pub state: &'a NodeState,
    pub mailboxes: &'a BTreeMap<String, Value>,
    pub udfs: &'a UdfRegistry,
    pub memo: &'a RefCell<Memo>,
    pub endpoint: &'a str,
    pub only: Option<&'a BTreeSet<String>>,
    pub options: &'a TickOptions,
}

impl<'a> Snapshot<'a> {
    pub fn ctx(&self, queries: &'a BTreeMap<String, Value>) -> Ctx<'a> {
        Ctx {
            program: self.program,
            state: self.state,
            mailboxes: self.mailboxes,
            queries,
            udfs: self.udfs,
            memo: self.memo,
            endpoint: self.endpoint,
        }
    }

    pub fn runs(&self, handler: &str) -> bool {
        self.only.is_none_or(|o| o.contains(handler))
    }
}

#[derive(Debug, Clone)]
pub struct Transducer {
    program: Arc<Program>,
    state: NodeState,
    udfs: UdfRegistry,
    engine: Engine,
    pub options: TickOptions,
    endpoint: String,
    dirty: bool,
}

impl Transducer {
    pub fn interpreter(program: Arc<Program>, udfs: UdfRegistry) -> Result<Self, RuntimeError> {
        let engine = Engine::Interpreter(Arc::new(interp::Interpreter::new(&program)?));
        Ok(Self::with_engine(program, udfs, engine))
    }

    pub fn graph(program: Arc<Program>, graph: Arc<OperatorGraph>, udfs: UdfRegistry) -> Self {
        Self::with_engine(program, udfs, Engine::Graph(graph))
    }

    pub fn with_engine(program: Arc<Program>, udfs: UdfRegistry, engine: Engine) -> Self {
        let state = NodeState::new(&program);
        Transducer {
            program,
            state,
            udfs,
            engine,
            options: TickOptions::default(),
            endpoint: "node/0".to_string(),
            dirty: false,
        }
    }

    pub fn set_endpoint(&mut self, endpoint: &str) {
        self.endpoint = endpoint.to_string();
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn program(&self) -> &Arc<Program> {
        &self.program
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut NodeState {
        &mut self.state
    }

    pub fn udfs(&self) -> &UdfRegistry {
        &self.udfs
    }

    /// True when buffered messages might now be handled: the last tick
    /// changed state, so a guard may have flipped.
    pub fn wants_tick(&self) -> bool {
        self.dirty && self.state.buffered() > 0
    }

    /// Adds messages to the mailboxes without running a tick.
    pub fn deliver(&mut self, inbound: Vec<Message>) {
        for m in inbound {
            let m = self.stamp(m);
            self.state.mailboxes.entry(m.mailbox.clone()).or_default().insert(m);
        }
    }

    fn stamp(&mut self, mut m: Message) -> Message {
        if m.message_id().is_none() || !m.row.contains_key(REPLY_TO) {
            let row = Arc::make_mut(&mut m.row);
            if !row.contains_key(MESSAGE_ID) {
                row.insert(MESSAGE_ID.to_string(), Value::int(-self.state.next_local_id));
                self.state.next_local_id += 1;
            }
            row.entry(REPLY_TO.to_string()).or_insert_with(|| Value::str(""));
        }
        m
    }

    pub fn tick(&mut self, inbound: Vec<Message>) -> Result<TickResult, RuntimeError> {
        self.tick_only(inbound, None)
    }

    /// Runs one tick. With `only`, just those handlers run and consume; other
    /// mailboxes stay buffered.
    pub fn tick_only(&mut self, inbound: Vec<Message>, only: Option<&BTreeSet<String>>) -> Result<TickResult, RuntimeError> {
        self.deliver(inbound);
        let program = self.program.clone();
        let p = &*program;
        let visible: BTreeMap<String, Vec<Message>> = self
            .state
            .mailboxes
            .iter()
            .filter(|(name, msgs)| !msgs.is_empty() && only.is_none_or(|o| o.contains(*name)))
            .map(|(name, msgs)| (name.clone(), msgs.iter().cloned().collect()))
            .collect();
        let mailboxes: BTreeMap<String, Value> = visible
            .iter()
            .map(|(name, msgs)| (name.clone(), Value::set(msgs.iter().map(|m| Value::Row(m.row.clone())))))
            .collect();
        let memo = RefCell::new(Memo::default());
        let outcome = {
            let snap = Snapshot {
                program: p,
                state: &self.state,
                mailboxes: &mailboxes,
                udfs: &self.udfs,
                memo: &memo,
                endpoint: &self.endpoint,
                only,
                options: &self.options,
            };
            run_snapshot(&snap, &self.engine, &visible)
        };
        let (mut ev, consumed) = match outcome {
            Ok(v) => v,
            Err(e) => {
                self.drop_messages(visible.values().flatten());
                self.dirty = false;
                return Err(e);
            }
        };
        for (name, v) in &ev.queries {
            if matches!(p.data(name).map(|d| &d.kind), Some(DataKind::Var { .. })) {
                ev.effects.push(Effect::AssignVar {
                    var: name.clone(),
                    value: v.clone(),
                });
            }
        }
        let before_tick = self.state.clone();
        let delta = match self.state.apply(p, ev.effects) {
            Ok(d) => d,
            Err(e) => {
                self.state = before_tick;
                self.drop_messages(visible.values().flatten());
                self.dirty = false;
                return Err(e);
            }
        };
        self.dirty = self.state.tables != before_tick.tables || self.state.vars != before_tick.vars;
        self.drop_messages(consumed.iter());
        for (udf, n) in &memo.borrow().invocations {
            *self.state.udf_invocations.entry(udf.clone()).or_default() += n;
        }
        self.state.tick += 1;
        let mut outbound = ev.outbound;
        outbound.sort();
        outbound.dedup();
        Ok(TickResult {
            tick: self.state.tick - 1,
            outbound,
            delta,
            iterations: ev.iterations,
            op_rows: ev.op_rows,
            consumed: consumed.len(),
            inspect: ev.inspect,
        })
    }

    fn drop_messages<'m>(&mut self, msgs: impl Iterator<Item = &'m Message>) {
        for m in msgs {
            if let Some(set) = self.state.mailboxes.get_mut(&m.mailbox) {
                set.remove(m);
                if set.is_empty() {
                    self.state.mailboxes.remove(&m.mailbox);
                }
            }
        }
    }

    /// Evaluates `e` against the current state with `bindings` in scope.
    /// Queries are computed first; mailboxes are not visible.
    pub fn eval_with(&self, e: &Expr, bindings: &[(String, Value)]) -> Result<Value, RuntimeError> {
        let memo = RefCell::new(Memo::default());
        let mailboxes = BTreeMap::new();
        let none = BTreeSet::new();
        let snap = Snapshot {
            program: &self.program,
            state: &self.state,
            mailboxes: &mailboxes,
            udfs: &self.udfs,
            memo: &memo,
            endpoint: &self.endpoint,
            only: Some(&none),
            options: &self.options,
        };
        let queries = if self.program.queries.is_empty() {
            BTreeMap::new()
        } else {
            match &self.engine {
                Engine::Interpreter(i) => i.evaluate(&snap)?.queries,
                Engine::Graph(g) => g.evaluate(&snap)?.queries,
            }
        };
        snap.ctx(&queries).eval(e, &Env::empty().extend(bindings))
    }

    /// Per-UDF uses within the most recent computation are not retained;
    /// this evaluates `udf` memoization for a batch of argument lists.
    pub fn memo_probe(&self, udf: &str, calls: &[Vec<Value>]) -> Result<(u64, u64), RuntimeError> {
        let memo = RefCell::new(Memo::default());
        let queries = BTreeMap::new();
        let mailboxes = BTreeMap::new();
        let ctx = Ctx {
            program: &self.program,
            state: &self.state,
            mailboxes: &mailboxes,
            queries: &queries,
            udfs: &self.udfs,
            memo: &memo,
            endpoint: &self.endpoint,
        };
        for args in calls {
            ctx.call(udf, args.clone())?;
        }
        let m = memo.borrow();
        Ok((
            m.invocations.get(udf).copied().unwrap_or(0),
            m.uses.get(udf).copied().unwrap_or(0),
        ))
    }
}

fn run_snapshot(
    snap: &Snapshot<'_>,
    engine: &Engine,
    visible: &BTreeMap<String, Vec<Message>>,
) -> Result<(Evaluated, Vec<Message>), RuntimeError> {
    let ev = match engine {
        Engine::Interpreter(i) => i.evaluate(snap)?,
        Engine::Graph(g) => g.evaluate(snap)?,
    };
    let ctx = snap.ctx(&ev.queries);
    let consumed = consumption(&ctx, snap, visible)?;
    Ok((ev, consumed))
}

/// Messages handled this tick. Unguarded handlers take their whole snapshot;
/// guarded per-message handlers take the messages whose guard holds; guarded
/// batch handlers take everything once the guard holds. Messages for
/// mailboxes without a handler are dropped.
fn consumption(ctx: &Ctx<'_>, snap: &Snapshot<'_>, visible: &BTreeMap<String, Vec<Message>>) -> Result<Vec<Message>, RuntimeError> {
    let mut out = Vec::new();
    for (name, msgs) in visible {
        let Some(h) = ctx.program.handler(name) else {
            out.extend(msgs.iter().cloned());
            continue;
        };
        if !snap.runs(name) {
            continue;
        }
        match (&h.guard, h.mode) {
            (None, _) => out.extend(msgs.iter().cloned()),
            (Some(g), HandlerMode::Batch) => {
                if truthy(&ctx.eval(g, &Env::empty())?)? {
                    out.extend(msgs.iter().cloned());
                }
            }
            (Some(g), HandlerMode::PerMessage) => {
                let mut taken = BTreeSet::new();
                ctx.for_bindings(&message_clauses(h), &Env::empty(), &mut |env| {
                    if truthy(&ctx.eval(g, env)?)? {
                        if let Some(Value::Row(r)) = env.get(crate::ir::desugar::MSG_VAR) {
                            taken.insert(r.clone());
                        }
                    }
                    Ok(())
                })?;
                out.extend(msgs.iter().filter(|m| taken.contains(&m.row)).cloned());
            }
        }
    }
    Ok(out)
}

pub(crate) fn truthy(v: &Value) -> Result<bool, RuntimeError> {
    state::reveal(v)
        .as_bool()
        .ok_or_else(|| RuntimeError::Eval(format!("expected bool, found {}", v.kind_name())))
}

/// Combines two results of one query: set union, or lattice merge.
pub(crate) fn combine(a: Value, b: Value) -> Result<Value, RuntimeError> {
    match (a, b) {
        (Value::Set(x), y) if x.is_empty() => Ok(y),
        (x, Value::Set(y)) if y.is_empty() => Ok(x),
        (Value::Set(x), Value::Set(y)) => {
            let mut out = (*x).clone();
            out.extend(y.iter().cloned());
            Ok(Value::Set(Arc::new(out)))
        }
        (Value::Lattice(x), Value::Lattice(y)) => Ok(Value::Lattice(x.merge(&y)?)),
        (x, y) if x == y => Ok(x),
        (x, y) => Err(RuntimeError::Eval(format!(
            "query bodies disagree: {} vs {}",
            x.kind_name(),
            y.kind_name()
        ))),
    }
}

fn key_parts(ctx: &Ctx<'_>, key: &[crate::ir::Expr], env: &Env) -> Result<Vec<Scalar>, RuntimeError> {
    ctx.key(key, env)
}

fn rows_of(v: &Value) -> Result<Vec<Row>, RuntimeError> {
    match v {
        Value::Row(r) => Ok(vec![r.clone()]),
        other => elements(other)?
            .into_iter()
            .map(|x| match x {
                Value::Row(r) => Ok(r),
                o => Err(RuntimeError::Eval(format!("expected a row, found {}", o.kind_name()))),
            })
            .collect(),
    }
}

fn with_key(p: &Program, table: &str, key: &[Scalar], row: &Row) -> Row {
    let Some(class) = p.table_class(table) else { return row.clone() };
    if class.key.iter().all(|k| row.contains_key(k)) {
        return row.clone();
    }
    let mut r = (**row).clone();
    for (k, v) in class.key.iter().zip(key) {
        r.entry(k.clone()).or_insert_with(|| Value::Scalar(v.clone()));
    }
    Arc::new(r)
}

/// Effects and sends of one leaf statement under one binding.
pub(crate) fn leaf(ctx: &Ctx<'_>, s: &Statement, env: &Env, effects: &mut Vec<Effect>, out: &mut Vec<Outbound>) -> Result<(), RuntimeError> {
    match s {
        Statement::Merge { target, value } => {
            let v = ctx.eval(value, env)?;
            match target {
                Target::Var { name } => effects.push(Effect::MergeVar { var: name.clone(), value: v }),
                Target::Table { name } => {
                    for row in rows_of(&v)? {
                        effects.push(Effect::MergeRow { table: name.clone(), row });
                    }
                }
                Target::Row { table, key } => {
                    let key = key_parts(ctx, key, env)?;
                    for row in rows_of(&v)? {
                        effects.push(Effect::MergeRow {
                            table: table.clone(),
                            row: with_key(ctx.program, table, &key, &row),
                        });
                    }
                }
                Target::Field { table, key, field } => effects.push(Effect::MergeField {
                    table: table.clone(),
                    key: key_parts(ctx, key, env)?,
                    field: field.clone(),
                    value: v,
                }),
            }
        }
        Statement::Assign { target, value } => {
            let v = ctx.eval(value, env)?;
            match target {
                Target::Var { name } => effects.push(Effect::AssignVar { var: name.clone(), value: v }),
                Target::Table { name } => effects.push(Effect::AssignTable { table: name.clone(), rows: rows_of(&v)? }),
                Target::Row { table, key } => {
                    let key = key_parts(ctx, key, env)?;
                    let rows = rows_of(&v)?;
                    let [row] = rows.as_slice() else {
                        return Err(RuntimeError::Eval(format!("assignment to a {table} row needs exactly one row")));
                    };
                    effects.push(Effect::AssignRow {
                        table: table.clone(),
                        row: with_key(ctx.program, table, &key, row),
                        key,
                    });
                }
                Target::Field { table, key, field } => effects.push(Effect::AssignField {
                    table: table.clone(),
                    key: key_parts(ctx, key, env)?,
                    field: field.clone(),
                    value: v,
                }),
            }
        }
        Statement::Delete { target } => match target {
            Target::Var { name } => effects.push(Effect::ResetVar { var: name.clone() }),
            Target::Table { name } => effects.push(Effect::ClearTable { table: name.clone() }),
            Target::Row { table, key } => effects.push(Effect::DeleteRows {
                table: table.clone(),
                key: key_parts(ctx, key, env)?,
            }),
            Target::Field { table, field, .. } => {
                return Err(RuntimeError::Eval(format!("cannot delete field {table}.{field}")));
            }
        },
        Statement::Send { mailbox, value, to } => {
            let v = ctx.eval(value, env)?;
            let to = match to {
                None => None,
                Some(e) => match state::reveal(&ctx.eval(e, env)?) {
                    Value::Scalar(Scalar::Str(s)) => Some(s),
                    other => return Err(RuntimeError::Eval(format!("send destination must be a string, found {}", other.kind_name()))),
                },
            };
            for row in message_rows(ctx.program, mailbox, &v)? {
                out.push(Outbound {
                    mailbox: mailbox.clone(),
                    row,
                    to: to.clone(),
                });
            }
        }
        Statement::UdfCall { udf, args } => {
            let args = args.iter().map(|a| ctx.eval(a, env)).collect::<Result<Vec<_>, _>>()?;
            ctx.call(udf, args)?;
        }
        Statement::QueryRef { query } => {
            if !ctx.queries.contains_key(query) {
                return Err(RuntimeError::Eval(format!("query {query} was not computed")));
            }
        }
        Statement::Return { .. } | Statement::ForEach { .. } => {
            return Err(RuntimeError::Eval("statement must be desugared before execution".into()));
        }
    }
    Ok(())
}

/// Rows of the messages a Send produces. A record is one message; a set
/// yields one message per element; tuples map positionally onto the
/// mailbox's declared fields.
pub(crate) fn message_rows(p: &Program, mailbox: &str, v: &Value) -> Result<Vec<Row>, RuntimeError> {
    let fields = p.mailbox_fields(mailbox).unwrap_or_default();
    let one = |x: &Value| -> Result<Row, RuntimeError> {
        match x {
            Value::Row(r) => Ok(r.clone()),
            Value::Scalar(Scalar::Tuple(items)) if items.len() == fields.len() && fields.len() != 1 => Ok(Arc::new(
                fields
                    .iter()
                    .zip(items)
                    .map(|(f, s)| (f.clone(), Value::Scalar(s.clone())))
                    .collect(),
            )),
            other if fields.len() == 1 => Ok(Arc::new(BTreeMap::from([(fields[0].clone(), other.clone())]))),
            other => Err(RuntimeError::Eval(format!("cannot send a {} to {mailbox}", other.kind_name()))),
        }
    };
    match v {
        Value::Set(items) => items.iter().map(one).collect(),
        other => Ok(vec![one(other)?]),
    }
}

/// Desugared statements of the handlers this snapshot runs.
pub(crate) fn active_statements(snap: &Snapshot<'_>) -> Vec<(String, Vec<Statement>)> {
    snap.program
        .handlers
        .iter()
        .filter(|h| snap.runs(&h.name) && snap.mailboxes.contains_key(&h.name))
        .map(|h| (h.name.clone(), crate::ir::desugar_handler(h)))
        .collect()
}
