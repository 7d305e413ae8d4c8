//! The declarative program representation.
//!
//! A [`Program`] declares a data model (classes, tables, vars), named queries,
//! event handlers over mailboxes, UDFs, and per-handler facet annotations
//! (consistency inline on the handler, availability and targets in side
//! tables). Programs are built with [`build`] or loaded from JSON.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::lattice::{ScalarKind, Shape};
use crate::value::Value;

pub mod build;
pub mod desugar;
pub mod stratify;
pub mod validate;

pub use desugar::{desugar_handler, desugar_program, desugar_statements, response_mailbox};
pub use stratify::{stratify, StratifyError, StratumAssignment};
pub use validate::{validate, Issue, IssueKind, ValidationReport};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    #[serde(default)]
    pub classes: Vec<ClassDecl>,
    #[serde(default)]
    pub data: Vec<DataDecl>,
    /// Outbound mailboxes with no handler in this program (alerts, result
    /// channels consumed by clients or other services).
    #[serde(default)]
    pub channels: Vec<ChannelDecl>,
    #[serde(default)]
    pub queries: Vec<QueryDef>,
    #[serde(default)]
    pub handlers: Vec<Handler>,
    #[serde(default)]
    pub udfs: Vec<UdfDecl>,
    #[serde(default)]
    pub availability: FacetTable<AvailSpec>,
    #[serde(default)]
    pub targets: FacetTable<TargetSpec>,
}

impl Program {
    pub fn class(&self, name: &str) -> Option<&ClassDecl> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn data(&self, name: &str) -> Option<&DataDecl> {
        self.data.iter().find(|d| d.name == name)
    }

    pub fn table_class(&self, table: &str) -> Option<&ClassDecl> {
        match &self.data(table)?.kind {
            DataKind::Table { class } => self.class(class),
            DataKind::Var { .. } => None,
        }
    }

    pub fn handler(&self, name: &str) -> Option<&Handler> {
        self.handlers.iter().find(|h| h.name == name)
    }

    pub fn query(&self, name: &str) -> Option<&QueryDef> {
        self.queries.iter().find(|q| q.name == name)
    }

    pub fn udf(&self, name: &str) -> Option<&UdfDecl> {
        self.udfs.iter().find(|u| u.name == name)
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelDecl> {
        self.channels.iter().find(|c| c.name == name)
    }

    /// Declared fields of a mailbox (handler params or channel fields), not
    /// counting the implicit `message_id` / `reply_to`.
    pub fn mailbox_fields(&self, mailbox: &str) -> Option<Vec<String>> {
        if let Some(h) = self.handler(mailbox) {
            return Some(h.params.iter().map(|p| p.name.clone()).collect());
        }
        if let Some(c) = self.channel(mailbox) {
            return Some(c.fields.clone());
        }
        if desugar::handler_of_response(mailbox).and_then(|h| self.handler(h)).is_some() {
            return Some(vec![crate::value::PAYLOAD.to_string()]);
        }
        None
    }

    pub fn is_mailbox(&self, name: &str) -> bool {
        self.mailbox_fields(name).is_some()
    }

    pub fn avail_for(&self, handler: &str) -> Option<&AvailSpec> {
        self.availability.get(handler)
    }

    pub fn target_for(&self, handler: &str) -> Option<&TargetSpec> {
        self.targets.get(handler)
    }

    pub fn from_json(text: &str) -> Result<Program, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("program encodes")
    }

    /// Names of tables and vars targeted by any mutation statement.
    pub fn mutated_data(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for h in &self.handlers {
            for s in &h.body {
                s.visit(&mut |st| match st {
                    Statement::Merge { target, .. } | Statement::Assign { target, .. } | Statement::Delete { target } => {
                        out.insert(target.data_name().to_string());
                    }
                    _ => {}
                });
            }
        }
        out
    }
}

/// A default plus per-handler overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
pub struct FacetTable<T> {
    #[serde(default)]
    pub default: Option<T>,
    #[serde(default)]
    pub overrides: BTreeMap<String, T>,
}

impl<T> Default for FacetTable<T> {
    fn default() -> Self {
        FacetTable {
            default: None,
            overrides: BTreeMap::new(),
        }
    }
}

impl<T> FacetTable<T> {
    pub fn get(&self, handler: &str) -> Option<&T> {
        self.overrides.get(handler).or(self.default.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDecl {
    pub name: String,
    pub fields: Vec<FieldDecl>,
    pub key: Vec<String>,
    #[serde(default)]
    pub partition: Option<String>,
}

impl ClassDecl {
    pub fn field(&self, name: &str) -> Option<&FieldDecl> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn is_key(&self, name: &str) -> bool {
        self.key.iter().any(|k| k == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDecl {
    pub name: String,
    pub ty: FieldType,
    /// Filled in when a row is created without this (scalar) field.
    #[serde(default)]
    pub default: Option<Value>,
}

/// Semantic type of a field, param, or var.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    Scalar(ScalarKind),
    Lattice(Shape),
    /// Reference to a row of a class, stored as its key.
    Ref(String),
    /// Grow-only set of references, stored as a `SetUnion` of keys.
    RefSet(String),
}

impl FieldType {
    pub fn lattice_shape(&self) -> Option<Shape> {
        match self {
            FieldType::Lattice(s) => Some(s.clone()),
            FieldType::RefSet(_) => Some(Shape::SetUnion),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataDecl {
    pub name: String,
    pub kind: DataKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Table {
        class: String,
    },
    Var {
        ty: FieldType,
        #[serde(default)]
        init: Option<Value>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDecl {
    pub name: String,
    pub fields: Vec<String>,
}

/// A named query. Several bodies under one name are unioned (or merged, for
/// lattice-valued bodies); bodies may refer to the query itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDef {
    pub name: String,
    #[serde(default)]
    pub params: Vec<String>,
    pub bodies: Vec<Expr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub ty: FieldType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandlerMode {
    /// Body statements are mapped over each message in the mailbox.
    #[default]
    PerMessage,
    /// Body sees the whole mailbox by name, once per tick.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handler {
    pub name: String,
    #[serde(default)]
    pub params: Vec<Param>,
    #[serde(default)]
    pub body: Vec<Statement>,
    #[serde(default)]
    pub consistency: ConsistencySpec,
    /// Messages stay buffered until the guard holds. Per-message handlers
    /// evaluate it with the message bound; batch handlers once per tick.
    #[serde(default)]
    pub guard: Option<Expr>,
    #[serde(default)]
    pub mode: HandlerMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyLevel {
    #[default]
    Eventual,
    Serializable,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsistencySpec {
    #[serde(default)]
    pub level: ConsistencyLevel,
    /// Predicates over post-state; handler params are in scope.
    #[serde(default)]
    pub invariants: Vec<Expr>,
    /// Accepted for compatibility; carries no semantics here.
    #[serde(default)]
    pub isolation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdfDecl {
    pub name: String,
    pub arity: usize,
    /// Trusted, not verified.
    #[serde(default)]
    pub monotone: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLevel {
    Az,
    Dc,
    Rack,
    Vm,
}

impl DomainLevel {
    /// Position in a failure-domain path `(az, dc, rack, vm)`.
    pub fn depth(self) -> usize {
        match self {
            DomainLevel::Az => 0,
            DomainLevel::Dc => 1,
            DomainLevel::Rack => 2,
            DomainLevel::Vm => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailSpec {
    pub domain: DomainLevel,
    pub failures: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetSpec {
    #[serde(default)]
    pub latency_ms: Option<f64>,
    #[serde(default)]
    pub cost: Option<f64>,
    #[serde(default)]
    pub features: BTreeSet<String>,
}

// ---------------------------------------------------------------------------
// Statements and expressions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stmt", rename_all = "snake_case")]
pub enum Statement {
    /// Runs `body` once per binding produced by `clauses`.
    ForEach { clauses: Vec<Clause>, body: Vec<Statement> },
    /// Evaluates a named query for its own sake.
    QueryRef { query: String },
    Merge { target: Target, value: Expr },
    Assign { target: Target, value: Expr },
    Delete { target: Target },
    Send {
        mailbox: String,
        value: Expr,
        #[serde(default)]
        to: Option<Expr>,
    },
    Return { value: Expr },
    UdfCall { udf: String, args: Vec<Expr> },
}

impl Statement {
    /// Assign and Delete are non-monotone regardless of their operands.
    pub fn is_syntactically_non_monotone(&self) -> bool {
        matches!(self, Statement::Assign { .. } | Statement::Delete { .. })
    }

    /// Pre-order walk over this statement and nested statements.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Statement)) {
        f(self);
        if let Statement::ForEach { body, .. } = self {
            for s in body {
                s.visit(f);
            }
        }
    }

    /// Every expression directly owned by this statement (not nested
    /// statements).
    pub fn own_exprs(&self) -> Vec<&Expr> {
        let mut out = Vec::new();
        match self {
            Statement::ForEach { clauses, .. } => {
                for c in clauses {
                    out.push(c.expr());
                }
            }
            Statement::QueryRef { .. } => {}
            Statement::Merge { target, value } | Statement::Assign { target, value } => {
                out.extend(target.key_exprs());
                out.push(value);
            }
            Statement::Delete { target } => out.extend(target.key_exprs()),
            Statement::Send { value, to, .. } => {
                out.push(value);
                if let Some(t) = to {
                    out.push(t);
                }
            }
            Statement::Return { value } => out.push(value),
            Statement::UdfCall { args, .. } => out.extend(args.iter()),
        }
        out
    }
}

/// Mutation target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum Target {
    Var { name: String },
    Table { name: String },
    /// Rows whose key starts with `key`.
    Row { table: String, key: Vec<Expr> },
    Field { table: String, key: Vec<Expr>, field: String },
}

impl Target {
    pub fn data_name(&self) -> &str {
        match self {
            Target::Var { name } | Target::Table { name } => name,
            Target::Row { table, .. } | Target::Field { table, .. } => table,
        }
    }

    pub fn key_exprs(&self) -> Vec<&Expr> {
        match self {
            Target::Row { key, .. } | Target::Field { key, .. } => key.iter().collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "clause", rename_all = "snake_case")]
pub enum Clause {
    Gen { pat: Pattern, source: Expr },
    Filter { cond: Expr },
    Let { name: String, value: Expr },
}

impl Clause {
    pub fn expr(&self) -> &Expr {
        match self {
            Clause::Gen { source, .. } => source,
            Clause::Filter { cond } => cond,
            Clause::Let { value, .. } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Bind(String),
    Tuple(Vec<Pattern>),
    Wild,
}

impl Pattern {
    pub fn names(&self, out: &mut Vec<String>) {
        match self {
            Pattern::Bind(n) => out.push(n.clone()),
            Pattern::Tuple(ps) => ps.iter().for_each(|p| p.names(out)),
            Pattern::Wild => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnOp {
    Not,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
    In,
    NotIn,
    Union,
    Difference,
}

impl BinOp {
    pub fn is_comparison(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fold", rename_all = "snake_case")]
pub enum FoldKind {
    Count,
    Exists,
    Sum,
    Min,
    Max,
    /// Lattice merge of every element, from the bottom of `shape`.
    Merge { shape: Shape },
    /// Over `(order_key, value)` pairs: values sorted by key, as a tuple.
    ArrayAgg,
    /// Deterministic pick (the least element).
    Any,
    /// Left fold of a binary UDF over `(order_key, value)` pairs in key
    /// order; `func` evaluates to the UDF name.
    Reduce { func: Box<Expr> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "expr", rename_all = "snake_case")]
pub enum Expr {
    Lit { value: Value },
    /// Bound variable, or a table / var / query / mailbox by name.
    Var { name: String },
    Field { base: Box<Expr>, field: String },
    Index { base: Box<Expr>, index: Box<Expr> },
    /// Half-open slice `[start, end)` of a tuple.
    Slice { base: Box<Expr>, start: Box<Expr>, end: Box<Expr> },
    Tuple { items: Vec<Expr> },
    Record { fields: Vec<(String, Expr)> },
    /// Rows of `table` whose key starts with `key`; empty when absent.
    Lookup { table: String, key: Vec<Expr> },
    HasKey { table: String, key: Vec<Expr> },
    Unary { op: UnOp, arg: Box<Expr> },
    Binary { op: BinOp, left: Box<Expr>, right: Box<Expr> },
    Comprehension { clauses: Vec<Clause>, yield_: Box<Expr> },
    Fold { kind: FoldKind, arg: Box<Expr> },
    Call { udf: String, args: Vec<Expr> },
    /// Call of a UDF whose name is computed at runtime.
    CallDyn { func: Box<Expr>, args: Vec<Expr> },
    If { cond: Box<Expr>, then: Box<Expr>, else_: Box<Expr> },
    /// Integers `[lo, hi)` as a set.
    Range { lo: Box<Expr>, hi: Box<Expr> },
    Len { arg: Box<Expr> },
    /// Wraps a set of scalars as a `SetUnion` lattice value.
    ToSetLattice { arg: Box<Expr> },
    /// Endpoint name of the executing node.
    SelfEndpoint,
}

impl Expr {
    /// Pre-order walk over sub-expressions, including clause expressions.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Lit { .. } | Expr::Var { .. } | Expr::SelfEndpoint => {}
            Expr::Field { base, .. } => base.visit(f),
            Expr::Index { base, index } => {
                base.visit(f);
                index.visit(f);
            }
            Expr::Slice { base, start, end } => {
                base.visit(f);
                start.visit(f);
                end.visit(f);
            }
            Expr::Tuple { items } => items.iter().for_each(|e| e.visit(f)),
            Expr::Record { fields } => fields.iter().for_each(|(_, e)| e.visit(f)),
            Expr::Lookup { key, .. } | Expr::HasKey { key, .. } => key.iter().for_each(|e| e.visit(f)),
            Expr::Unary { arg, .. } | Expr::Len { arg } | Expr::ToSetLattice { arg } => arg.visit(f),
            Expr::Binary { left, right, .. } => {
                left.visit(f);
                right.visit(f);
            }
            Expr::Comprehension { clauses, yield_ } => {
                clauses.iter().for_each(|c| c.expr().visit(f));
                yield_.visit(f);
            }
            Expr::Fold { kind, arg } => {
                if let FoldKind::Reduce { func } = kind {
                    func.visit(f);
                }
                arg.visit(f);
            }
            Expr::Call { args, .. } => args.iter().for_each(|e| e.visit(f)),
            Expr::CallDyn { func, args } => {
                func.visit(f);
                args.iter().for_each(|e| e.visit(f));
            }
            Expr::If { cond, then, else_ } => {
                cond.visit(f);
                then.visit(f);
                else_.visit(f);
            }
            Expr::Range { lo, hi } => {
                lo.visit(f);
                hi.visit(f);
            }
        }
    }
}
