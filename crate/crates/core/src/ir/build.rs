//! Terse constructors for building programs in Rust.

use crate::lattice::{ScalarKind, Shape};
use crate::value::Value;

use super::*;

pub fn lit(v: impl Into<Value>) -> Expr {
    Expr::Lit { value: v.into() }
}

pub fn var(name: &str) -> Expr {
    Expr::Var { name: name.to_string() }
}

pub fn field(base: Expr, name: &str) -> Expr {
    Expr::Field {
        base: Box::new(base),
        field: name.to_string(),
    }
}

/// `a.b` shorthand for a bound variable's field.
pub fn dot(base: &str, name: &str) -> Expr {
    field(var(base), name)
}

pub fn bin(op: BinOp, l: Expr, r: Expr) -> Expr {
    Expr::Binary {
        op,
        left: Box::new(l),
        right: Box::new(r),
    }
}

pub fn add(l: Expr, r: Expr) -> Expr {
    bin(BinOp::Add, l, r)
}

pub fn sub(l: Expr, r: Expr) -> Expr {
    bin(BinOp::Sub, l, r)
}

pub fn mul(l: Expr, r: Expr) -> Expr {
    bin(BinOp::Mul, l, r)
}

pub fn div(l: Expr, r: Expr) -> Expr {
    bin(BinOp::Div, l, r)
}

pub fn eq(l: Expr, r: Expr) -> Expr {
    bin(BinOp::Eq, l, r)
}

pub fn ne(l: Expr, r: Expr) -> Expr {
    bin(BinOp::Ne, l, r)
}

pub fn lt(l: Expr, r: Expr) -> Expr {
    bin(BinOp::Lt, l, r)
}

pub fn ge(l: Expr, r: Expr) -> Expr {
    bin(BinOp::Ge, l, r)
}

pub fn gt(l: Expr, r: Expr) -> Expr {
    bin(BinOp::Gt, l, r)
}

pub fn and(l: Expr, r: Expr) -> Expr {
    bin(BinOp::And, l, r)
}

pub fn not(e: Expr) -> Expr {
    Expr::Unary {
        op: UnOp::Not,
        arg: Box::new(e),
    }
}

pub fn not_in(l: Expr, r: Expr) -> Expr {
    bin(BinOp::NotIn, l, r)
}

pub fn tuple(items: Vec<Expr>) -> Expr {
    Expr::Tuple { items }
}

pub fn record<const N: usize>(fields: [(&str, Expr); N]) -> Expr {
    Expr::Record {
        fields: fields.into_iter().map(|(k, e)| (k.to_string(), e)).collect(),
    }
}

pub fn lookup(table: &str, key: Vec<Expr>) -> Expr {
    Expr::Lookup {
        table: table.to_string(),
        key,
    }
}

pub fn has_key(table: &str, key: Vec<Expr>) -> Expr {
    Expr::HasKey {
        table: table.to_string(),
        key,
    }
}

pub fn index(base: Expr, i: Expr) -> Expr {
    Expr::Index {
        base: Box::new(base),
        index: Box::new(i),
    }
}

pub fn slice(base: Expr, start: Expr, end: Expr) -> Expr {
    Expr::Slice {
        base: Box::new(base),
        start: Box::new(start),
        end: Box::new(end),
    }
}

pub fn comp(clauses: Vec<Clause>, yield_: Expr) -> Expr {
    Expr::Comprehension {
        clauses,
        yield_: Box::new(yield_),
    }
}

pub fn fold(kind: FoldKind, arg: Expr) -> Expr {
    Expr::Fold {
        kind,
        arg: Box::new(arg),
    }
}

pub fn count(arg: Expr) -> Expr {
    fold(FoldKind::Count, arg)
}

pub fn call(udf: &str, args: Vec<Expr>) -> Expr {
    Expr::Call {
        udf: udf.to_string(),
        args,
    }
}

pub fn if_(cond: Expr, then: Expr, else_: Expr) -> Expr {
    Expr::If {
        cond: Box::new(cond),
        then: Box::new(then),
        else_: Box::new(else_),
    }
}

pub fn range(lo: Expr, hi: Expr) -> Expr {
    Expr::Range {
        lo: Box::new(lo),
        hi: Box::new(hi),
    }
}

pub fn len(arg: Expr) -> Expr {
    Expr::Len { arg: Box::new(arg) }
}

pub fn to_set_lattice(arg: Expr) -> Expr {
    Expr::ToSetLattice { arg: Box::new(arg) }
}

// Clauses and patterns

pub fn gen(name: &str, source: Expr) -> Clause {
    Clause::Gen {
        pat: Pattern::Bind(name.to_string()),
        source,
    }
}

pub fn gen_tuple(names: &[&str], source: Expr) -> Clause {
    Clause::Gen {
        pat: Pattern::Tuple(
            names
                .iter()
                .map(|n| if *n == "_" { Pattern::Wild } else { Pattern::Bind(n.to_string()) })
                .collect(),
        ),
        source,
    }
}

pub fn filter(cond: Expr) -> Clause {
    Clause::Filter { cond }
}

pub fn let_(name: &str, value: Expr) -> Clause {
    Clause::Let {
        name: name.to_string(),
        value,
    }
}

// Statements and targets

pub fn t_var(name: &str) -> Target {
    Target::Var { name: name.to_string() }
}

pub fn t_table(name: &str) -> Target {
    Target::Table { name: name.to_string() }
}

pub fn t_row(table: &str, key: Vec<Expr>) -> Target {
    Target::Row {
        table: table.to_string(),
        key,
    }
}

pub fn t_field(table: &str, key: Vec<Expr>, field: &str) -> Target {
    Target::Field {
        table: table.to_string(),
        key,
        field: field.to_string(),
    }
}

pub fn merge(target: Target, value: Expr) -> Statement {
    Statement::Merge { target, value }
}

pub fn assign(target: Target, value: Expr) -> Statement {
    Statement::Assign { target, value }
}

pub fn delete(target: Target) -> Statement {
    Statement::Delete { target }
}

pub fn send(mailbox: &str, value: Expr) -> Statement {
    Statement::Send {
        mailbox: mailbox.to_string(),
        value,
        to: None,
    }
}

pub fn send_to(mailbox: &str, value: Expr, to: Expr) -> Statement {
    Statement::Send {
        mailbox: mailbox.to_string(),
        value,
        to: Some(to),
    }
}

pub fn ret(value: Expr) -> Statement {
    Statement::Return { value }
}

pub fn for_each(clauses: Vec<Clause>, body: Vec<Statement>) -> Statement {
    Statement::ForEach { clauses, body }
}

/// Statement-level conditional: a `ForEach` with only a filter.
pub fn when(cond: Expr, body: Vec<Statement>) -> Statement {
    for_each(vec![filter(cond)], body)
}

pub fn udf_call(udf: &str, args: Vec<Expr>) -> Statement {
    Statement::UdfCall {
        udf: udf.to_string(),
        args,
    }
}

// Declarations

pub fn scalar_field(name: &str, kind: ScalarKind) -> FieldDecl {
    FieldDecl {
        name: name.to_string(),
        ty: FieldType::Scalar(kind),
        default: None,
    }
}

pub fn lattice_field(name: &str, shape: Shape) -> FieldDecl {
    FieldDecl {
        name: name.to_string(),
        ty: FieldType::Lattice(shape),
        default: None,
    }
}

pub fn ref_set_field(name: &str, class: &str) -> FieldDecl {
    FieldDecl {
        name: name.to_string(),
        ty: FieldType::RefSet(class.to_string()),
        default: None,
    }
}

pub fn class(name: &str, fields: Vec<FieldDecl>, key: &[&str]) -> ClassDecl {
    ClassDecl {
        name: name.to_string(),
        fields,
        key: key.iter().map(|k| k.to_string()).collect(),
        partition: None,
    }
}

pub fn table(name: &str, class: &str) -> DataDecl {
    DataDecl {
        name: name.to_string(),
        kind: DataKind::Table { class: class.to_string() },
    }
}

pub fn var_decl(name: &str, ty: FieldType, init: Option<Value>) -> DataDecl {
    DataDecl {
        name: name.to_string(),
        kind: DataKind::Var { ty, init },
    }
}

pub fn param(name: &str, kind: ScalarKind) -> Param {
    Param {
        name: name.to_string(),
        ty: FieldType::Scalar(kind),
    }
}

pub fn channel(name: &str, fields: &[&str]) -> ChannelDecl {
    ChannelDecl {
        name: name.to_string(),
        fields: fields.iter().map(|f| f.to_string()).collect(),
    }
}

pub fn query(name: &str, bodies: Vec<Expr>) -> QueryDef {
    QueryDef {
        name: name.to_string(),
        params: Vec::new(),
        bodies,
    }
}

pub fn udf(name: &str, arity: usize, monotone: bool) -> UdfDecl {
    UdfDecl {
        name: name.to_string(),
        arity,
        monotone,
    }
}

impl Handler {
    pub fn new(name: &str, params: Vec<Param>, body: Vec<Statement>) -> Handler {
        Handler {
            name: name.to_string(),
            params,
            body,
            consistency: ConsistencySpec::default(),
            guard: None,
            mode: HandlerMode::PerMessage,
        }
    }

    pub fn serializable(mut self, invariants: Vec<Expr>) -> Handler {
        self.consistency.level = ConsistencyLevel::Serializable;
        self.consistency.invariants = invariants;
        self
    }

    pub fn guarded(mut self, guard: Expr) -> Handler {
        self.guard = Some(guard);
        self
    }

    pub fn batch(mut self) -> Handler {
        self.mode = HandlerMode::Batch;
        self
    }
}
