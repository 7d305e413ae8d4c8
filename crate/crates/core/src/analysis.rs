//! Syntactic monotonicity typing and CALM classification of handlers.
//!
//! The rules are conservative: assignment, deletion and negation are never
//! monotone, UDFs are non-monotone unless declared otherwise (and that
//! declaration is trusted), and reading a scalar that some handler
//! overwrites is non-monotone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::ir::stratify::expr_refs;
use crate::ir::validate::handler_reads;
use crate::ir::{
    desugar_handler, BinOp, Clause, ConsistencyLevel, DataKind, Expr, FoldKind, Issue, IssueKind, Program, Statement,
    Target, UnOp,
};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "rule", content = "detail", rename_all = "snake_case")]
pub enum Rule {
    Assign,
    Delete,
    Negation,
    SetDifference,
    NonMonotoneFold(String),
    FoldComparison,
    MutableScalarRead(String),
    MutableFieldRead(String),
    UndeclaredUdf(String),
    DynamicCall,
    ConditionalOnState,
    NonMonotoneQuery(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reason {
    pub location: String,
    #[serde(flatten)]
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", content = "reasons")]
pub enum MonoClass {
    Monotone,
    NonMonotone(Vec<Reason>),
}

impl MonoClass {
    fn from_reasons(mut reasons: Vec<Reason>) -> MonoClass {
        if reasons.is_empty() {
            MonoClass::Monotone
        } else {
            reasons.sort();
            reasons.dedup();
            MonoClass::NonMonotone(reasons)
        }
    }

    pub fn is_monotone(&self) -> bool {
        matches!(self, MonoClass::Monotone)
    }

    pub fn reasons(&self) -> &[Reason] {
        match self {
            MonoClass::Monotone => &[],
            MonoClass::NonMonotone(r) => r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coordination {
    CoordinationFree,
    NeedsCoordination,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerReport {
    pub class: MonoClass,
    pub consistency: ConsistencyLevel,
    pub coordination: Coordination,
    /// Declared-monotone UDFs this handler relies on; not verified.
    pub trusted_udfs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub handlers: usize,
    pub coordination_free: usize,
    pub needs_coordination: usize,
    pub all_coordination_free: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalmReport {
    pub program: String,
    pub handlers: BTreeMap<String, HandlerReport>,
    pub summary: Summary,
}

impl CalmReport {
    pub fn needs_coordination(&self, handler: &str) -> bool {
        self.handlers
            .get(handler)
            .map(|h| h.coordination == Coordination::NeedsCoordination)
            .unwrap_or(false)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report encodes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:<13} {:<13} {:<18} reasons", "handler", "class", "consistency", "coordination");
        for (name, h) in &self.handlers {
            let class = if h.class.is_monotone() { "monotone" } else { "non-monotone" };
            let level = match h.consistency {
                ConsistencyLevel::Eventual => "eventual",
                ConsistencyLevel::Serializable => "serializable",
            };
            let coord = match h.coordination {
                Coordination::CoordinationFree => "free",
                Coordination::NeedsCoordination => "needs-coordination",
            };
            let reasons: Vec<String> = h.class.reasons().iter().map(|r| format!("{} ({})", r.rule, r.location)).collect();
            let _ = writeln!(out, "{name:<24} {class:<13} {level:<13} {coord:<18} {}", reasons.join("; "));
            if !h.trusted_udfs.is_empty() {
                let _ = writeln!(out, "{:<24} trusts declared-monotone udfs: {}", "", h.trusted_udfs.join(", "));
            }
        }
        let _ = writeln!(
            out,
            "{} handlers: {} coordination-free, {} need coordination",
            self.summary.handlers, self.summary.coordination_free, self.summary.needs_coordination
        );
        out
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Assign => write!(f, "assignment"),
            Rule::Delete => write!(f, "deletion"),
            Rule::Negation => write!(f, "negation"),
            Rule::SetDifference => write!(f, "set difference"),
            Rule::NonMonotoneFold(k) => write!(f, "non-monotone fold {k}"),
            Rule::FoldComparison => write!(f, "non-threshold comparison of an aggregate"),
            Rule::MutableScalarRead(n) => write!(f, "reads overwritten scalar {n}"),
            Rule::MutableFieldRead(n) => write!(f, "reads overwritten field {n}"),
            Rule::UndeclaredUdf(n) => write!(f, "udf {n} not declared monotone"),
            Rule::DynamicCall => write!(f, "dynamic udf call"),
            Rule::ConditionalOnState => write!(f, "conditional on mutable state"),
            Rule::NonMonotoneQuery(n) => write!(f, "non-monotone query {n}"),
        }
    }
}

struct Analyzer<'p> {
    p: &'p Program,
    mutated: BTreeSet<String>,
    assigned_fields: BTreeSet<String>,
    query_memo: BTreeMap<String, bool>,
    trusted: BTreeSet<String>,
}

impl<'p> Analyzer<'p> {
    fn new(p: &'p Program) -> Self {
        let mut assigned_fields = BTreeSet::new();
        for h in &p.handlers {
            for s in &h.body {
                s.visit(&mut |st| {
                    if let Statement::Assign {
                        target: Target::Field { field, .. },
                        ..
                    } = st
                    {
                        assigned_fields.insert(field.clone());
                    }
                });
            }
        }
        Analyzer {
            p,
            mutated: p.mutated_data(),
            assigned_fields,
            query_memo: BTreeMap::new(),
            trusted: BTreeSet::new(),
        }
    }

    fn is_static(&self, name: &str) -> bool {
        if self.p.data(name).is_some() && !self.mutated.contains(name) {
            return true;
        }
        // A query over static data only is itself constant.
        match self.p.query(name) {
            Some(q) => {
                let mut refs = Vec::new();
                q.bodies.iter().for_each(|b| expr_refs(b, &mut refs));
                refs.iter().all(|(n, _)| n != name && self.is_static(n))
            }
            None => false,
        }
    }

    fn query_monotone(&mut self, name: &str) -> bool {
        if let Some(&m) = self.query_memo.get(name) {
            return m;
        }
        // Optimistic for recursion; stratification rejects negative cycles.
        self.query_memo.insert(name.to_string(), true);
        let Some(q) = self.p.query(name) else { return true };
        let mut reasons = Vec::new();
        for (i, b) in q.bodies.iter().enumerate() {
            self.expr(b, &mut Vec::new(), &format!("query {name} body {i}"), &mut reasons);
        }
        let m = reasons.is_empty();
        self.query_memo.insert(name.to_string(), m);
        m
    }

    fn push(reasons: &mut Vec<Reason>, loc: &str, rule: Rule) {
        reasons.push(Reason {
            location: loc.to_string(),
            rule,
        });
    }

    fn clause(&mut self, c: &Clause, bound: &mut Vec<String>, loc: &str, reasons: &mut Vec<Reason>) {
        match c {
            Clause::Gen { pat, source } => {
                self.expr(source, bound, loc, reasons);
                pat.names(bound);
            }
            Clause::Filter { cond } => self.expr(cond, bound, loc, reasons),
            Clause::Let { name, value } => {
                self.expr(value, bound, loc, reasons);
                bound.push(name.clone());
            }
        }
    }

    fn expr(&mut self, e: &Expr, bound: &mut Vec<String>, loc: &str, reasons: &mut Vec<Reason>) {
        match e {
            Expr::Var { name } => {
                if bound.contains(name) {
                    return;
                }
                if self.p.query(name).is_some() {
                    if !self.query_monotone(name) {
                        Self::push(reasons, loc, Rule::NonMonotoneQuery(name.clone()));
                    }
                    return;
                }
                if let Some(DataKind::Var { ty, .. }) = self.p.data(name).map(|d| &d.kind) {
                    if ty.lattice_shape().is_none() && self.mutated.contains(name) {
                        Self::push(reasons, loc, Rule::MutableScalarRead(name.clone()));
                    }
                }
            }
            Expr::Field { base, field } => {
                if self.assigned_fields.contains(field) {
                    Self::push(reasons, loc, Rule::MutableFieldRead(field.clone()));
                }
                self.expr(base, bound, loc, reasons);
            }
            Expr::Unary { op: UnOp::Not, arg } => {
                Self::push(reasons, loc, Rule::Negation);
                self.expr(arg, bound, loc, reasons);
            }
            Expr::Binary { op, left, right } => {
                match op {
                    BinOp::NotIn => Self::push(reasons, loc, Rule::Negation),
                    BinOp::Difference => Self::push(reasons, loc, Rule::SetDifference),
                    op if op.is_comparison() => {
                        let growing = |e: &Expr| matches!(e, Expr::Fold { .. } | Expr::Len { .. });
                        let threshold = match op {
                            BinOp::Ge | BinOp::Gt => !growing(right),
                            BinOp::Le | BinOp::Lt => !growing(left),
                            _ => false,
                        };
                        if (growing(left) || growing(right)) && !threshold {
                            Self::push(reasons, loc, Rule::FoldComparison);
                        }
                    }
                    _ => {}
                }
                self.expr(left, bound, loc, reasons);
                self.expr(right, bound, loc, reasons);
            }
            Expr::Comprehension { clauses, yield_ } => {
                let mark = bound.len();
                for c in clauses {
                    self.clause(c, bound, loc, reasons);
                }
                self.expr(yield_, bound, loc, reasons);
                bound.truncate(mark);
            }
            Expr::Fold { kind, arg } => {
                let name = match kind {
                    FoldKind::Count | FoldKind::Exists | FoldKind::Max | FoldKind::Merge { .. } => None,
                    FoldKind::Sum => Some("sum"),
                    FoldKind::Min => Some("min"),
                    FoldKind::ArrayAgg => Some("array_agg"),
                    FoldKind::Any => Some("any"),
                    FoldKind::Reduce { .. } => Some("reduce"),
                };
                if let Some(n) = name {
                    Self::push(reasons, loc, Rule::NonMonotoneFold(n.to_string()));
                }
                if let FoldKind::Reduce { func } = kind {
                    self.expr(func, bound, loc, reasons);
                }
                self.expr(arg, bound, loc, reasons);
            }
            Expr::Call { udf, args } => {
                match self.p.udf(udf) {
                    Some(u) if u.monotone => {
                        self.trusted.insert(udf.clone());
                    }
                    _ => Self::push(reasons, loc, Rule::UndeclaredUdf(udf.clone())),
                }
                for a in args {
                    self.expr(a, bound, loc, reasons);
                }
            }
            Expr::CallDyn { func, args } => {
                Self::push(reasons, loc, Rule::DynamicCall);
                self.expr(func, bound, loc, reasons);
                for a in args {
                    self.expr(a, bound, loc, reasons);
                }
            }
            Expr::If { cond, then, else_ } => {
                let mut refs = Vec::new();
                expr_refs(cond, &mut refs);
                if refs.iter().any(|(n, _)| !bound.contains(n) && !self.is_static(n)) {
                    Self::push(reasons, loc, Rule::ConditionalOnState);
                }
                self.expr(cond, bound, loc, reasons);
                self.expr(then, bound, loc, reasons);
                self.expr(else_, bound, loc, reasons);
            }
            other => {
                for child in crate::ir::stratify::direct_children(other) {
                    self.expr(child, bound, loc, reasons);
                }
            }
        }
    }

    fn stmt(&mut self, s: &Statement, bound: &mut Vec<String>, loc: &str, reasons: &mut Vec<Reason>) {
        match s {
            Statement::ForEach { clauses, body } => {
                let mark = bound.len();
                for c in clauses {
                    self.clause(c, bound, loc, reasons);
                }
                for (i, st) in body.iter().enumerate() {
                    self.stmt(st, bound, &format!("{loc}.{i}"), reasons);
                }
                bound.truncate(mark);
            }
            Statement::QueryRef { query } => {
                if !self.query_monotone(query) {
                    Self::push(reasons, loc, Rule::NonMonotoneQuery(query.clone()));
                }
            }
            Statement::Assign { .. } => Self::push(reasons, loc, Rule::Assign),
            Statement::Delete { .. } => Self::push(reasons, loc, Rule::Delete),
            Statement::UdfCall { udf, args } => {
                match self.p.udf(udf) {
                    Some(u) if u.monotone => {
                        self.trusted.insert(udf.clone());
                    }
                    _ => Self::push(reasons, loc, Rule::UndeclaredUdf(udf.clone())),
                }
                for a in args {
                    self.expr(a, bound, loc, reasons);
                }
            }
            Statement::Merge { .. } | Statement::Send { .. } | Statement::Return { .. } => {}
        }
        if !matches!(s, Statement::ForEach { .. } | Statement::UdfCall { .. }) {
            for e in s.own_exprs() {
                self.expr(e, bound, loc, reasons);
            }
        }
    }
}

pub fn classify_expression(p: &Program, e: &Expr) -> MonoClass {
    let mut a = Analyzer::new(p);
    let mut reasons = Vec::new();
    a.expr(e, &mut Vec::new(), "expr", &mut reasons);
    MonoClass::from_reasons(reasons)
}

/// Classifies a statement; `bound` names are treated as message-bound
/// variables rather than state.
pub fn classify_statement(p: &Program, s: &Statement, bound: &[&str]) -> MonoClass {
    let mut a = Analyzer::new(p);
    let mut reasons = Vec::new();
    let mut scope: Vec<String> = bound.iter().map(|b| b.to_string()).collect();
    a.stmt(s, &mut scope, "stmt", &mut reasons);
    MonoClass::from_reasons(reasons)
}

pub fn classify_handler(p: &Program, handler: &str) -> Option<MonoClass> {
    let h = p.handler(handler)?;
    let mut a = Analyzer::new(p);
    Some(handler_class(&mut a, h))
}

fn handler_class(a: &mut Analyzer<'_>, h: &crate::ir::Handler) -> MonoClass {
    let mut reasons = Vec::new();
    for (i, s) in desugar_handler(h).iter().enumerate() {
        a.stmt(s, &mut Vec::new(), &format!("{} stmt {i}", h.name), &mut reasons);
    }
    MonoClass::from_reasons(reasons)
}

pub fn calm_report(p: &Program) -> CalmReport {
    let mut handlers = BTreeMap::new();
    for h in &p.handlers {
        let mut a = Analyzer::new(p);
        let class = handler_class(&mut a, h);
        let needs = !class.is_monotone() || h.consistency.level == ConsistencyLevel::Serializable;
        handlers.insert(
            h.name.clone(),
            HandlerReport {
                class,
                consistency: h.consistency.level,
                coordination: if needs {
                    Coordination::NeedsCoordination
                } else {
                    Coordination::CoordinationFree
                },
                trusted_udfs: a.trusted.into_iter().collect(),
            },
        );
    }
    let needs = handlers.values().filter(|h| h.coordination == Coordination::NeedsCoordination).count();
    CalmReport {
        program: p.name.clone(),
        summary: Summary {
            handlers: handlers.len(),
            coordination_free: handlers.len() - needs,
            needs_coordination: needs,
            all_coordination_free: needs == 0,
        },
        handlers,
    }
}

/// A serializable handler may not read state that an eventual,
/// non-monotone handler mutates.
pub fn metaconsistency(p: &Program) -> Vec<Issue> {
    let reads = handler_reads(p);
    let mut out = Vec::new();
    let mut a = Analyzer::new(p);
    let mut writes: Vec<(&str, BTreeSet<String>)> = Vec::new();
    for h in &p.handlers {
        if h.consistency.level == ConsistencyLevel::Serializable {
            continue;
        }
        if handler_class(&mut a, h).is_monotone() {
            continue;
        }
        let mut targets = BTreeSet::new();
        for s in &h.body {
            s.visit(&mut |st| match st {
                Statement::Merge { target, .. } | Statement::Assign { target, .. } | Statement::Delete { target } => {
                    targets.insert(target.data_name().to_string());
                }
                _ => {}
            });
        }
        writes.push((&h.name, targets));
    }
    for h in &p.handlers {
        if h.consistency.level != ConsistencyLevel::Serializable {
            continue;
        }
        for (writer, targets) in &writes {
            for name in reads[&h.name].intersection(targets) {
                out.push(Issue {
                    kind: IssueKind::MetaconsistencyConflict,
                    location: format!("handler {}", h.name),
                    message: format!("reads {name}, which eventual non-monotone handler {writer} mutates"),
                });
            }
        }
    }
    out
}
