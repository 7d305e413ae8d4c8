//! Static checks: name resolution, lattice targets, arities, facet blocks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    stratify, Clause, ConsistencyLevel, DataKind, Expr, FieldType, Handler, HandlerMode, Program, Statement, Target,
};
use crate::value::{MESSAGE_ID, REPLY_TO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IssueKind {
    DuplicateName,
    UnresolvedName,
    UnknownField,
    NotALattice,
    ArityMismatch,
    UnknownHandler,
    BadKey,
    TypeMismatch,
    ReturnInBatch,
    QueryVarMergeConflict,
    MetaconsistencyConflict,
    Unstratifiable,
    IsolationIgnored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub kind: IssueKind,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}: {}", self.kind, self.location, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn has(&self, kind: IssueKind) -> bool {
        self.errors.iter().chain(&self.warnings).any(|i| i.kind == kind)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.errors {
            writeln!(f, "error: {i}")?;
        }
        for i in &self.warnings {
            writeln!(f, "warning: {i}")?;
        }
        Ok(())
    }
}

struct Checker<'p> {
    p: &'p Program,
    report: ValidationReport,
    query_names: BTreeSet<&'p str>,
}

/// Bound variables in scope, with the class of row-valued ones when known.
type Scope = Vec<(String, Option<String>)>;

pub fn validate(p: &Program) -> ValidationReport {
    let mut c = Checker {
        p,
        report: ValidationReport::default(),
        query_names: p.queries.iter().map(|q| q.name.as_str()).collect(),
    };
    c.declarations();
    for q in &p.queries {
        for (i, b) in q.bodies.iter().enumerate() {
            c.expr(b, &mut Vec::new(), &format!("query {} body {i}", q.name));
        }
    }
    for h in &p.handlers {
        c.handler(h);
    }
    for name in p.availability.overrides.keys().chain(p.targets.overrides.keys()) {
        if p.handler(name).is_none() {
            c.err(IssueKind::UnknownHandler, "facets", format!("facet block names unknown handler {name}"));
        }
    }
    if c.report.errors.is_empty() {
        if let Err(e) = stratify(p) {
            c.err(IssueKind::Unstratifiable, "queries", e.to_string());
        }
        for issue in crate::analysis::metaconsistency(p) {
            c.report.errors.push(issue);
        }
    }
    c.report
}

impl<'p> Checker<'p> {
    fn err(&mut self, kind: IssueKind, location: &str, message: String) {
        self.report.errors.push(Issue {
            kind,
            location: location.to_string(),
            message,
        });
    }

    fn declarations(&mut self) {
        let p = self.p;
        let mut seen = BTreeSet::new();
        for c in &p.classes {
            if !seen.insert(&c.name) {
                self.err(IssueKind::DuplicateName, "classes", format!("class {} declared twice", c.name));
            }
            for k in &c.key {
                if c.field(k).is_none() {
                    self.err(IssueKind::BadKey, &format!("class {}", c.name), format!("key field {k} is not a field"));
                }
            }
            if let Some(part) = &c.partition {
                if c.field(part).is_none() {
                    self.err(IssueKind::BadKey, &format!("class {}", c.name), format!("partition field {part} is not a field"));
                }
            }
            for f in &c.fields {
                if let FieldType::Ref(target) | FieldType::RefSet(target) = &f.ty {
                    if p.class(target).is_none() {
                        self.err(
                            IssueKind::UnresolvedName,
                            &format!("class {}", c.name),
                            format!("field {} references unknown class {target}", f.name),
                        );
                    }
                }
            }
        }
        let mut names = BTreeSet::new();
        for d in &p.data {
            if !names.insert(d.name.as_str()) {
                self.err(IssueKind::DuplicateName, "data", format!("{} declared twice", d.name));
            }
            match &d.kind {
                DataKind::Table { class } => {
                    if p.class(class).is_none() {
                        self.err(IssueKind::UnresolvedName, &format!("table {}", d.name), format!("unknown class {class}"));
                    }
                    if self.query_names.contains(d.name.as_str()) {
                        self.err(IssueKind::DuplicateName, "data", format!("query {} shadows a table", d.name));
                    }
                }
                DataKind::Var { ty, init } => {
                    if let (Some(shape), Some(v)) = (ty.lattice_shape(), init) {
                        let ok = v.as_lattice().map(|l| l.shape() == shape).unwrap_or(false);
                        if !ok {
                            self.err(IssueKind::TypeMismatch, &format!("var {}", d.name), format!("initial value is not a {shape}"));
                        }
                    }
                }
            }
        }
        for h in &p.handlers {
            if !names.insert(h.name.as_str()) {
                self.err(IssueKind::DuplicateName, "handlers", format!("{} declared twice", h.name));
            }
        }
        for ch in &p.channels {
            if !names.insert(ch.name.as_str()) {
                self.err(IssueKind::DuplicateName, "channels", format!("{} declared twice", ch.name));
            }
        }
        let mut qs = BTreeSet::new();
        for q in &p.queries {
            if !qs.insert(q.name.as_str()) {
                self.err(IssueKind::DuplicateName, "queries", format!("query {} declared twice", q.name));
            }
            if p.handler(&q.name).is_some() || p.channel(&q.name).is_some() {
                self.err(IssueKind::DuplicateName, "queries", format!("query {} shadows a mailbox", q.name));
            }
        }
        let mut us = BTreeSet::new();
        for u in &p.udfs {
            if !us.insert(u.name.as_str()) {
                self.err(IssueKind::DuplicateName, "udfs", format!("udf {} declared twice", u.name));
            }
        }
    }

    fn handler(&mut self, h: &Handler) {
        let loc = format!("handler {}", h.name);
        let mut scope: Scope = Vec::new();
        if h.mode == HandlerMode::PerMessage {
            scope.extend(h.params.iter().map(|p| (p.name.clone(), None)));
            scope.push((MESSAGE_ID.to_string(), None));
            scope.push((REPLY_TO.to_string(), None));
        }
        if let Some(g) = &h.guard {
            self.expr(g, &mut scope.clone(), &format!("{loc} guard"));
        }
        for (i, inv) in h.consistency.invariants.iter().enumerate() {
            let mut s: Scope = h.params.iter().map(|p| (p.name.clone(), None)).collect();
            self.expr(inv, &mut s, &format!("{loc} invariant {i}"));
        }
        if let Some(iso) = &h.consistency.isolation {
            self.report.warnings.push(Issue {
                kind: IssueKind::IsolationIgnored,
                location: loc.clone(),
                message: format!("isolation={iso} has no defined semantics and is ignored"),
            });
        }
        if h.consistency.level == ConsistencyLevel::Serializable && h.mode == HandlerMode::Batch {
            self.err(IssueKind::TypeMismatch, &loc, "serializable handlers must be per-message".into());
        }
        for (i, s) in h.body.iter().enumerate() {
            self.stmt(s, h, &mut scope, &format!("{loc} stmt {i}"));
        }
    }

    fn stmt(&mut self, s: &Statement, h: &Handler, scope: &mut Scope, loc: &str) {
        match s {
            Statement::ForEach { clauses, body } => {
                let mark = scope.len();
                for c in clauses {
                    self.clause(c, scope, loc);
                }
                for (i, st) in body.iter().enumerate() {
                    self.stmt(st, h, scope, &format!("{loc}.{i}"));
                }
                scope.truncate(mark);
            }
            Statement::QueryRef { query } => {
                if !self.query_names.contains(query.as_str()) {
                    self.err(IssueKind::UnresolvedName, loc, format!("unknown query {query}"));
                }
            }
            Statement::Merge { target, value } => {
                self.target(target, scope, loc, true);
                self.expr(value, scope, loc);
            }
            Statement::Assign { target, value } => {
                self.target(target, scope, loc, false);
                self.expr(value, scope, loc);
            }
            Statement::Delete { target } => self.target(target, scope, loc, false),
            Statement::Send { mailbox, value, to } => {
                if !self.p.is_mailbox(mailbox) {
                    self.err(IssueKind::UnresolvedName, loc, format!("send to undeclared mailbox {mailbox}"));
                }
                self.expr(value, scope, loc);
                if let Some(t) = to {
                    self.expr(t, scope, loc);
                }
            }
            Statement::Return { value } => {
                if h.mode == HandlerMode::Batch {
                    self.err(IssueKind::ReturnInBatch, loc, "return needs a message to answer".into());
                }
                self.expr(value, scope, loc);
            }
            Statement::UdfCall { udf, args } => {
                self.udf(udf, args.len(), loc);
                for a in args {
                    self.expr(a, scope, loc);
                }
            }
        }
    }

    fn target(&mut self, t: &Target, scope: &mut Scope, loc: &str, merging: bool) {
        let p = self.p;
        match t {
            Target::Var { name } => match p.data(name).map(|d| &d.kind) {
                Some(DataKind::Var { ty, .. }) => {
                    if merging && ty.lattice_shape().is_none() {
                        self.err(IssueKind::NotALattice, loc, format!("merge into scalar var {name}"));
                    }
                    if merging && self.query_names.contains(name.as_str()) {
                        self.err(
                            IssueKind::QueryVarMergeConflict,
                            loc,
                            format!("{name} is replaced by its query at end of tick and cannot also be merged"),
                        );
                    }
                }
                Some(DataKind::Table { .. }) => self.err(IssueKind::TypeMismatch, loc, format!("{name} is a table")),
                None => self.err(IssueKind::UnresolvedName, loc, format!("unknown var {name}")),
            },
            Target::Table { name } => {
                if p.table_class(name).is_none() {
                    self.err(IssueKind::UnresolvedName, loc, format!("unknown table {name}"));
                }
            }
            Target::Row { table, key } | Target::Field { table, key, .. } => {
                let Some(class) = p.table_class(table) else {
                    self.err(IssueKind::UnresolvedName, loc, format!("unknown table {table}"));
                    return;
                };
                if key.len() > class.key.len() || key.is_empty() {
                    self.err(IssueKind::BadKey, loc, format!("{table} is keyed by {} fields, got {}", class.key.len(), key.len()));
                }
                for k in key {
                    self.expr(k, scope, loc);
                }
                if let Target::Field { field, .. } = t {
                    match class.field(field) {
                        None => self.err(IssueKind::UnknownField, loc, format!("{} has no field {field}", class.name)),
                        Some(f) if merging && f.ty.lattice_shape().is_none() => {
                            self.err(IssueKind::NotALattice, loc, format!("merge into scalar field {table}.{field}"))
                        }
                        Some(_) => {}
                    }
                }
            }
        }
    }

    fn udf(&mut self, name: &str, arity: usize, loc: &str) {
        match self.p.udf(name) {
            None => self.err(IssueKind::UnresolvedName, loc, format!("undeclared udf {name}")),
            Some(u) if u.arity != arity => {
                self.err(IssueKind::ArityMismatch, loc, format!("{name} takes {} args, called with {arity}", u.arity))
            }
            Some(_) => {}
        }
    }

    fn clause(&mut self, c: &Clause, scope: &mut Scope, loc: &str) {
        match c {
            Clause::Gen { pat, source } => {
                self.expr(source, scope, loc);
                let class = self.row_class(source, scope);
                match pat {
                    super::Pattern::Bind(n) => scope.push((n.clone(), class)),
                    other => {
                        let mut names = Vec::new();
                        other.names(&mut names);
                        scope.extend(names.into_iter().map(|n| (n, None)));
                    }
                }
            }
            Clause::Filter { cond } => self.expr(cond, scope, loc),
            Clause::Let { name, value } => {
                self.expr(value, scope, loc);
                scope.push((name.clone(), None));
            }
        }
    }

    /// Class of the rows produced by iterating `source`, when evident.
    fn row_class(&self, source: &Expr, scope: &Scope) -> Option<String> {
        let table = match source {
            Expr::Var { name } if !scope.iter().any(|(n, _)| n == name) => name,
            Expr::Lookup { table, .. } => table,
            _ => return None,
        };
        self.p.table_class(table).map(|c| c.name.clone())
    }

    fn resolves(&self, name: &str, scope: &Scope) -> bool {
        scope.iter().any(|(n, _)| n == name)
            || self.query_names.contains(name)
            || self.p.data(name).is_some()
            || self.p.is_mailbox(name)
    }

    fn expr(&mut self, e: &Expr, scope: &mut Scope, loc: &str) {
        match e {
            Expr::Var { name } => {
                if !self.resolves(name, scope) {
                    self.err(IssueKind::UnresolvedName, loc, format!("unresolved name {name}"));
                }
            }
            Expr::Field { base, field } => {
                if let Expr::Var { name } = &**base {
                    let class = scope.iter().rev().find(|(n, _)| n == name).and_then(|(_, c)| c.clone());
                    if let Some(c) = class.and_then(|c| self.p.class(&c)) {
                        if c.field(field).is_none() {
                            let msg = format!("{} has no field {field}", c.name);
                            self.err(IssueKind::UnknownField, loc, msg);
                        }
                    }
                }
                self.expr(base, scope, loc);
            }
            Expr::Lookup { table, key } | Expr::HasKey { table, key } => {
                match self.p.table_class(table) {
                    None => self.err(IssueKind::UnresolvedName, loc, format!("unknown table {table}")),
                    Some(c) if key.len() > c.key.len() || key.is_empty() => {
                        let msg = format!("{table} is keyed by {} fields, got {}", c.key.len(), key.len());
                        self.err(IssueKind::BadKey, loc, msg)
                    }
                    Some(_) => {}
                }
                for k in key {
                    self.expr(k, scope, loc);
                }
            }
            Expr::Comprehension { clauses, yield_ } => {
                let mark = scope.len();
                for c in clauses {
                    self.clause(c, scope, loc);
                }
                self.expr(yield_, scope, loc);
                scope.truncate(mark);
            }
            Expr::Call { udf, args } => {
                self.udf(udf, args.len(), loc);
                for a in args {
                    self.expr(a, scope, loc);
                }
            }
            other => {
                for child in super::stratify::direct_children(other) {
                    self.expr(child, scope, loc);
                }
            }
        }
    }
}

/// Names each handler reads, grouped by handler.
pub(crate) fn handler_reads(p: &Program) -> BTreeMap<String, BTreeSet<String>> {
    let mut out = BTreeMap::new();
    for h in &p.handlers {
        let mut refs = Vec::new();
        for s in &h.body {
            super::stratify::statement_refs(s, &mut refs);
        }
        for inv in &h.consistency.invariants {
            super::stratify::expr_refs(inv, &mut refs);
        }
        if let Some(g) = &h.guard {
            super::stratify::expr_refs(g, &mut refs);
        }
        let names: BTreeSet<String> = refs.into_iter().map(|(n, _)| n).collect();
        out.insert(h.name.clone(), names);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::build::*;
    use crate::lattice::ScalarKind;

    fn base() -> Program {
        Program {
            name: "t".into(),
            classes: vec![class("P", vec![scalar_field("pid", ScalarKind::Int)], &["pid"])],
            data: vec![
                table("people", "P"),
                var_decl("n", FieldType::Scalar(ScalarKind::Int), Some(0i64.into())),
            ],
            ..Default::default()
        }
    }

    #[test]
    fn unresolved_table() {
        let mut p = base();
        p.handlers.push(Handler::new(
            "h",
            vec![param("pid", ScalarKind::Int)],
            vec![merge(t_table("persons"), record([("pid", var("pid"))]))],
        ));
        let r = validate(&p);
        assert!(r.has(IssueKind::UnresolvedName), "{r}");
    }

    #[test]
    fn merge_into_scalar_var() {
        let mut p = base();
        p.handlers.push(Handler::new("h", vec![], vec![merge(t_var("n"), lit(1i64))]));
        assert!(validate(&p).has(IssueKind::NotALattice));
    }

    #[test]
    fn clean_program() {
        let mut p = base();
        p.handlers.push(Handler::new(
            "h",
            vec![param("pid", ScalarKind::Int)],
            vec![merge(t_table("people"), record([("pid", var("pid"))])), ret(lit("OK"))],
        ));
        let r = validate(&p);
        assert!(r.is_clean(), "{r}");
    }
}
