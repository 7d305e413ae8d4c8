//! Stratification of queries: negation and aggregation never inside a
//! recursive cycle.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Clause, Expr, FoldKind, Program, Statement};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub queries: Vec<String>,
    pub stratum: usize,
    pub recursive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StratumAssignment {
    /// Stored data and mailboxes sit in stratum 0; queries start at 1.
    pub queries: BTreeMap<String, usize>,
    /// Query groups in evaluation order.
    pub groups: Vec<QueryGroup>,
    /// Stratum of each handler's statements (above every query it reads).
    pub handlers: BTreeMap<String, usize>,
}

impl StratumAssignment {
    pub fn group_of(&self, query: &str) -> Option<&QueryGroup> {
        self.groups.iter().find(|g| g.queries.iter().any(|q| q == query))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StratifyError {
    #[error("unstratifiable: {0}")]
    Unstratifiable(String),
}

/// A name referenced by an expression, and whether the reference sits under
/// negation or a non-lattice aggregate.
pub(crate) fn expr_refs(e: &Expr, out: &mut Vec<(String, bool)>) {
    let mut bound = Vec::new();
    walk(e, false, &mut bound, out);
}

pub(crate) fn statement_refs(s: &Statement, out: &mut Vec<(String, bool)>) {
    let mut bound = Vec::new();
    walk_stmt(s, &mut bound, out);
}

fn walk_stmt(s: &Statement, bound: &mut Vec<String>, out: &mut Vec<(String, bool)>) {
    match s {
        Statement::ForEach { clauses, body } => {
            let mark = bound.len();
            for c in clauses {
                walk_clause(c, false, bound, out);
            }
            for st in body {
                walk_stmt(st, bound, out);
            }
            bound.truncate(mark);
        }
        Statement::QueryRef { query } => out.push((query.clone(), false)),
        other => {
            let negative = other.is_syntactically_non_monotone();
            for e in other.own_exprs() {
                walk(e, negative, bound, out);
            }
        }
    }
}

fn walk_clause(c: &Clause, neg: bool, bound: &mut Vec<String>, out: &mut Vec<(String, bool)>) {
    match c {
        Clause::Gen { pat, source } => {
            walk(source, neg, bound, out);
            pat.names(bound);
        }
        Clause::Filter { cond } => walk(cond, neg, bound, out),
        Clause::Let { name, value } => {
            walk(value, neg, bound, out);
            bound.push(name.clone());
        }
    }
}

fn walk(e: &Expr, neg: bool, bound: &mut Vec<String>, out: &mut Vec<(String, bool)>) {
    use super::{BinOp, UnOp};
    match e {
        Expr::Var { name } => {
            if !bound.iter().any(|b| b == name) {
                out.push((name.clone(), neg));
            }
        }
        Expr::Lookup { table, key } | Expr::HasKey { table, key } => {
            out.push((table.clone(), neg));
            key.iter().for_each(|k| walk(k, neg, bound, out));
        }
        Expr::Unary { op: UnOp::Not, arg } => walk(arg, true, bound, out),
        Expr::Binary {
            op: BinOp::NotIn | BinOp::Difference,
            left,
            right,
        } => {
            walk(left, neg, bound, out);
            walk(right, true, bound, out);
        }
        Expr::Comprehension { clauses, yield_ } => {
            let mark = bound.len();
            for c in clauses {
                walk_clause(c, neg, bound, out);
            }
            walk(yield_, neg, bound, out);
            bound.truncate(mark);
        }
        Expr::Fold { kind, arg } => {
            let agg = !matches!(kind, FoldKind::Merge { .. });
            if let FoldKind::Reduce { func } = kind {
                walk(func, true, bound, out);
            }
            walk(arg, neg || agg, bound, out);
        }
        other => {
            // Children in the same polarity; `visit` is pre-order so walk
            // direct children only.
            for child in direct_children(other) {
                walk(child, neg, bound, out);
            }
        }
    }
}

pub(crate) fn direct_children(e: &Expr) -> Vec<&Expr> {
    match e {
        Expr::Lit { .. } | Expr::Var { .. } | Expr::SelfEndpoint => vec![],
        Expr::Field { base, .. } => vec![base],
        Expr::Index { base, index } => vec![base, index],
        Expr::Slice { base, start, end } => vec![base, start, end],
        Expr::Tuple { items } => items.iter().collect(),
        Expr::Record { fields } => fields.iter().map(|(_, e)| e).collect(),
        Expr::Lookup { key, .. } | Expr::HasKey { key, .. } => key.iter().collect(),
        Expr::Unary { arg, .. } | Expr::Len { arg } | Expr::ToSetLattice { arg } => vec![arg],
        Expr::Binary { left, right, .. } => vec![left, right],
        Expr::Comprehension { clauses, yield_ } => {
            let mut v: Vec<&Expr> = clauses.iter().map(|c| c.expr()).collect();
            v.push(yield_);
            v
        }
        Expr::Fold { kind, arg } => match kind {
            FoldKind::Reduce { func } => vec![func, arg],
            _ => vec![arg],
        },
        Expr::Call { args, .. } => args.iter().collect(),
        Expr::CallDyn { func, args } => std::iter::once(&**func).chain(args.iter()).collect(),
        Expr::If { cond, then, else_ } => vec![cond, then, else_],
        Expr::Range { lo, hi } => vec![lo, hi],
    }
}

pub fn stratify(p: &Program) -> Result<StratumAssignment, StratifyError> {
    let names: Vec<&str> = p.queries.iter().map(|q| q.name.as_str()).collect();
    let mut graph: DiGraph<&str, bool> = DiGraph::new();
    let idx: BTreeMap<&str, NodeIndex> = names.iter().map(|n| (*n, graph.add_node(*n))).collect();

    // Edges dependency -> dependent, weight = negative.
    let mut edges: BTreeMap<(NodeIndex, NodeIndex), bool> = BTreeMap::new();
    for q in &p.queries {
        let mut refs = Vec::new();
        for b in &q.bodies {
            expr_refs(b, &mut refs);
        }
        for (name, neg) in refs {
            if let Some(&from) = idx.get(name.as_str()) {
                let e = edges.entry((from, idx[q.name.as_str()])).or_insert(false);
                *e |= neg;
            }
        }
    }
    for (&(from, to), &neg) in &edges {
        graph.add_edge(from, to, neg);
    }

    let mut sccs = tarjan_scc(&graph);
    sccs.reverse(); // topological order
    let mut stratum_of: BTreeMap<NodeIndex, usize> = BTreeMap::new();
    let mut groups = Vec::new();
    for scc in &sccs {
        let members: BTreeSet<NodeIndex> = scc.iter().copied().collect();
        let mut recursive = scc.len() > 1;
        let mut stratum = 1;
        for (&(from, to), &neg) in &edges {
            if !members.contains(&to) {
                continue;
            }
            if members.contains(&from) {
                recursive = true;
                if neg {
                    let mut cycle: Vec<&str> = members.iter().map(|n| graph[*n]).collect();
                    cycle.sort();
                    return Err(StratifyError::Unstratifiable(format!(
                        "{} depends negatively on {} inside recursive group {{{}}}",
                        graph[to],
                        graph[from],
                        cycle.join(", ")
                    )));
                }
            } else {
                stratum = stratum.max(stratum_of[&from] + usize::from(neg));
            }
        }
        for n in &members {
            stratum_of.insert(*n, stratum);
        }
        let mut queries: Vec<String> = members.iter().map(|n| graph[*n].to_string()).collect();
        queries.sort();
        groups.push(QueryGroup {
            queries,
            stratum,
            recursive,
        });
    }
    groups.sort_by(|a, b| (a.stratum, &a.queries).cmp(&(b.stratum, &b.queries)));

    let queries: BTreeMap<String, usize> = stratum_of.iter().map(|(n, s)| (graph[*n].to_string(), *s)).collect();
    let mut handlers = BTreeMap::new();
    for h in &p.handlers {
        let mut refs = Vec::new();
        for s in &h.body {
            statement_refs(s, &mut refs);
        }
        if let Some(g) = &h.guard {
            expr_refs(g, &mut refs);
        }
        let top = refs.iter().filter_map(|(n, _)| queries.get(n)).max().copied().unwrap_or(0);
        handlers.insert(h.name.clone(), top + 1);
    }
    Ok(StratumAssignment {
        queries,
        groups,
        handlers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::build::*;

    fn prog(queries: Vec<crate::ir::QueryDef>) -> Program {
        Program {
            name: "t".into(),
            queries,
            ..Default::default()
        }
    }

    #[test]
    fn closure_is_one_recursive_group() {
        let p = prog(vec![query(
            "tc",
            vec![
                comp(vec![gen_tuple(&["a", "b"], var("edge"))], tuple(vec![var("a"), var("b")])),
                comp(
                    vec![gen_tuple(&["a", "b"], var("tc")), gen_tuple(&["c", "d"], var("edge")), filter(eq(var("b"), var("c")))],
                    tuple(vec![var("a"), var("d")]),
                ),
            ],
        )]);
        let s = stratify(&p).unwrap();
        assert_eq!(s.groups.len(), 1);
        assert!(s.groups[0].recursive);
    }

    #[test]
    fn count_sits_above_its_input() {
        let p = prog(vec![
            query("reach", vec![comp(vec![gen("x", var("t"))], var("x"))]),
            query("n", vec![count(var("reach"))]),
        ]);
        let s = stratify(&p).unwrap();
        assert!(s.queries["n"] > s.queries["reach"]);
    }

    #[test]
    fn negative_cycle_rejected() {
        let p = prog(vec![query(
            "q",
            vec![comp(vec![gen("x", var("t")), filter(not_in(var("x"), var("q")))], var("x"))],
        )]);
        assert!(matches!(stratify(&p), Err(StratifyError::Unstratifiable(_))));
    }
}
