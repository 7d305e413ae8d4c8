//! Syntax-directed lowering of a stratified program into per-role operator
//! graphs, plus mailbox routing.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::classify_expression;
use crate::ir::desugar::MSG_VAR;
use crate::ir::{desugar_handler, stratify, Clause, Expr, Handler, HandlerMode, Pattern, Program, Statement, StratumAssignment, BinOp};
use crate::runtime::graph::{mentions, op_exprs, Edge, EdgeKind, MapFn, Mode, OpKind, Operator, OperatorGraph};
use crate::value::Value;

pub const DEFAULT_ROLE: &str = "main";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoweringError {
    #[error("unstratifiable: {0}")]
    Unstratifiable(String),
    #[error("non-monotone operator inside recursive group {0}")]
    NonMonotoneRecursion(String),
    #[error("unknown node role {0}")]
    UnknownRole(String),
}

/// Where handlers run. Unmentioned handlers go to the default role; a role
/// with more than one node hash-partitions mailboxes that feed a table
/// listed in `partitioned`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlacementHints {
    #[serde(default)]
    pub roles: BTreeMap<String, String>,
    #[serde(default)]
    pub nodes: BTreeMap<String, usize>,
    #[serde(default)]
    pub partitioned: BTreeSet<String>,
}

impl PlacementHints {
    pub fn role_of(&self, handler: &str) -> &str {
        self.roles.get(handler).map(String::as_str).unwrap_or(DEFAULT_ROLE)
    }

    pub fn node_count(&self, role: &str) -> usize {
        self.nodes.get(role).copied().unwrap_or(1).max(1)
    }

    fn known(&self, role: &str) -> bool {
        role == DEFAULT_ROLE || self.nodes.contains_key(role)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "route", rename_all = "snake_case")]
pub enum Route {
    /// The first node of the role.
    Role { role: String },
    /// hash(field) mod nodes, over the role's nodes.
    Partitioned { role: String, field: String, nodes: usize },
    /// Back to the endpoint named in the message's `reply_to`.
    ReplyTo,
    /// Leaves the program: delivered to a client.
    External,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Hooks {
    pub role: String,
    pub pre: Vec<usize>,
    pub post: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoweringPlan {
    pub graphs: BTreeMap<String, Arc<OperatorGraph>>,
    pub routes: BTreeMap<String, Route>,
    pub hooks: BTreeMap<String, Hooks>,
}

impl LoweringPlan {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan encodes")
    }

    pub fn graph_for(&self, handler: &str) -> Option<&Arc<OperatorGraph>> {
        self.graphs.get(&self.hooks.get(handler)?.role)
    }
}

/// FNV-1a over the canonical encoding, mixed, mod `n`.
pub fn partition_index(v: &Value, n: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in v.to_json().to_string().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // Plain FNV mod a power of two only sees the low bit of each byte.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h % n.max(1) as u64) as usize
}

pub fn route_mailboxes(p: &Program, hints: &PlacementHints) -> Result<BTreeMap<String, Route>, LoweringError> {
    let mut routes = BTreeMap::new();
    for h in &p.handlers {
        let role = hints.role_of(&h.name);
        if !hints.known(role) {
            return Err(LoweringError::UnknownRole(role.to_string()));
        }
        let n = hints.node_count(role);
        let field = (n > 1).then(|| partition_field(p, h, hints)).flatten();
        let route = match field {
            Some(field) => Route::Partitioned {
                role: role.to_string(),
                field,
                nodes: n,
            },
            None => Route::Role { role: role.to_string() },
        };
        routes.insert(h.name.clone(), route);
        routes.insert(crate::ir::response_mailbox(&h.name), Route::ReplyTo);
    }
    for c in &p.channels {
        routes.insert(c.name.clone(), Route::External);
    }
    Ok(routes)
}

/// Partition field of a table `h` merges into, when `h` carries it as a
/// parameter.
fn partition_field(p: &Program, h: &Handler, hints: &PlacementHints) -> Option<String> {
    let mut found = None;
    for s in &h.body {
        s.visit(&mut |st| {
            if let Statement::Merge { target, .. } = st {
                let table = target.data_name();
                if !hints.partitioned.contains(table) {
                    return;
                }
                if let Some(f) = p.table_class(table).and_then(|c| c.partition.clone()) {
                    if h.params.iter().any(|x| x.name == f) && found.is_none() {
                        found = Some(f);
                    }
                }
            }
        });
    }
    found
}

pub fn lower(p: &Program, strata: &StratumAssignment, hints: &PlacementHints) -> Result<LoweringPlan, LoweringError> {
    let routes = route_mailboxes(p, hints)?;
    let mut by_role: BTreeMap<String, Vec<&Handler>> = BTreeMap::new();
    for h in &p.handlers {
        by_role.entry(hints.role_of(&h.name).to_string()).or_default().push(h);
    }
    if by_role.is_empty() && !p.queries.is_empty() {
        by_role.insert(DEFAULT_ROLE.to_string(), Vec::new());
    }
    let mut plan = LoweringPlan {
        routes,
        ..Default::default()
    };
    for (role, handlers) in by_role {
        let (graph, hooks) = lower_role(p, strata, &role, &handlers)?;
        for (h, (pre, post)) in hooks {
            plan.hooks.insert(
                h,
                Hooks {
                    role: role.clone(),
                    pre,
                    post,
                },
            );
        }
        plan.graphs.insert(role, Arc::new(graph));
    }
    Ok(plan)
}

/// One graph holding every handler.
pub fn lower_single(p: &Program) -> Result<Arc<OperatorGraph>, LoweringError> {
    let strata = stratify(p).map_err(|e| LoweringError::Unstratifiable(e.to_string()))?;
    let handlers: Vec<&Handler> = p.handlers.iter().collect();
    Ok(Arc::new(lower_role(p, &strata, DEFAULT_ROLE, &handlers)?.0))
}

type HookMap = BTreeMap<String, (Vec<usize>, Vec<usize>)>;

pub fn lower_role(
    p: &Program,
    strata: &StratumAssignment,
    role: &str,
    handlers: &[&Handler],
) -> Result<(OperatorGraph, HookMap), LoweringError> {
    let mut b = Builder {
        ops: Vec::new(),
        stratum: 0,
        handler: None,
        group: None,
    };
    let mut groups: Vec<_> = strata.groups.iter().collect();
    groups.sort_by_key(|g| g.stratum);
    for g in groups {
        b.stratum = g.stratum;
        b.handler = None;
        if g.recursive {
            for q in &g.queries {
                for body in &p.query(q).map(|d| d.bodies.clone()).unwrap_or_default() {
                    if !classify_expression(p, body).is_monotone() {
                        return Err(LoweringError::NonMonotoneRecursion(g.queries.join(",")));
                    }
                }
            }
            let gid_placeholder = b.ops.len();
            b.group = Some(usize::MAX);
            let mut members = Vec::new();
            for q in &g.queries {
                for body in p.query(q).map(|d| d.bodies.as_slice()).unwrap_or_default() {
                    members.push(b.query_body(q, body));
                }
            }
            b.group = None;
            let gid = b.push(
                OpKind::FixpointGroup {
                    queries: g.queries.clone(),
                    members: members.clone(),
                },
                vec![],
                format!("fixpoint({})", g.queries.join(",")),
            );
            for op in &mut b.ops[gid_placeholder..gid] {
                op.group = Some(gid);
            }
        } else {
            for q in &g.queries {
                for body in p.query(q).map(|d| d.bodies.as_slice()).unwrap_or_default() {
                    b.query_body(q, body);
                }
            }
        }
    }
    let top = strata.queries.values().copied().max().unwrap_or(0) + 1;
    let mut hooks = HookMap::new();
    for h in handlers {
        b.stratum = strata.handlers.get(&h.name).copied().unwrap_or(top);
        b.handler = Some(h.name.clone());
        let stmts = desugar_handler(h);
        let mut hook = (Vec::new(), Vec::new());
        let mut bound = Vec::new();
        let per_message = h.mode == HandlerMode::PerMessage;
        let (root, stmts) = match stmts.as_slice() {
            [Statement::ForEach { clauses, body }] if per_message && is_ingress(clauses.first(), &h.name) => {
                let ingress = b.push(
                    OpKind::MailboxIngress {
                        mailbox: h.name.clone(),
                        bind: MSG_VAR.to_string(),
                    },
                    vec![],
                    format!("ingress({})", h.name),
                );
                bound.push(MSG_VAR.to_string());
                let pre = b.push(OpKind::Inspect { point: "pre".into() }, vec![ingress], "inspect(pre)".into());
                hook.0.push(pre);
                let last = b.clauses(&clauses[1..], pre, &mut bound);
                (last, body.clone())
            }
            _ => {
                let unit = b.push(OpKind::Map { f: MapFn::Unit }, vec![], format!("unit({})", h.name));
                let pre = b.push(OpKind::Inspect { point: "pre".into() }, vec![unit], "inspect(pre)".into());
                hook.0.push(pre);
                (pre, stmts)
            }
        };
        b.statements(&stmts, root, &mut bound, &mut hook.1);
        hooks.insert(h.name.clone(), hook);
    }

    let edges = edges(&b.ops);
    let mut strata_ops: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for op in &b.ops {
        strata_ops.entry(op.stratum).or_default().push(op.id);
    }
    Ok((
        OperatorGraph {
            role: role.to_string(),
            operators: b.ops,
            edges,
            strata: strata_ops.into_values().collect(),
            synthesized: false,
        },
        hooks,
    ))
}

fn is_ingress(c: Option<&Clause>, handler: &str) -> bool {
    matches!(
        c,
        Some(Clause::Gen { pat: Pattern::Bind(n), source: Expr::Var { name } }) if n == MSG_VAR && name == handler
    )
}

fn edges(ops: &[Operator]) -> Vec<Edge> {
    let mut out = Vec::new();
    for op in ops {
        for &i in &op.inputs {
            out.push(Edge {
                from: i,
                to: op.id,
                kind: EdgeKind::Collection,
            });
        }
        if let OpKind::FixpointGroup { members, .. } = &op.kind {
            for &m in members {
                out.push(Edge {
                    from: m,
                    to: op.id,
                    kind: EdgeKind::LatticeStream,
                });
            }
        }
    }
    // Query values flow to every operator that reads them.
    for producer in ops {
        let OpKind::LatticeFold { query, whole, .. } = &producer.kind else { continue };
        let name = BTreeSet::from([query.as_str()]);
        for consumer in ops {
            let mut exprs = Vec::new();
            op_exprs(&consumer.kind, false, &mut exprs);
            if exprs.iter().any(|e| mentions(e, &name)) {
                out.push(Edge {
                    from: producer.id,
                    to: consumer.id,
                    kind: if *whole { EdgeKind::ReactiveCell } else { EdgeKind::LatticeStream },
                });
            }
        }
    }
    out
}

struct Builder {
    ops: Vec<Operator>,
    stratum: usize,
    handler: Option<String>,
    group: Option<usize>,
}

fn free_vars(e: &Expr) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    e.visit(&mut |x| {
        if let Expr::Var { name } = x {
            out.insert(name.clone());
        }
    });
    out
}

fn folds(e: &Expr) -> bool {
    let mut hit = false;
    e.visit(&mut |x| hit |= matches!(x, Expr::Fold { .. } | Expr::Len { .. }));
    hit
}

impl Builder {
    fn push(&mut self, kind: OpKind, inputs: Vec<usize>, label: String) -> usize {
        let id = self.ops.len();
        let mut exprs = Vec::new();
        op_exprs(&kind, false, &mut exprs);
        let whole = matches!(kind, OpKind::LatticeFold { whole: true, .. });
        let mode = if whole || exprs.iter().any(|e| folds(e)) {
            Mode::AllAtOnce
        } else {
            Mode::Differential
        };
        self.ops.push(Operator {
            id,
            kind,
            mode,
            inputs,
            stratum: self.stratum,
            label,
            handler: self.handler.clone(),
            group: self.group,
            synthesized: false,
        });
        id
    }

    fn query_body(&mut self, query: &str, body: &Expr) -> usize {
        let unit = self.push(OpKind::Map { f: MapFn::Unit }, vec![], format!("unit({query})"));
        match body {
            Expr::Comprehension { clauses, yield_ } => {
                let mut bound = Vec::new();
                let last = self.clauses(clauses, unit, &mut bound);
                self.push(
                    OpKind::LatticeFold {
                        query: query.to_string(),
                        yield_: (**yield_).clone(),
                        whole: false,
                    },
                    vec![last],
                    format!("fold({query})"),
                )
            }
            other => self.push(
                OpKind::LatticeFold {
                    query: query.to_string(),
                    yield_: other.clone(),
                    whole: true,
                },
                vec![unit],
                format!("fold({query})"),
            ),
        }
    }

    fn is_unit(&self, id: usize) -> bool {
        matches!(self.ops[id].kind, OpKind::Map { f: MapFn::Unit })
    }

    fn clauses(&mut self, clauses: &[Clause], mut prev: usize, bound: &mut Vec<String>) -> usize {
        let mut i = 0;
        while i < clauses.len() {
            match &clauses[i] {
                Clause::Gen { pat, source } => {
                    let mut names = Vec::new();
                    pat.names(&mut names);
                    let independent = free_vars(source).iter().all(|v| !bound.contains(v));
                    let shadows = names.iter().any(|n| bound.contains(n));
                    if !self.is_unit(prev) && independent && !shadows {
                        let keys = clauses.get(i + 1).and_then(|c| equi_keys(c, bound, &names));
                        if keys.is_some() {
                            i += 1;
                        }
                        let (left_key, right_key) = match keys {
                            Some((l, r)) => (Some(l), Some(r)),
                            None => (None, None),
                        };
                        let label = if left_key.is_some() { "hash_join" } else { "join" };
                        prev = self.push(
                            OpKind::Join {
                                pat: pat.clone(),
                                source: source.clone(),
                                left_key,
                                right_key,
                            },
                            vec![prev],
                            label.to_string(),
                        );
                    } else {
                        prev = self.push(
                            OpKind::Map {
                                f: MapFn::Generate {
                                    pat: pat.clone(),
                                    source: source.clone(),
                                },
                            },
                            vec![prev],
                            "map(generate)".to_string(),
                        );
                    }
                    bound.extend(names);
                }
                Clause::Filter { cond } => {
                    prev = self.push(OpKind::Filter { cond: cond.clone() }, vec![prev], "filter".into());
                }
                Clause::Let { name, value } => {
                    prev = self.push(
                        OpKind::Map {
                            f: MapFn::Bind {
                                name: name.clone(),
                                value: value.clone(),
                            },
                        },
                        vec![prev],
                        format!("map(let {name})"),
                    );
                    bound.push(name.clone());
                }
            }
            i += 1;
        }
        prev
    }

    fn statements(&mut self, stmts: &[Statement], prev: usize, bound: &mut Vec<String>, post: &mut Vec<usize>) {
        for s in stmts {
            match s {
                Statement::ForEach { clauses, body } => {
                    let mut inner = bound.clone();
                    let last = self.clauses(clauses, prev, &mut inner);
                    self.statements(body, last, &mut inner, post);
                }
                Statement::QueryRef { .. } => {}
                other => {
                    let inspect = self.push(OpKind::Inspect { point: "post".into() }, vec![prev], "inspect(post)".into());
                    post.push(inspect);
                    let (kind, label) = match other {
                        Statement::Send { mailbox, .. } => (
                            OpKind::SendEgress { statement: other.clone() },
                            format!("egress({mailbox})"),
                        ),
                        Statement::UdfCall { udf, .. } => (OpKind::UdfOp { statement: other.clone() }, format!("udf({udf})")),
                        Statement::Merge { target, .. } => (
                            OpKind::MutationSink { statement: other.clone() },
                            format!("sink(merge {})", target.data_name()),
                        ),
                        Statement::Assign { target, .. } => (
                            OpKind::MutationSink { statement: other.clone() },
                            format!("sink(assign {})", target.data_name()),
                        ),
                        Statement::Delete { target } => (
                            OpKind::MutationSink { statement: other.clone() },
                            format!("sink(delete {})", target.data_name()),
                        ),
                        _ => unreachable!("desugared"),
                    };
                    self.push(kind, vec![inspect], label);
                }
            }
        }
    }
}

/// Key expressions when `c` is an equality between the bound side and the
/// generator's pattern variables.
fn equi_keys(c: &Clause, bound: &[String], pat_names: &[String]) -> Option<(Expr, Expr)> {
    let Clause::Filter {
        cond: Expr::Binary { op: BinOp::Eq, left, right },
    } = c
    else {
        return None;
    };
    let side = |e: &Expr| {
        let v = free_vars(e);
        let left_only = v.iter().all(|n| !pat_names.contains(n)) && v.iter().any(|n| bound.contains(n));
        let right_only = v.iter().all(|n| !bound.contains(n)) && v.iter().any(|n| pat_names.contains(n));
        (left_only, right_only)
    };
    let (l_left, l_right) = side(left);
    let (r_left, r_right) = side(right);
    if l_left && r_right {
        Some(((**left).clone(), (**right).clone()))
    } else if l_right && r_left {
        Some(((**right).clone(), (**left).clone()))
    } else {
        None
    }
}
