//! Availability and consistency wrappers: replica placement across failure
//! domains, a generated client proxy, and sequencer configuration for
//! serializable handlers.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::analysis::CalmReport;
use crate::ir::build::*;
use crate::ir::stratify::{expr_refs, statement_refs};
use crate::ir::{
    response_mailbox, ClassDecl, ConsistencyLevel, DomainLevel, Expr, FieldType, FoldKind, Handler, Param, Program,
    Statement,
};
use crate::lattice::ScalarKind;
use crate::value::{MESSAGE_ID, PAYLOAD, REPLY_TO};

pub const PROXY_ROLE: &str = "proxy";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FacetError {
    #[error("need {need} distinct {level:?} domains, topology has {have}")]
    InsufficientDomains { level: DomainLevel, need: usize, have: usize },
}

/// One node as placement sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeTopo {
    pub id: usize,
    pub role: String,
    pub domain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplicaSet {
    pub group: String,
    pub handlers: BTreeSet<String>,
    pub level: DomainLevel,
    pub failures: u32,
    /// Node ids, ascending, each in a different domain at `level`.
    pub replicas: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReplicationPlan {
    pub sets: Vec<ReplicaSet>,
    /// Nodes each handler's messages are forwarded to. Mutating handlers use
    /// their whole group; read-only handlers the first `f+1` of it.
    pub handler_replicas: BTreeMap<String, Vec<usize>>,
}

impl ReplicationPlan {
    pub fn replicas_for(&self, handler: &str) -> Option<&[usize]> {
        self.handler_replicas.get(handler).map(Vec::as_slice)
    }

    pub fn set_of(&self, handler: &str) -> Option<&ReplicaSet> {
        self.sets.iter().find(|s| s.handlers.contains(handler))
    }
}

fn data_touched(p: &Program, h: &Handler) -> BTreeSet<String> {
    let mut refs = Vec::new();
    for s in &h.body {
        statement_refs(s, &mut refs);
    }
    for inv in &h.consistency.invariants {
        expr_refs(inv, &mut refs);
    }
    if let Some(g) = &h.guard {
        expr_refs(g, &mut refs);
    }
    let mut out = BTreeSet::new();
    let mut seen = BTreeSet::new();
    let mut stack: Vec<String> = refs.into_iter().map(|(n, _)| n).collect();
    while let Some(name) = stack.pop() {
        if !seen.insert(name.clone()) {
            continue;
        }
        if p.data(&name).is_some() {
            out.insert(name);
        } else if let Some(q) = p.query(&name) {
            let mut r = Vec::new();
            for b in &q.bodies {
                expr_refs(b, &mut r);
            }
            stack.extend(r.into_iter().map(|(n, _)| n));
        }
    }
    for s in &h.body {
        s.visit(&mut |st| {
            if let Statement::Merge { target, .. } | Statement::Assign { target, .. } | Statement::Delete { target } = st {
                out.insert(target.data_name().to_string());
            }
        });
    }
    out
}

fn mutates(h: &Handler) -> bool {
    let mut found = false;
    for s in &h.body {
        s.visit(&mut |st| {
            found |= matches!(st, Statement::Merge { .. } | Statement::Assign { .. } | Statement::Delete { .. });
        });
    }
    found
}

/// Handlers partitioned by shared state: two handlers touching the same
/// table or var land in one group.
pub fn handler_groups(p: &Program) -> Vec<BTreeSet<String>> {
    let names: Vec<&str> = p.handlers.iter().map(|h| h.name.as_str()).collect();
    let mut parent: Vec<usize> = (0..names.len()).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        parent[i] = r;
        r
    }
    let mut owner: BTreeMap<String, usize> = BTreeMap::new();
    for (i, h) in p.handlers.iter().enumerate() {
        for d in data_touched(p, h) {
            match owner.get(&d) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
                None => {
                    owner.insert(d, i);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for i in 0..names.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().insert(names[i].to_string());
    }
    groups.into_values().collect()
}

/// Lowest-id node of each distinct domain prefix at `level`, ordered by
/// that node id.
fn domain_representatives(nodes: &[&NodeTopo], level: DomainLevel) -> Vec<usize> {
    let depth = level.depth() + 1;
    let mut best: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for n in nodes {
        let prefix: Vec<String> = n.domain.iter().take(depth).cloned().collect();
        let e = best.entry(prefix).or_insert(n.id);
        *e = (*e).min(n.id);
    }
    let mut reps: Vec<usize> = best.into_values().collect();
    reps.sort();
    reps
}

/// Places `f+1` replicas per handler group in distinct failure domains.
/// Handlers without an availability spec get a single replica.
pub fn plan_replication(
    p: &Program,
    nodes: &[NodeTopo],
    hints: &crate::lowering::PlacementHints,
) -> Result<ReplicationPlan, FacetError> {
    let mut plan = ReplicationPlan::default();
    for group in handler_groups(p) {
        let specs: Vec<(String, DomainLevel, u32)> = group
            .iter()
            .map(|h| match p.avail_for(h) {
                Some(a) => (h.clone(), a.domain, a.failures),
                None => (h.clone(), DomainLevel::Vm, 0),
            })
            .collect();
        // The finest level any handler declares bounds how finely the
        // group's replicas may share domains; use the coarsest declared
        // level so every member's requirement holds.
        let level = specs.iter().map(|s| s.1).min().unwrap_or(DomainLevel::Vm);
        let failures = specs.iter().map(|s| s.2).max().unwrap_or(0);
        let role = hints.role_of(group.iter().next().expect("non-empty group")).to_string();
        let candidates: Vec<&NodeTopo> = nodes.iter().filter(|n| n.role == role).collect();
        let reps = domain_representatives(&candidates, level);
        let need = failures as usize + 1;
        if reps.len() < need {
            return Err(FacetError::InsufficientDomains {
                level,
                need,
                have: reps.len(),
            });
        }
        let replicas: Vec<usize> = reps.into_iter().take(need).collect();
        for (h, _, f) in &specs {
            let handler = p.handler(h).expect("grouped handler exists");
            let ids = if mutates(handler) {
                replicas.clone()
            } else {
                replicas.iter().copied().take(*f as usize + 1).collect()
            };
            plan.handler_replicas.insert(h.clone(), ids);
        }
        plan.sets.push(ReplicaSet {
            group: group.iter().next().cloned().unwrap_or_default(),
            handlers: group,
            level,
            failures,
            replicas,
        });
    }
    Ok(plan)
}

/// A proxy program that fans each request out to the handler's replicas
/// and answers the client once per message id.
pub fn make_proxy(p: &Program, plan: &ReplicationPlan, endpoint: &dyn Fn(usize) -> String) -> Program {
    let mut handlers = Vec::new();
    for h in &p.handlers {
        let Some(replicas) = plan.replicas_for(&h.name) else { continue };
        let mut fields: Vec<(String, Expr)> = h.params.iter().map(|x| (x.name.clone(), var(&x.name))).collect();
        fields.push((MESSAGE_ID.into(), var(MESSAGE_ID)));
        fields.push((REPLY_TO.into(), Expr::SelfEndpoint));
        let forward = Expr::Record { fields };
        let mut body = vec![merge(
            t_table("pending"),
            record([(MESSAGE_ID, var(MESSAGE_ID)), (REPLY_TO, var(REPLY_TO))]),
        )];
        for r in replicas {
            body.push(send_to(&h.name, forward.clone(), lit(endpoint(*r).as_str())));
        }
        handlers.push(Handler::new(&h.name, h.params.clone(), body));

        let resp = response_mailbox(&h.name);
        let payloads = fold(
            FoldKind::Any,
            comp(
                vec![gen("r", var(&resp)), filter(eq(dot("r", MESSAGE_ID), var("mid")))],
                dot("r", PAYLOAD),
            ),
        );
        let answer = for_each(
            vec![
                gen("mid", comp(vec![gen("r", var(&resp))], dot("r", MESSAGE_ID))),
                filter(not(has_key("answered", vec![var("mid")]))),
                gen("req", lookup("pending", vec![var("mid")])),
            ],
            vec![
                send(
                    &resp,
                    record([(MESSAGE_ID, var("mid")), (PAYLOAD, payloads), (REPLY_TO, dot("req", REPLY_TO))]),
                ),
                merge(t_table("answered"), record([(MESSAGE_ID, var("mid"))])),
            ],
        );
        handlers.push(
            Handler::new(
                &resp,
                vec![Param {
                    name: PAYLOAD.into(),
                    ty: FieldType::Scalar(ScalarKind::Any),
                }],
                vec![answer],
            )
            .batch(),
        );
    }
    Program {
        name: format!("{}_proxy", p.name),
        classes: vec![
            ClassDecl {
                name: "Pending".into(),
                fields: vec![scalar_field(MESSAGE_ID, ScalarKind::Int), scalar_field(REPLY_TO, ScalarKind::Str)],
                key: vec![MESSAGE_ID.into()],
                partition: None,
            },
            class("Answered", vec![scalar_field(MESSAGE_ID, ScalarKind::Int)], &[MESSAGE_ID]),
        ],
        data: vec![table("pending", "Pending"), table("answered", "Answered")],
        handlers,
        ..Default::default()
    }
}

/// One sequencer per group of serializable handlers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequencerConfig {
    pub group: String,
    pub handlers: BTreeSet<String>,
    /// Candidate sequencers in takeover order; the lowest live id acts.
    pub replicas: Vec<usize>,
    pub invariants: BTreeMap<String, Vec<Expr>>,
    pub synthesized: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConsistencyPlan {
    /// Eventual and monotone: run as lowered, no wrapper.
    pub unwrapped: BTreeSet<String>,
    /// Eventual but non-monotone: run as lowered; outcomes may depend on
    /// delivery order.
    pub eventual_non_monotone: BTreeSet<String>,
    pub sequencers: Vec<SequencerConfig>,
}

impl ConsistencyPlan {
    pub fn sequencer_for(&self, handler: &str) -> Option<&SequencerConfig> {
        self.sequencers.iter().find(|s| s.handlers.contains(handler))
    }
}

/// Routes serializable handlers through a sequencer placed on `replicas`
/// of each handler (from the replication plan, or the role's nodes).
pub fn attach_consistency(
    p: &Program,
    report: &CalmReport,
    replicas: &dyn Fn(&str) -> Vec<usize>,
) -> ConsistencyPlan {
    let mut plan = ConsistencyPlan::default();
    let mut by_replicas: BTreeMap<Vec<usize>, SequencerConfig> = BTreeMap::new();
    for h in &p.handlers {
        let Some(r) = report.handlers.get(&h.name) else { continue };
        match r.consistency {
            ConsistencyLevel::Serializable => {
                let ids = replicas(&h.name);
                let cfg = by_replicas.entry(ids.clone()).or_insert_with(|| SequencerConfig {
                    group: h.name.clone(),
                    handlers: BTreeSet::new(),
                    replicas: ids,
                    invariants: BTreeMap::new(),
                    synthesized: true,
                });
                cfg.handlers.insert(h.name.clone());
                cfg.invariants.insert(h.name.clone(), h.consistency.invariants.clone());
            }
            ConsistencyLevel::Eventual if r.class.is_monotone() => {
                plan.unwrapped.insert(h.name.clone());
            }
            ConsistencyLevel::Eventual => {
                plan.eventual_non_monotone.insert(h.name.clone());
            }
        }
    }
    plan.sequencers = by_replicas.into_values().collect();
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::covid;

    fn azs(n: usize) -> Vec<NodeTopo> {
        (0..n)
            .map(|i| NodeTopo {
                id: i,
                role: "main".into(),
                domain: vec![format!("az{i}"), "dc0".into(), "rack0".into(), "vm0".into()],
            })
            .collect()
    }

    #[test]
    fn covid_defaults_place_one_replica_per_az() {
        let p = covid::program();
        let plan = plan_replication(&p, &azs(3), &Default::default()).unwrap();
        assert_eq!(plan.replicas_for("add_person").unwrap(), &[0, 1, 2]);
        assert_eq!(plan.replicas_for("likelihood").unwrap().len(), 2);
    }

    #[test]
    fn too_few_azs() {
        let p = covid::program();
        let err = plan_replication(&p, &azs(2), &Default::default()).unwrap_err();
        assert_eq!(
            err,
            FacetError::InsufficientDomains {
                level: DomainLevel::Az,
                need: 3,
                have: 2
            }
        );
    }

    #[test]
    fn vaccinate_gets_a_sequencer() {
        let p = covid::program();
        let report = crate::analysis::calm_report(&p);
        let plan = attach_consistency(&p, &report, &|_| vec![0]);
        assert!(plan.unwrapped.contains("add_person"));
        assert!(plan.sequencer_for("vaccinate").is_some());
        assert!(plan.sequencer_for("add_person").is_none());
    }
}
