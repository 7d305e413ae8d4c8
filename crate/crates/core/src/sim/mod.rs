//! Deterministic discrete-event simulation of a transducer network: seeded
//! delays and duplication, crash-stop failures by domain prefix, client
//! endpoints, and a JSON-lines trace.

pub mod scenario;
pub mod serial;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::calm_report;
use crate::facets::{
    attach_consistency, make_proxy, plan_replication, ConsistencyPlan, FacetError, NodeTopo, ReplicationPlan, PROXY_ROLE,
};
use crate::ir::desugar::handler_of_response;
use crate::ir::{response_mailbox, stratify, Program, Statement};
use crate::lowering::{lower, lower_single, partition_index, LoweringError, LoweringPlan, Route};
use crate::patterns::{self, Outputs};
use crate::runtime::{Outbound, RuntimeError, Transducer, UdfRegistry};
use crate::value::{Message, Row, Value, MESSAGE_ID, PAYLOAD, REPLY_TO};
use scenario::{EngineKind, FailureSpec, ProgramRef, Scenario, WorkItem};
use serial::{SerialState, SyncMsg, REJECTED, SYNC_MAILBOX};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("unknown program {0}")]
    UnknownProgram(String),
    #[error("program failed validation: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lowering(#[from] LoweringError),
    #[error(transparent)]
    Facet(#[from] FacetError),
    #[error("initial data: {0}")]
    Init(RuntimeError),
    #[error("no quiescence within {0} ticks")]
    NoQuiescence(u64),
    #[error("no node under domain {0:?}")]
    UnknownDomain(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum TraceKind {
    Sent,
    Delivered,
    Duplicated,
    TickCompleted,
    Crashed,
    Recovered,
    StateDump,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub tick: u64,
    pub seq: u64,
    pub kind: TraceKind,
    pub payload: serde_json::Value,
}

pub fn trace_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace encodes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeFinal {
    pub id: usize,
    pub endpoint: String,
    pub role: String,
    pub alive: bool,
    pub state: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientMessage {
    pub mailbox: String,
    pub row: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalState {
    pub tick: u64,
    pub nodes: Vec<NodeFinal>,
    pub clients: BTreeMap<String, Vec<ClientMessage>>,
    /// Requests to handlers that return a value but got no response.
    pub unanswered: Vec<i64>,
    /// Responses per request id, for requests that expect one.
    pub responses: BTreeMap<i64, usize>,
}

impl FinalState {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("state encodes")
    }

    /// Everything clients received, keyed without message ids.
    pub fn outputs(&self) -> Outputs {
        let mut out = Outputs::new();
        for msgs in self.clients.values() {
            for m in msgs {
                let mut row = m.row.clone();
                if let Some(obj) = row.as_object_mut() {
                    obj.remove(MESSAGE_ID);
                    obj.remove(REPLY_TO);
                }
                out.insert((m.mailbox.clone(), row.to_string()));
            }
        }
        out
    }

    pub fn live_states(&self) -> Vec<&serde_json::Value> {
        self.nodes
            .iter()
            .filter(|n| n.alive && n.role != PROXY_ROLE)
            .map(|n| &n.state)
            .collect()
    }

    pub fn node_state(&self, id: usize) -> &serde_json::Value {
        &self.nodes[id].state
    }
}

/// The program, UDFs, and placement a scenario refers to.
pub fn resolve_program(s: &ProgramRef) -> Result<(Arc<Program>, UdfRegistry), SimError> {
    match s {
        ProgramRef::Named(name) => {
            let p = patterns::by_name(name).ok_or_else(|| SimError::UnknownProgram(name.clone()))?;
            Ok((p.program, p.udfs))
        }
        ProgramRef::Inline(p) => Ok((Arc::new((**p).clone()), patterns::all_udfs())),
    }
}

fn returns_value(p: &Program, handler: &str) -> bool {
    let Some(h) = p.handler(handler) else { return false };
    let mut found = false;
    for s in &h.body {
        s.visit(&mut |st| found |= matches!(st, Statement::Return { .. }));
    }
    found
}

fn node_endpoint(id: usize) -> String {
    format!("node/{id}")
}

fn parse_node(endpoint: &str) -> Option<usize> {
    endpoint.strip_prefix("node/")?.parse().ok()
}

/// Stable id for a message a handler sent without one.
fn internal_id(from: &str, mailbox: &str, row: &Row) -> i64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let text = format!("{from}|{mailbox}|{}", Value::Row(row.clone()).to_json());
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h >> 2) as i64 + 1
}

#[derive(Debug, Clone)]
struct Envelope {
    from: String,
    to: String,
    msg: Message,
}

struct SimNode {
    id: usize,
    role: String,
    domain: Vec<String>,
    alive: bool,
    transducer: Transducer,
    inbox: Vec<Message>,
    serial: BTreeMap<String, SerialState>,
}

pub struct Cluster {
    scenario: Scenario,
    program: Arc<Program>,
    udfs: UdfRegistry,
    plan: LoweringPlan,
    full_graph: Option<Arc<crate::runtime::OperatorGraph>>,
    proxy: Option<(Arc<Program>, Option<Arc<crate::runtime::OperatorGraph>>)>,
    replication: Option<ReplicationPlan>,
    consistency: ConsistencyPlan,
    nodes: Vec<SimNode>,
    roles: BTreeMap<String, Vec<usize>>,
    in_flight: BTreeMap<(u64, u64), Envelope>,
    rng: ChaCha8Rng,
    id_rng: ChaCha8Rng,
    tick: u64,
    trace_seq: u64,
    send_seq: u64,
    trace: Vec<TraceEvent>,
    workload: Vec<WorkItem>,
    cursor: usize,
    failures: Vec<FailureSpec>,
    recoveries: Vec<FailureSpec>,
    clients: BTreeMap<String, Vec<ClientMessage>>,
    requests: BTreeMap<i64, String>,
}

impl Cluster {
    pub fn new(scenario: Scenario) -> Result<Cluster, SimError> {
        let (program, udfs) = resolve_program(&scenario.program)?;
        Cluster::with_program(scenario, program, udfs)
    }

    pub fn with_program(scenario: Scenario, program: Arc<Program>, udfs: UdfRegistry) -> Result<Cluster, SimError> {
        let report = crate::ir::validate(&program);
        if !report.is_clean() {
            let msgs: Vec<String> = report.errors.iter().map(|i| format!("{i:?}")).collect();
            return Err(SimError::Invalid(msgs.join("; ")));
        }
        let strata = stratify(&program).map_err(|e| SimError::Invalid(e.to_string()))?;
        let plan = lower(&program, &strata, &scenario.placement)?;
        let specs = scenario.node_specs();
        let mut topo: Vec<NodeTopo> = specs
            .iter()
            .enumerate()
            .map(|(id, s)| NodeTopo {
                id,
                role: s.role.clone(),
                domain: s.domain.clone(),
            })
            .collect();

        let replication = if scenario.facets.availability {
            Some(plan_replication(&program, &topo, &scenario.placement)?)
        } else {
            None
        };
        let mut roles: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for n in &topo {
            roles.entry(n.role.clone()).or_default().push(n.id);
        }
        let consistency = if scenario.facets.consistency {
            let report = calm_report(&program);
            let hints = &scenario.placement;
            attach_consistency(&program, &report, &|h: &str| match &replication {
                Some(r) => r.replicas_for(h).map(<[usize]>::to_vec).unwrap_or_default(),
                None => roles.get(hints.role_of(h)).and_then(|ids| ids.first()).into_iter().copied().collect(),
            })
        } else {
            ConsistencyPlan::default()
        };
        let proxy = match &replication {
            Some(r) => {
                let p = Arc::new(make_proxy(&program, r, &node_endpoint));
                let id = topo.len();
                topo.push(NodeTopo {
                    id,
                    role: PROXY_ROLE.to_string(),
                    domain: vec![PROXY_ROLE.to_string()],
                });
                roles.entry(PROXY_ROLE.to_string()).or_default().push(id);
                let graph = match scenario.engine {
                    EngineKind::Graph => Some(lower_single(&p)?),
                    EngineKind::Interpreter => None,
                };
                Some((p, graph))
            }
            None => None,
        };
        let full_graph = match scenario.engine {
            EngineKind::Graph => Some(lower_single(&program)?),
            EngineKind::Interpreter => None,
        };
        let seed = scenario.seed;
        let mut workload = scenario.workload.clone();
        workload.sort_by_key(|w| w.tick);
        let mut c = Cluster {
            program,
            udfs,
            plan,
            full_graph,
            proxy,
            replication,
            consistency,
            nodes: Vec::new(),
            roles,
            in_flight: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            id_rng: ChaCha8Rng::seed_from_u64(scenario.workload_seed.unwrap_or(seed) ^ 0x9e37_79b9_7f4a_7c15),
            tick: 0,
            trace_seq: 0,
            send_seq: 0,
            trace: Vec::new(),
            workload,
            cursor: 0,
            failures: scenario.failures.clone(),
            recoveries: scenario.recoveries.clone(),
            clients: BTreeMap::new(),
            requests: BTreeMap::new(),
            scenario,
        };
        for n in topo {
            let transducer = c.fresh_transducer(&n.role)?;
            c.nodes.push(SimNode {
                id: n.id,
                role: n.role,
                domain: n.domain,
                alive: true,
                transducer,
                inbox: Vec::new(),
                serial: BTreeMap::new(),
            });
        }
        for (i, n) in c.nodes.iter_mut().enumerate() {
            n.transducer.set_endpoint(&node_endpoint(i));
        }
        Ok(c)
    }

    fn fresh_transducer(&self, role: &str) -> Result<Transducer, SimError> {
        let (program, graph) = if role == PROXY_ROLE {
            let (p, g) = self.proxy.as_ref().expect("proxy role only with a proxy");
            (p.clone(), g.clone())
        } else {
            let g = self.plan.graphs.get(role).cloned().or_else(|| self.full_graph.clone());
            (self.program.clone(), g)
        };
        let mut t = match (self.scenario.engine, graph) {
            (EngineKind::Graph, Some(g)) => Transducer::graph(program, g, self.udfs.clone()),
            _ => Transducer::interpreter(program, self.udfs.clone()).map_err(SimError::Init)?,
        };
        t.options.inspect = self.scenario.inspect;
        if role != PROXY_ROLE {
            let init = &self.scenario.init;
            for (table, rows) in &init.tables {
                for r in rows {
                    t.state_mut().load_row(table, Arc::new(r.clone())).map_err(SimError::Init)?;
                }
            }
            for (var, v) in &init.vars {
                t.state_mut().set_var(var, v.clone());
            }
        }
        Ok(t)
    }

    pub fn program(&self) -> &Arc<Program> {
        &self.program
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn replication(&self) -> Option<&ReplicationPlan> {
        self.replication.as_ref()
    }

    pub fn consistency(&self) -> &ConsistencyPlan {
        &self.consistency
    }

    pub fn lowering(&self) -> &LoweringPlan {
        &self.plan
    }

    /// Lowering plus synthesized facet wrappers, as dumped by the CLI.
    pub fn plan_json(&self) -> serde_json::Value {
        let proxy = self.proxy.as_ref().map(|(p, _)| {
            serde_json::json!({
                "synthesized": true,
                "node": self.roles.get(PROXY_ROLE).and_then(|v| v.first()),
                "program": serde_json::to_value(&**p).expect("program encodes"),
            })
        });
        serde_json::json!({
            "lowering": serde_json::to_value(&self.plan).expect("plan encodes"),
            "replication": self.replication,
            "proxy": proxy,
            "consistency": self.consistency,
        })
    }

    pub fn node_state(&self, id: usize) -> &crate::runtime::NodeState {
        self.nodes[id].transducer.state()
    }

    pub fn is_alive(&self, id: usize) -> bool {
        self.nodes[id].alive
    }

    fn emit(&mut self, kind: TraceKind, payload: serde_json::Value) {
        self.trace.push(TraceEvent {
            tick: self.tick,
            seq: self.trace_seq,
            kind,
            payload,
        });
        self.trace_seq += 1;
    }

    /// Schedules a crash of every node under `domain` at tick `at`.
    pub fn inject_failure(&mut self, domain: &[String], at: u64) -> Result<(), SimError> {
        if !self.nodes.iter().any(|n| n.domain.starts_with(domain)) {
            return Err(SimError::UnknownDomain(domain.to_vec()));
        }
        self.failures.push(FailureSpec {
            tick: at,
            domain: domain.to_vec(),
        });
        Ok(())
    }

    fn apply_failures(&mut self) -> Result<(), SimError> {
        let now = self.tick;
        let due: Vec<FailureSpec> = self.failures.iter().filter(|f| f.tick == now).cloned().collect();
        for f in due {
            if !self.nodes.iter().any(|n| n.domain.starts_with(&f.domain)) {
                return Err(SimError::UnknownDomain(f.domain));
            }
            for i in 0..self.nodes.len() {
                if self.nodes[i].alive && self.nodes[i].domain.starts_with(&f.domain) {
                    self.nodes[i].alive = false;
                    self.nodes[i].inbox.clear();
                    let domain = self.nodes[i].domain.clone();
                    self.emit(TraceKind::Crashed, serde_json::json!({ "node": i, "domain": domain }));
                }
            }
        }
        let due: Vec<FailureSpec> = self.recoveries.iter().filter(|f| f.tick == now).cloned().collect();
        for f in due {
            for i in 0..self.nodes.len() {
                if !self.nodes[i].alive && self.nodes[i].domain.starts_with(&f.domain) {
                    let role = self.nodes[i].role.clone();
                    let mut t = self.fresh_transducer(&role)?;
                    t.set_endpoint(&node_endpoint(i));
                    let n = &mut self.nodes[i];
                    n.transducer = t;
                    n.serial.clear();
                    n.alive = true;
                    self.emit(TraceKind::Recovered, serde_json::json!({ "node": i }));
                }
            }
        }
        Ok(())
    }

    fn first_of_role(&self, role: &str) -> Option<usize> {
        self.roles.get(role).and_then(|ids| ids.first().copied())
    }

    /// Endpoints a message goes to when sent from `from` (None: a client).
    fn destinations(&self, from: Option<usize>, mailbox: &str, row: &Row, to: Option<&str>) -> Vec<String> {
        if let Some(to) = to {
            return vec![to.to_string()];
        }
        if handler_of_response(mailbox).is_some() && self.program.handler(mailbox).is_none() {
            let reply = Message::new(mailbox, row.clone());
            return vec![reply.reply_to().filter(|r| !r.is_empty()).unwrap_or("client/0").to_string()];
        }
        if self.program.handler(mailbox).is_none() {
            return vec!["client/0".to_string()];
        }
        if let Some(cfg) = self.consistency.sequencer_for(mailbox) {
            return cfg.replicas.iter().map(|i| node_endpoint(*i)).collect();
        }
        match self.plan.routes.get(mailbox) {
            Some(Route::Partitioned { role, field, .. }) => {
                let ids = self.roles.get(role).cloned().unwrap_or_default();
                if ids.is_empty() {
                    return vec![];
                }
                let v = row.get(field).cloned().unwrap_or_else(|| Value::str(""));
                return vec![node_endpoint(ids[partition_index(&v, ids.len())])];
            }
            Some(Route::Role { role }) => {
                if let Some(f) = from {
                    if &self.nodes[f].role == role {
                        return vec![node_endpoint(f)];
                    }
                }
                if let Some(ids) = self.replication.as_ref().and_then(|r| r.replicas_for(mailbox)) {
                    return ids.iter().map(|i| node_endpoint(*i)).collect();
                }
                self.first_of_role(role).map(node_endpoint).into_iter().collect()
            }
            _ => vec!["client/0".to_string()],
        }
    }

    fn stamp(&self, from: &str, mailbox: &str, row: &Row) -> Row {
        let mut r = (**row).clone();
        if !matches!(r.get(MESSAGE_ID).and_then(Value::as_int), Some(_)) {
            r.insert(MESSAGE_ID.to_string(), Value::int(internal_id(from, mailbox, row)));
        }
        if !r.contains_key(REPLY_TO) {
            r.insert(REPLY_TO.to_string(), Value::str(from));
        }
        Arc::new(r)
    }

    fn send(&mut self, from: &str, to: String, msg: Message) {
        let (lo, hi) = self.scenario.network.bounds(from, &to);
        let copies = if self.scenario.network.dup_prob > 0.0 && self.rng.gen_bool(self.scenario.network.dup_prob.min(1.0)) {
            2
        } else {
            1
        };
        for copy in 0..copies {
            let delay = self.rng.gen_range(lo..=hi);
            let at = self.tick + delay;
            let payload = serde_json::json!({
                "from": from,
                "to": to,
                "mailbox": msg.mailbox,
                "row": Value::Row(msg.row.clone()).to_json(),
                "deliver_at": at,
            });
            let kind = if copy == 0 { TraceKind::Sent } else { TraceKind::Duplicated };
            self.emit(kind, payload);
            self.in_flight.insert(
                (at, self.send_seq),
                Envelope {
                    from: from.to_string(),
                    to: to.clone(),
                    msg: msg.clone(),
                },
            );
            self.send_seq += 1;
        }
    }

    fn route_outbound(&mut self, from: usize, outbound: Vec<Outbound>) {
        let endpoint = node_endpoint(from);
        for o in outbound {
            let row = self.stamp(&endpoint, &o.mailbox, &o.row);
            let dests = self.destinations(Some(from), &o.mailbox, &row, o.to.as_deref());
            for d in dests {
                self.send(&endpoint, d, Message::new(o.mailbox.clone(), row.clone()));
            }
        }
    }

    fn inject_workload(&mut self) {
        while self.cursor < self.workload.len() && self.workload[self.cursor].tick <= self.tick {
            let item = self.workload[self.cursor].clone();
            self.cursor += 1;
            let client = format!("client/{}", item.client);
            let mut row = item.payload.clone();
            let id = match row.get(MESSAGE_ID).and_then(Value::as_int) {
                Some(id) => id,
                None => {
                    let id = self.id_rng.gen_range(1..1i64 << 40);
                    row.insert(MESSAGE_ID.to_string(), Value::int(id));
                    id
                }
            };
            row.insert(REPLY_TO.to_string(), Value::str(client.clone()));
            let row = Arc::new(row);
            if returns_value(&self.program, &item.mailbox) {
                self.requests.insert(id, item.mailbox.clone());
            }
            let dests = match self.first_of_role(PROXY_ROLE) {
                Some(p) => vec![node_endpoint(p)],
                None => self.destinations(None, &item.mailbox, &row, None),
            };
            for d in dests {
                self.send(&client, d, Message::new(item.mailbox.clone(), row.clone()));
            }
        }
    }

    fn deliver_due(&mut self) {
        while let Some(entry) = self.in_flight.first_entry() {
            if entry.key().0 > self.tick {
                break;
            }
            let env = entry.remove();
            if let Some(id) = parse_node(&env.to) {
                if id >= self.nodes.len() || !self.nodes[id].alive {
                    continue;
                }
                self.emit(
                    TraceKind::Delivered,
                    serde_json::json!({
                        "from": env.from,
                        "to": env.to,
                        "mailbox": env.msg.mailbox,
                        "message_id": env.msg.message_id(),
                    }),
                );
                if env.msg.mailbox == SYNC_MAILBOX {
                    self.receive_sync(id, &env.msg);
                } else if let Some(cfg) = self
                    .consistency
                    .sequencer_for(&env.msg.mailbox)
                    .filter(|_| self.nodes[id].role != PROXY_ROLE)
                {
                    let group = cfg.group.clone();
                    self.nodes[id].serial.entry(group).or_default().enqueue(env.msg);
                } else {
                    self.nodes[id].inbox.push(env.msg);
                }
            } else {
                self.emit(
                    TraceKind::Delivered,
                    serde_json::json!({
                        "from": env.from,
                        "to": env.to,
                        "mailbox": env.msg.mailbox,
                        "message_id": env.msg.message_id(),
                    }),
                );
                self.clients.entry(env.to.clone()).or_default().push(ClientMessage {
                    mailbox: env.msg.mailbox.clone(),
                    row: Value::Row(env.msg.row.clone()).to_json(),
                });
            }
        }
    }

    fn receive_sync(&mut self, id: usize, msg: &Message) {
        let Some(sync) = SyncMsg::from_row(&msg.row) else { return };
        let program = self.program.clone();
        let node = &mut self.nodes[id];
        let st = node.serial.entry(sync.group.clone()).or_default();
        let ready = st.receive(sync);
        for s in ready {
            node.serial.get_mut(&s.group).expect("group state").mark_done(s.message_id);
            // Effects were validated on the sequencer against the same
            // serial prefix; a failure here means replicas diverged.
            let _ = node.transducer.state_mut().apply(&program, s.effects);
        }
    }

    /// The live replica that currently serializes `group`, if any.
    fn acting_sequencer(&self, group: &str) -> Option<usize> {
        let cfg = self.consistency.sequencers.iter().find(|c| c.group == group)?;
        let id = *cfg.replicas.iter().find(|i| self.nodes[**i].alive)?;
        let endpoint = node_endpoint(id);
        let sync_in_flight = self
            .in_flight
            .values()
            .any(|e| e.to == endpoint && e.msg.mailbox == SYNC_MAILBOX);
        let gap = self.nodes[id].serial.get(group).is_some_and(|s| !s.pending.is_empty());
        (!sync_in_flight && !gap).then_some(id)
    }

    /// Runs one queued serializable request in isolation on `id`.
    fn serial_step(&mut self, id: usize, group: &str) {
        let Some(msg) = self.nodes[id].serial.get_mut(group).and_then(SerialState::next_ready) else {
            return;
        };
        let cfg = self
            .consistency
            .sequencers
            .iter()
            .find(|c| c.group == group)
            .expect("sequencer group")
            .clone();
        let handler = msg.mailbox.clone();
        let mid = msg.message_id().unwrap_or(0);
        let mut trial = self.nodes[id].transducer.clone();
        let saved = std::mem::take(&mut trial.state_mut().mailboxes);
        let only: BTreeSet<String> = [handler.clone()].into();
        let result = trial.tick_only(vec![msg.clone()], Some(&only));
        let bindings: Vec<(String, Value)> = msg.row.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut error = None;
        let committed = match &result {
            Ok(_) => cfg.invariants.get(&handler).into_iter().flatten().all(|inv| {
                match trial.eval_with(inv, &bindings) {
                    Ok(v) => v.as_bool() == Some(true),
                    Err(e) => {
                        error = Some(e.to_string());
                        false
                    }
                }
            }),
            Err(e) => {
                error = Some(e.to_string());
                false
            }
        };
        let (effects, outbound) = match (committed, result) {
            (true, Ok(r)) => {
                let mut t = trial;
                let leftover = std::mem::replace(&mut t.state_mut().mailboxes, saved);
                for (mb, msgs) in leftover {
                    t.state_mut().mailboxes.entry(mb).or_default().extend(msgs);
                }
                self.nodes[id].transducer = t;
                (r.delta, r.outbound)
            }
            _ => {
                let reply = Outbound {
                    mailbox: response_mailbox(&handler),
                    row: Arc::new(
                        [
                            (MESSAGE_ID.to_string(), Value::int(mid)),
                            (PAYLOAD.to_string(), Value::str(REJECTED)),
                            (
                                REPLY_TO.to_string(),
                                msg.row.get(REPLY_TO).cloned().unwrap_or_else(|| Value::str("client/0")),
                            ),
                        ]
                        .into_iter()
                        .collect(),
                    ),
                    to: None,
                };
                (Vec::new(), vec![reply])
            }
        };
        let st = self.nodes[id].serial.get_mut(group).expect("group state");
        let sync = SyncMsg {
            group: group.to_string(),
            seq: st.applied,
            message_id: mid,
            effects,
        };
        st.applied += 1;
        st.mark_done(mid);
        let mut payload = serde_json::json!({
            "node": id,
            "serial": handler,
            "message_id": mid,
            "committed": committed,
            "seq": sync.seq,
        });
        if let Some(e) = error {
            payload["error"] = serde_json::Value::String(e);
        }
        self.emit(TraceKind::TickCompleted, payload);
        let row = sync.to_row();
        let endpoint = node_endpoint(id);
        for r in cfg.replicas.iter().filter(|r| **r != id) {
            let mut full = (*row).clone();
            full.insert(REPLY_TO.to_string(), Value::str(endpoint.clone()));
            self.send(&endpoint, node_endpoint(*r), Message::new(SYNC_MAILBOX, Arc::new(full)));
        }
        self.route_outbound(id, outbound);
    }

    /// One global tick.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.apply_failures()?;
        self.inject_workload();
        self.deliver_due();
        let groups: Vec<String> = self.consistency.sequencers.iter().map(|c| c.group.clone()).collect();
        let acting: Vec<(String, Option<usize>)> = groups.iter().map(|g| (g.clone(), self.acting_sequencer(g))).collect();
        for id in 0..self.nodes.len() {
            if !self.nodes[id].alive {
                continue;
            }
            for (g, a) in &acting {
                if *a == Some(id) {
                    self.serial_step(id, g);
                }
            }
            let inbox = std::mem::take(&mut self.nodes[id].inbox);
            if inbox.is_empty() && !self.nodes[id].transducer.wants_tick() {
                continue;
            }
            let received = inbox.len();
            match self.nodes[id].transducer.tick(inbox) {
                Ok(r) => {
                    let mut payload = serde_json::json!({
                        "node": id,
                        "received": received,
                        "consumed": r.consumed,
                        "sent": r.outbound.len(),
                        "delta": r.delta.len(),
                        "iterations": r.iterations,
                    });
                    if !r.inspect.is_empty() {
                        payload["inspect"] = serde_json::Value::Array(r.inspect.clone());
                    }
                    self.emit(TraceKind::TickCompleted, payload);
                    self.route_outbound(id, r.outbound);
                }
                Err(e) => {
                    self.emit(
                        TraceKind::TickCompleted,
                        serde_json::json!({ "node": id, "received": received, "error": e.to_string() }),
                    );
                }
            }
        }
        if self.scenario.dump_state_each_tick {
            for id in 0..self.nodes.len() {
                if self.nodes[id].alive {
                    let state = self.nodes[id].transducer.state().data_json();
                    self.emit(TraceKind::StateDump, serde_json::json!({ "node": id, "state": state }));
                }
            }
        }
        self.tick += 1;
        Ok(())
    }

    pub fn is_quiescent(&self) -> bool {
        if !self.in_flight.is_empty() || self.cursor < self.workload.len() {
            return false;
        }
        let busy_node = self
            .nodes
            .iter()
            .any(|n| n.alive && (!n.inbox.is_empty() || n.transducer.wants_tick()));
        let busy_serial = self.consistency.sequencers.iter().any(|c| {
            self.acting_sequencer(&c.group)
                .is_some_and(|id| self.nodes[id].serial.get(&c.group).is_some_and(|s| !s.queue.is_empty()))
        });
        !busy_node && !busy_serial
    }

    pub fn run_to_quiescence(&mut self) -> Result<FinalState, SimError> {
        let max = self.scenario.max_ticks;
        while !self.is_quiescent() {
            if self.tick >= max {
                return Err(SimError::NoQuiescence(max));
            }
            self.step()?;
        }
        Ok(self.final_state())
    }

    pub fn final_state(&self) -> FinalState {
        let mut responses: BTreeMap<i64, usize> = self.requests.keys().map(|id| (*id, 0)).collect();
        for msgs in self.clients.values() {
            for m in msgs {
                if handler_of_response(&m.mailbox).is_none() {
                    continue;
                }
                if let Some(id) = m.row.get(MESSAGE_ID).and_then(serde_json::Value::as_i64) {
                    if let Some(n) = responses.get_mut(&id) {
                        *n += 1;
                    }
                }
            }
        }
        FinalState {
            tick: self.tick,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeFinal {
                    id: n.id,
                    endpoint: node_endpoint(n.id),
                    role: n.role.clone(),
                    alive: n.alive,
                    state: n.transducer.state().data_json(),
                })
                .collect(),
            clients: self.clients.clone(),
            unanswered: responses.iter().filter(|(_, n)| **n == 0).map(|(id, _)| *id).collect(),
            responses,
        }
    }
}

/// Outcome of one full run.
#[derive(Debug, Clone)]
pub struct Run {
    pub result: Result<FinalState, SimError>,
    pub trace: Vec<TraceEvent>,
}

pub fn simulate(scenario: &Scenario) -> Result<Run, SimError> {
    let mut c = Cluster::new(scenario.clone())?;
    let result = c.run_to_quiescence();
    Ok(Run {
        result,
        trace: c.trace,
    })
}

pub fn simulate_with(scenario: &Scenario, program: Arc<Program>, udfs: UdfRegistry) -> Result<Run, SimError> {
    let mut c = Cluster::with_program(scenario.clone(), program, udfs)?;
    let result = c.run_to_quiescence();
    Ok(Run {
        result,
        trace: c.trace,
    })
}

/// Runs `f` once per seed on the rayon pool; results in seed order.
pub fn sweep<T, F>(seeds: std::ops::Range<u64>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    seeds.into_par_iter().map(f).collect()
}
