//! Deployment planning: choose a machine type per handler and an instance
//! count per type under latency, cost and feature constraints.
//!
//! The search is branch-and-bound over handler-to-type assignments. For a
//! fixed assignment the feasible counts of each used type form an interval
//! (latency falls and cost rises with n), so each leaf is solved in closed
//! form. `solve_exhaustive` enumerates the full count grid and is the
//! reference the search is checked against.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{Program, TargetSpec};

pub const DEFAULT_N_MAX: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineType {
    pub name: String,
    /// Cost units per instance per tick.
    pub price: f64,
    #[serde(default)]
    pub features: BTreeSet<String>,
    #[serde(default = "one")]
    pub capacity: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandlerTarget {
    pub name: String,
    #[serde(default)]
    pub latency_ms: Option<f64>,
    #[serde(default)]
    pub cost: Option<f64>,
    #[serde(default)]
    pub features: BTreeSet<String>,
    /// Offered load, relative units; scales the analytic latency.
    #[serde(default = "one")]
    pub load: f64,
}

impl HandlerTarget {
    pub fn new(name: &str) -> HandlerTarget {
        HandlerTarget {
            name: name.to_string(),
            latency_ms: None,
            cost: None,
            features: BTreeSet::new(),
            load: 1.0,
        }
    }
}

/// Latency, cost and throughput of running a handler on `n` instances of a
/// machine type. Latency must not rise with `n`; cost and throughput must
/// not fall.
pub trait CostModel {
    fn latency(&self, h: &HandlerTarget, m: &MachineType, n: u32) -> f64;
    fn cost(&self, h: &HandlerTarget, m: &MachineType, n: u32) -> f64;
    fn tput(&self, h: &HandlerTarget, m: &MachineType, n: u32) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub handler: String,
    pub machine: String,
    #[serde(default)]
    pub base_ms: Option<f64>,
    #[serde(default)]
    pub fixed_ms: Option<f64>,
    #[serde(default)]
    pub rate: Option<f64>,
}

/// latency = base/n + fixed, cost = n * price * duration, tput = rate * n.
/// `base` defaults to `base_ms * load / capacity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticModel {
    pub base_ms: f64,
    pub fixed_ms: f64,
    pub rate: f64,
    pub duration: f64,
    #[serde(default)]
    pub entries: Vec<ModelEntry>,
}

impl Default for AnalyticModel {
    fn default() -> Self {
        AnalyticModel {
            base_ms: 150.0,
            fixed_ms: 10.0,
            rate: 100.0,
            duration: 1.0,
            entries: Vec::new(),
        }
    }
}

impl AnalyticModel {
    fn entry(&self, h: &HandlerTarget, m: &MachineType) -> Option<&ModelEntry> {
        self.entries.iter().find(|e| e.handler == h.name && e.machine == m.name)
    }

    pub fn base(&self, h: &HandlerTarget, m: &MachineType) -> f64 {
        self.entry(h, m)
            .and_then(|e| e.base_ms)
            .unwrap_or(self.base_ms / m.capacity)
            * h.load
    }

    pub fn fixed(&self, h: &HandlerTarget, m: &MachineType) -> f64 {
        self.entry(h, m).and_then(|e| e.fixed_ms).unwrap_or(self.fixed_ms)
    }

    pub fn rate(&self, h: &HandlerTarget, m: &MachineType) -> f64 {
        self.entry(h, m).and_then(|e| e.rate).unwrap_or(self.rate * m.capacity)
    }
}

impl CostModel for AnalyticModel {
    fn latency(&self, h: &HandlerTarget, m: &MachineType, n: u32) -> f64 {
        self.base(h, m) / n as f64 + self.fixed(h, m)
    }

    fn cost(&self, _h: &HandlerTarget, m: &MachineType, n: u32) -> f64 {
        n as f64 * m.price * self.duration
    }

    fn tput(&self, h: &HandlerTarget, m: &MachineType, n: u32) -> f64 {
        self.rate(h, m) * n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "snake_case")]
pub enum Objective {
    MinimizeMachines,
    MaximizeThroughput,
    MinimizeCostOverWindow { window: f64 },
}

impl Objective {
    fn maximize(&self) -> bool {
        matches!(self, Objective::MaximizeThroughput)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub machines: Vec<MachineType>,
    pub handlers: Vec<HandlerTarget>,
    pub objective: Objective,
    #[serde(default = "default_n_max")]
    pub n_max: u32,
    #[serde(default)]
    pub model: AnalyticModel,
}

fn default_n_max() -> u32 {
    DEFAULT_N_MAX
}

impl Problem {
    pub fn new(machines: Vec<MachineType>, handlers: Vec<HandlerTarget>, objective: Objective) -> Problem {
        Problem {
            machines,
            handlers,
            objective,
            n_max: DEFAULT_N_MAX,
            model: AnalyticModel::default(),
        }
    }

    /// One target per handler of `p`; an override inherits unset bounds
    /// from the default block.
    pub fn from_program(p: &Program, machines: Vec<MachineType>, objective: Objective) -> Problem {
        let handlers = p
            .handlers
            .iter()
            .filter_map(|h| {
                let t = merged_target(p.targets.default.as_ref(), p.targets.overrides.get(&h.name))?;
                Some(HandlerTarget {
                    name: h.name.clone(),
                    latency_ms: t.latency_ms,
                    cost: t.cost,
                    features: t.features,
                    load: 1.0,
                })
            })
            .collect();
        Problem::new(machines, handlers, objective)
    }

    pub fn from_json(text: &str) -> Result<Problem, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn merged_target(default: Option<&TargetSpec>, over: Option<&TargetSpec>) -> Option<TargetSpec> {
    match (default, over) {
        (None, None) => None,
        (Some(d), None) => Some(d.clone()),
        (None, Some(o)) => Some(o.clone()),
        (Some(d), Some(o)) => Some(TargetSpec {
            latency_ms: o.latency_ms.or(d.latency_ms),
            cost: o.cost.or(d.cost),
            features: d.features.union(&o.features).cloned().collect(),
        }),
    }
}

/// CPU and GPU instance types for the bundled tracker's targets.
pub fn sample_catalog() -> Vec<MachineType> {
    vec![
        MachineType {
            name: "cpu".into(),
            price: 0.004,
            features: BTreeSet::new(),
            capacity: 1.0,
        },
        MachineType {
            name: "gpu".into(),
            price: 0.05,
            features: BTreeSet::from(["GPU".to_string()]),
            capacity: 4.0,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub counts: BTreeMap<String, u32>,
    pub assignment: BTreeMap<String, String>,
    pub objective: f64,
}

impl DeploymentPlan {
    pub fn total_instances(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn table(&self) -> String {
        let mut out = String::from("handler              machine   instances\n");
        for (h, m) in &self.assignment {
            out.push_str(&format!("{h:<20} {m:<9} {}\n", self.counts.get(m).copied().unwrap_or(0)));
        }
        out.push_str(&format!("objective {}\n", self.objective));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "constraint", rename_all = "snake_case")]
pub enum Violation {
    /// No type reaches the bound; `best` is the lowest latency seen.
    Latency { bound: f64, best: f64 },
    /// Every type that meets latency exceeds the budget at that count.
    Cost { bound: f64, best: f64 },
    /// No type offers these features.
    Feature { missing: BTreeSet<String> },
    /// Feasible alone, but not alongside `with` on any shared type.
    SharedPool { with: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandlerViolation {
    pub handler: String,
    #[serde(flatten)]
    pub violation: Violation,
    /// A larger instance cap would make this handler feasible.
    pub at_cap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infeasible {
    pub violations: Vec<HandlerViolation>,
}

impl Infeasible {
    /// True when every violation would clear with a larger cap.
    pub fn only_at_cap(&self) -> bool {
        !self.violations.is_empty() && self.violations.iter().all(|v| v.at_cap)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("infeasible: {} violated constraint(s)", .0.violations.len())]
    Infeasible(Infeasible),
    #[error("cost model error: {0}")]
    Model(String),
}

/// What to ask earlier compilation stages to change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktrackRequest {
    pub violations: Vec<HandlerViolation>,
    pub suggestions: Vec<String>,
}

pub fn backtrack_signal(inf: &Infeasible) -> BacktrackRequest {
    let mut violations = inf.violations.clone();
    violations.sort_by(|a, b| a.handler.cmp(&b.handler));
    let suggestions = violations
        .iter()
        .map(|v| match &v.violation {
            Violation::Latency { .. } if v.at_cap => format!("{}: raise the instance cap", v.handler),
            Violation::Latency { bound, .. } => format!("{}: relax latency bound {bound} ms", v.handler),
            Violation::Cost { bound, .. } => {
                format!("{}: relax cost bound {bound} or lower its replication factor", v.handler)
            }
            Violation::Feature { missing } => {
                let m: Vec<&str> = missing.iter().map(String::as_str).collect();
                format!("{}: add a machine type with {}", v.handler, m.join(","))
            }
            Violation::SharedPool { with } => format!("{}: separate from {with} or relax either bound", v.handler),
        })
        .collect();
    BacktrackRequest { violations, suggestions }
}

/// Checks the model's monotonicity on every handler/type pair up to the cap.
pub fn check_model(problem: &Problem, model: &dyn CostModel) -> Result<(), PlanError> {
    for m in &problem.machines {
        if !(m.price > 0.0) || !(m.capacity > 0.0) {
            return Err(PlanError::Model(format!("machine {} needs positive price and capacity", m.name)));
        }
    }
    for h in &problem.handlers {
        for m in &problem.machines {
            for n in 1..problem.n_max.max(1) {
                let bad = model.latency(h, m, n + 1) > model.latency(h, m, n)
                    || model.cost(h, m, n + 1) < model.cost(h, m, n)
                    || model.tput(h, m, n + 1) < model.tput(h, m, n);
                if bad {
                    return Err(PlanError::Model(format!(
                        "not monotone for {} on {} at n={}",
                        h.name, m.name, n
                    )));
                }
            }
        }
    }
    Ok(())
}

fn satisfies(h: &HandlerTarget, m: &MachineType, n: u32, model: &dyn CostModel) -> bool {
    n >= 1
        && h.features.is_subset(&m.features)
        && h.latency_ms.is_none_or(|b| model.latency(h, m, n) <= b)
        && h.cost.is_none_or(|b| model.cost(h, m, n) <= b)
}

/// Re-checks a plan against every constraint.
pub fn verify(problem: &Problem, model: &dyn CostModel, plan: &DeploymentPlan) -> Result<(), String> {
    if plan.total_instances() == 0 {
        return Err("no instances allocated".into());
    }
    let used: BTreeSet<&String> = plan.assignment.values().collect();
    for (m, n) in &plan.counts {
        if *n > 0 && !used.contains(m) {
            return Err(format!("{m} has instances but no handlers"));
        }
        if *n > problem.n_max {
            return Err(format!("{m} exceeds the cap"));
        }
    }
    for h in &problem.handlers {
        let name = plan.assignment.get(&h.name).ok_or_else(|| format!("{} unassigned", h.name))?;
        let m = problem
            .machines
            .iter()
            .find(|m| &m.name == name)
            .ok_or_else(|| format!("unknown machine {name}"))?;
        let n = plan.counts.get(name).copied().unwrap_or(0);
        if !satisfies(h, m, n, model) {
            return Err(format!("{} violates its targets on {n} x {name}", h.name));
        }
    }
    Ok(())
}

fn objective_value(problem: &Problem, model: &dyn CostModel, assign: &[usize], counts: &[u32]) -> f64 {
    match problem.objective {
        Objective::MinimizeMachines => counts.iter().map(|n| *n as f64).sum(),
        Objective::MinimizeCostOverWindow { window } => problem
            .machines
            .iter()
            .zip(counts)
            .map(|(m, n)| *n as f64 * m.price * window)
            .sum(),
        Objective::MaximizeThroughput => problem
            .handlers
            .iter()
            .zip(assign)
            .map(|(h, &mi)| model.tput(h, &problem.machines[mi], counts[mi]))
            .sum(),
    }
}

/// Orders candidate plans: better objective first, then lexicographically
/// smaller machine names per handler, then smaller counts.
fn better(problem: &Problem, a: &Candidate, b: &Candidate) -> bool {
    let obj = if problem.objective.maximize() {
        b.value.total_cmp(&a.value)
    } else {
        a.value.total_cmp(&b.value)
    };
    let names = |c: &Candidate| -> Vec<&str> { c.assign.iter().map(|i| problem.machines[*i].name.as_str()).collect() };
    obj.then_with(|| names(a).cmp(&names(b)))
        .then_with(|| a.counts.cmp(&b.counts))
        == Ordering::Less
}

#[derive(Debug, Clone)]
struct Candidate {
    value: f64,
    assign: Vec<usize>,
    counts: Vec<u32>,
}

fn to_plan(problem: &Problem, c: &Candidate) -> DeploymentPlan {
    DeploymentPlan {
        counts: problem
            .machines
            .iter()
            .zip(&c.counts)
            .filter(|(_, n)| **n > 0)
            .map(|(m, n)| (m.name.clone(), *n))
            .collect(),
        assignment: problem
            .handlers
            .iter()
            .zip(&c.assign)
            .map(|(h, mi)| (h.name.clone(), problem.machines[*mi].name.clone()))
            .collect(),
        objective: c.value,
    }
}

/// Feasible counts of `m` for `h`: smallest n meeting latency, largest n
/// meeting cost.
fn interval(h: &HandlerTarget, m: &MachineType, n_max: u32, model: &dyn CostModel) -> Option<(u32, u32)> {
    if !h.features.is_subset(&m.features) {
        return None;
    }
    let lo = (1..=n_max).find(|n| h.latency_ms.is_none_or(|b| model.latency(h, m, *n) <= b))?;
    let hi = (1..=n_max).rev().find(|n| h.cost.is_none_or(|b| model.cost(h, m, *n) <= b))?;
    (lo <= hi).then_some((lo, hi))
}

struct Search<'a> {
    problem: &'a Problem,
    model: &'a dyn CostModel,
    /// Per handler, per machine: feasible count interval.
    intervals: Vec<Vec<Option<(u32, u32)>>>,
    best: Option<Candidate>,
    nodes: u64,
}

impl Search<'_> {
    fn leaf(&self, assign: &[usize], bounds: &[Option<(u32, u32)>]) -> Candidate {
        let max = self.problem.objective.maximize();
        let counts: Vec<u32> = bounds
            .iter()
            .map(|b| b.map(|(lo, hi)| if max { hi } else { lo }).unwrap_or(0))
            .collect();
        Candidate {
            value: objective_value(self.problem, self.model, assign, &counts),
            assign: assign.to_vec(),
            counts,
        }
    }

    /// Optimistic objective for any completion of a partial assignment.
    fn bound(&self, assign: &[usize], bounds: &[Option<(u32, u32)>]) -> f64 {
        let p = self.problem;
        match p.objective {
            Objective::MinimizeMachines | Objective::MinimizeCostOverWindow { .. } => {
                let counts: Vec<u32> = bounds.iter().map(|b| b.map(|(lo, _)| lo).unwrap_or(0)).collect();
                objective_value(p, self.model, assign, &counts)
            }
            Objective::MaximizeThroughput => {
                let mut total = 0.0;
                for (hi_idx, h) in p.handlers.iter().enumerate() {
                    total += match assign.get(hi_idx) {
                        Some(&mi) => self.model.tput(h, &p.machines[mi], bounds[mi].map(|b| b.1).unwrap_or(0)),
                        None => (0..p.machines.len())
                            .filter_map(|mi| {
                                let (_, hi) = self.intervals[hi_idx][mi]?;
                                let cap = bounds[mi].map(|b| b.1.min(hi)).unwrap_or(hi);
                                Some(self.model.tput(h, &p.machines[mi], cap))
                            })
                            .fold(0.0, f64::max),
                    };
                }
                total
            }
        }
    }

    fn prune(&self, bound: f64) -> bool {
        match &self.best {
            None => false,
            Some(b) if self.problem.objective.maximize() => bound < b.value,
            Some(b) => bound > b.value,
        }
    }

    fn dfs(&mut self, assign: &mut Vec<usize>, bounds: &mut Vec<Option<(u32, u32)>>) {
        self.nodes += 1;
        let k = assign.len();
        if k == self.problem.handlers.len() {
            let cand = self.leaf(assign, bounds);
            if self.best.as_ref().is_none_or(|b| better(self.problem, &cand, b)) {
                self.best = Some(cand);
            }
            return;
        }
        let mut order: Vec<usize> = (0..self.problem.machines.len()).collect();
        order.sort_by(|a, b| self.problem.machines[*a].name.cmp(&self.problem.machines[*b].name));
        for mi in order {
            let Some((lo, hi)) = self.intervals[k][mi] else { continue };
            let prev = bounds[mi];
            let merged = match prev {
                None => (lo, hi),
                Some((a, b)) => (a.max(lo), b.min(hi)),
            };
            if merged.0 > merged.1 {
                continue;
            }
            bounds[mi] = Some(merged);
            assign.push(mi);
            if !self.prune(self.bound(assign, bounds)) {
                self.dfs(assign, bounds);
            }
            assign.pop();
            bounds[mi] = prev;
        }
    }
}

fn validate_problem(problem: &Problem, model: &dyn CostModel) -> Result<(), PlanError> {
    if problem.handlers.is_empty() {
        return Err(PlanError::Model("no handlers to place".into()));
    }
    let mut names = BTreeSet::new();
    for m in &problem.machines {
        if !names.insert(&m.name) {
            return Err(PlanError::Model(format!("duplicate machine type {}", m.name)));
        }
    }
    for h in &problem.handlers {
        for b in [h.latency_ms, h.cost].into_iter().flatten() {
            if !(b > 0.0) {
                return Err(PlanError::Model(format!("{}: bounds must be positive", h.name)));
            }
        }
    }
    check_model(problem, model)
}

/// Branch-and-bound with the problem's analytic model.
pub fn solve(problem: &Problem) -> Result<DeploymentPlan, PlanError> {
    solve_with(problem, &problem.model)
}

pub fn solve_with(problem: &Problem, model: &dyn CostModel) -> Result<DeploymentPlan, PlanError> {
    solve_counted(problem, model).map(|(p, _)| p)
}

/// Also returns the number of search nodes visited.
pub fn solve_counted(problem: &Problem, model: &dyn CostModel) -> Result<(DeploymentPlan, u64), PlanError> {
    validate_problem(problem, model)?;
    let intervals: Vec<Vec<Option<(u32, u32)>>> = problem
        .handlers
        .iter()
        .map(|h| problem.machines.iter().map(|m| interval(h, m, problem.n_max, model)).collect())
        .collect();
    let mut s = Search {
        problem,
        model,
        intervals,
        best: None,
        nodes: 0,
    };
    let mut assign = Vec::new();
    let mut bounds = vec![None; problem.machines.len()];
    s.dfs(&mut assign, &mut bounds);
    match &s.best {
        Some(c) => Ok((to_plan(problem, c), s.nodes)),
        None => Err(PlanError::Infeasible(diagnose(problem, model))),
    }
}

/// Every assignment and every count vector in `0..=n_max` per type.
pub fn solve_exhaustive(problem: &Problem, model: &dyn CostModel) -> Result<DeploymentPlan, PlanError> {
    validate_problem(problem, model)?;
    let (nh, nm) = (problem.handlers.len(), problem.machines.len());
    let mut best: Option<Candidate> = None;
    let mut assign = vec![0usize; nh];
    loop {
        let mut counts = vec![0u32; nm];
        loop {
            let plan = to_plan(
                problem,
                &Candidate {
                    value: 0.0,
                    assign: assign.clone(),
                    counts: counts.clone(),
                },
            );
            if verify(problem, model, &plan).is_ok() {
                let cand = Candidate {
                    value: objective_value(problem, model, &assign, &counts),
                    assign: assign.clone(),
                    counts: counts.clone(),
                };
                if best.as_ref().is_none_or(|b| better(problem, &cand, b)) {
                    best = Some(cand);
                }
            }
            if !odometer(&mut counts, problem.n_max + 1) {
                break;
            }
        }
        let mut a32: Vec<u32> = assign.iter().map(|x| *x as u32).collect();
        if nm == 0 || !odometer(&mut a32, nm as u32) {
            break;
        }
        assign = a32.into_iter().map(|x| x as usize).collect();
    }
    match best {
        Some(c) => Ok(to_plan(problem, &c)),
        None => Err(PlanError::Infeasible(diagnose(problem, model))),
    }
}

fn odometer(digits: &mut [u32], base: u32) -> bool {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

/// The tightest violated constraint per handler.
fn diagnose(problem: &Problem, model: &dyn CostModel) -> Infeasible {
    let n_max = problem.n_max;
    let mut violations = Vec::new();
    let mut alone_ok = Vec::new();
    for h in &problem.handlers {
        let typed: Vec<&MachineType> = problem.machines.iter().filter(|m| h.features.is_subset(&m.features)).collect();
        if typed.is_empty() {
            let offered: BTreeSet<String> = problem.machines.iter().flat_map(|m| m.features.iter().cloned()).collect();
            violations.push(HandlerViolation {
                handler: h.name.clone(),
                violation: Violation::Feature {
                    missing: h.features.difference(&offered).cloned().collect(),
                },
                at_cap: false,
            });
            continue;
        }
        if typed.iter().any(|m| interval(h, m, n_max, model).is_some()) {
            alone_ok.push(h);
            continue;
        }
        let latency_ok: Vec<(&MachineType, u32)> = typed
            .iter()
            .filter_map(|m| {
                let lo = (1..=n_max).find(|n| h.latency_ms.is_none_or(|b| model.latency(h, m, *n) <= b))?;
                Some((*m, lo))
            })
            .collect();
        if latency_ok.is_empty() {
            let bound = h.latency_ms.unwrap_or(f64::INFINITY);
            let best = typed.iter().map(|m| model.latency(h, m, n_max)).fold(f64::INFINITY, f64::min);
            let at_cap = typed.iter().any(|m| model.latency(h, m, n_max.saturating_mul(4)) <= bound);
            violations.push(HandlerViolation {
                handler: h.name.clone(),
                violation: Violation::Latency { bound, best },
                at_cap,
            });
        } else {
            let bound = h.cost.unwrap_or(f64::INFINITY);
            let best = latency_ok.iter().map(|(m, lo)| model.cost(h, m, *lo)).fold(f64::INFINITY, f64::min);
            violations.push(HandlerViolation {
                handler: h.name.clone(),
                violation: Violation::Cost { bound, best },
                at_cap: false,
            });
        }
    }
    if violations.is_empty() {
        // Each handler fits somewhere alone; the conflict is over a shared
        // type. Report each handler against the first it cannot share with.
        for h in &alone_ok {
            for other in &alone_ok {
                if h.name == other.name {
                    continue;
                }
                let shareable = problem.machines.iter().any(|m| {
                    match (interval(h, m, n_max, model), interval(other, m, n_max, model)) {
                        (Some(a), Some(b)) => a.0.max(b.0) <= a.1.min(b.1),
                        _ => false,
                    }
                });
                let h_alternatives = problem.machines.iter().filter(|m| interval(h, m, n_max, model).is_some()).count();
                if !shareable && h_alternatives == 1 {
                    violations.push(HandlerViolation {
                        handler: h.name.clone(),
                        violation: Violation::SharedPool { with: other.name.clone() },
                        at_cap: false,
                    });
                    break;
                }
            }
        }
    }
    violations.sort_by(|a, b| a.handler.cmp(&b.handler));
    Infeasible { violations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replan {
    pub plan: DeploymentPlan,
    /// Instances added (positive) or removed (negative) per type.
    pub delta: BTreeMap<String, i64>,
}

pub fn replan(previous: &DeploymentPlan, problem: &Problem) -> Result<Replan, PlanError> {
    let plan = solve(problem)?;
    let types: BTreeSet<&String> = previous.counts.keys().chain(plan.counts.keys()).collect();
    let delta = types
        .into_iter()
        .filter_map(|m| {
            let d = plan.counts.get(m).copied().unwrap_or(0) as i64 - previous.counts.get(m).copied().unwrap_or(0) as i64;
            (d != 0).then(|| (m.clone(), d))
        })
        .collect();
    Ok(Replan { plan, delta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cpu(price: f64) -> MachineType {
        MachineType {
            name: "cpu".into(),
            price,
            features: BTreeSet::new(),
            capacity: 1.0,
        }
    }

    #[test]
    fn smallest_count_meeting_latency() {
        let mut h = HandlerTarget::new("h");
        h.latency_ms = Some(100.0);
        let p = Problem::new(vec![cpu(1.0)], vec![h], Objective::MinimizeMachines);
        let plan = solve(&p).unwrap();
        assert_eq!(plan.counts["cpu"], 2);
    }

    #[test]
    fn budget_below_one_instance() {
        let mut h = HandlerTarget::new("h");
        h.cost = Some(0.5);
        let p = Problem::new(vec![cpu(1.0)], vec![h], Objective::MinimizeMachines);
        let PlanError::Infeasible(inf) = solve(&p).unwrap_err() else { panic!() };
        assert!(matches!(inf.violations[0].violation, Violation::Cost { .. }));
    }

    #[test]
    fn non_monotone_model_rejected() {
        struct Bad;
        impl CostModel for Bad {
            fn latency(&self, _: &HandlerTarget, _: &MachineType, n: u32) -> f64 {
                n as f64
            }
            fn cost(&self, _: &HandlerTarget, _: &MachineType, _: u32) -> f64 {
                0.0
            }
            fn tput(&self, _: &HandlerTarget, _: &MachineType, _: u32) -> f64 {
                0.0
            }
        }
        let p = Problem::new(vec![cpu(1.0)], vec![HandlerTarget::new("h")], Objective::MinimizeMachines);
        assert!(matches!(solve_with(&p, &Bad), Err(PlanError::Model(_))));
    }
}
