//! Scenario files: program, topology, network, workload, failures, seed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::Program;
use crate::lowering::PlacementHints;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProgramRef {
    Named(String),
    Inline(Box<Program>),
}

fn main_role() -> String {
    crate::lowering::DEFAULT_ROLE.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    #[serde(default = "main_role")]
    pub role: String,
    /// Failure-domain path, outermost first: (az, dc, rack, vm).
    #[serde(default)]
    pub domain: Vec<String>,
}

impl NodeSpec {
    pub fn new(role: &str, domain: &[&str]) -> NodeSpec {
        NodeSpec {
            role: role.to_string(),
            domain: domain.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkOverride {
    pub from: String,
    pub to: String,
    pub delay_min: u64,
    pub delay_max: u64,
}

fn one() -> u64 {
    1
}

fn twenty() -> u64 {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    #[serde(default = "one")]
    pub delay_min: u64,
    #[serde(default = "twenty")]
    pub delay_max: u64,
    #[serde(default)]
    pub dup_prob: f64,
    #[serde(default)]
    pub links: Vec<LinkOverride>,
}

impl Default for NetworkModel {
    fn default() -> Self {
        NetworkModel {
            delay_min: 1,
            delay_max: 20,
            dup_prob: 0.0,
            links: Vec::new(),
        }
    }
}

impl NetworkModel {
    pub fn fixed(delay: u64) -> Self {
        NetworkModel {
            delay_min: delay,
            delay_max: delay,
            ..Default::default()
        }
    }

    pub fn bounds(&self, from: &str, to: &str) -> (u64, u64) {
        let (lo, hi) = self
            .links
            .iter()
            .find(|l| l.from == from && l.to == to)
            .map(|l| (l.delay_min, l.delay_max))
            .unwrap_or((self.delay_min, self.delay_max));
        let lo = lo.max(1);
        (lo, hi.max(lo))
    }
}

/// A client request injected at `tick`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub tick: u64,
    pub mailbox: String,
    #[serde(default)]
    pub payload: BTreeMap<String, Value>,
    #[serde(default)]
    pub client: usize,
}

impl WorkItem {
    pub fn new<const N: usize>(tick: u64, mailbox: &str, fields: [(&str, Value); N]) -> WorkItem {
        WorkItem {
            tick,
            mailbox: mailbox.to_string(),
            payload: fields.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            client: 0,
        }
    }

    pub fn from_client(mut self, client: usize) -> WorkItem {
        self.client = client;
        self
    }

    pub fn with_id(mut self, id: i64) -> WorkItem {
        self.payload.insert(crate::value::MESSAGE_ID.to_string(), Value::int(id));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSpec {
    pub tick: u64,
    pub domain: Vec<String>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Facets {
    /// Replicate per the program's availability specs and front the
    /// replicas with a client proxy.
    #[serde(default)]
    pub availability: bool,
    /// Route serializable handlers through the sequencer. Off, they run as
    /// eventual handlers.
    #[serde(default = "yes")]
    pub consistency: bool,
}

impl Default for Facets {
    fn default() -> Self {
        Facets {
            availability: false,
            consistency: true,
        }
    }
}

/// Rows and var values loaded into every replica before tick 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitData {
    #[serde(default)]
    pub tables: BTreeMap<String, Vec<BTreeMap<String, Value>>>,
    #[serde(default)]
    pub vars: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    #[default]
    Graph,
    Interpreter,
}

fn max_ticks() -> u64 {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub program: ProgramRef,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    /// Shorthand for `nodes` when every node has the default role.
    #[serde(default)]
    pub failure_domains: Vec<Vec<String>>,
    #[serde(default)]
    pub placement: PlacementHints,
    #[serde(default)]
    pub network: NetworkModel,
    #[serde(default)]
    pub workload: Vec<WorkItem>,
    #[serde(default)]
    pub failures: Vec<FailureSpec>,
    #[serde(default)]
    pub recoveries: Vec<FailureSpec>,
    #[serde(default)]
    pub facets: Facets,
    #[serde(default)]
    pub init: InitData,
    pub seed: u64,
    /// Seeds message-id generation separately, so a seed sweep can vary
    /// delivery while keeping the workload fixed. Defaults to `seed`.
    #[serde(default)]
    pub workload_seed: Option<u64>,
    #[serde(default = "max_ticks")]
    pub max_ticks: u64,
    #[serde(default)]
    pub engine: EngineKind,
    #[serde(default)]
    pub dump_state_each_tick: bool,
    #[serde(default)]
    pub inspect: bool,
}

impl Scenario {
    pub fn new(program: ProgramRef, seed: u64) -> Scenario {
        Scenario {
            program,
            nodes: Vec::new(),
            failure_domains: Vec::new(),
            placement: PlacementHints::default(),
            network: NetworkModel::default(),
            workload: Vec::new(),
            failures: Vec::new(),
            recoveries: Vec::new(),
            facets: Facets::default(),
            init: InitData::default(),
            seed,
            workload_seed: None,
            max_ticks: max_ticks(),
            engine: EngineKind::Graph,
            dump_state_each_tick: false,
            inspect: false,
        }
    }

    pub fn named(name: &str, seed: u64) -> Scenario {
        Scenario::new(ProgramRef::Named(name.to_string()), seed)
    }

    pub fn from_json(text: &str) -> Result<Scenario, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Node list after applying the `failure_domains` shorthand; a single
    /// default node when neither is given.
    pub fn node_specs(&self) -> Vec<NodeSpec> {
        if !self.nodes.is_empty() {
            return self.nodes.clone();
        }
        if !self.failure_domains.is_empty() {
            return self
                .failure_domains
                .iter()
                .map(|d| NodeSpec {
                    role: main_role(),
                    domain: d.clone(),
                })
                .collect();
        }
        vec![NodeSpec::new(crate::lowering::DEFAULT_ROLE, &["az0", "dc0", "rack0", "vm0"])]
    }

    /// One node per availability zone, default role.
    pub fn with_azs(mut self, n: usize) -> Scenario {
        self.nodes = (0..n)
            .map(|i| {
                let az = format!("az{i}");
                NodeSpec::new(crate::lowering::DEFAULT_ROLE, &[&az, "dc0", "rack0", "vm0"])
            })
            .collect();
        self
    }
}
