//! Bundled programs, each with a workload generator and a sequential oracle
//! for the outputs clients should observe.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::ir::Program;
use crate::lowering::PlacementHints;
use crate::runtime::UdfRegistry;
use crate::sim::scenario::{InitData, NodeSpec, Scenario, WorkItem};
use crate::value::{MESSAGE_ID, REPLY_TO};

pub mod actors;
pub mod covid;
pub mod futures;
pub mod mpi;
pub mod reach;

/// A generated workload and the initial data it assumes.
#[derive(Debug, Clone, Default)]
pub struct Workload {
    pub items: Vec<WorkItem>,
    pub init: InitData,
}

/// Client-visible outputs: `(mailbox, canonical payload JSON)` with the
/// message id and reply address stripped.
pub type Outputs = BTreeSet<(String, String)>;

#[derive(Clone)]
pub struct PatternProgram {
    pub name: &'static str,
    pub program: Arc<Program>,
    pub udfs: UdfRegistry,
    pub hints: PlacementHints,
    pub nodes: Vec<NodeSpec>,
    pub workload: fn(u64) -> Workload,
    pub oracle: fn(&Workload) -> Outputs,
    /// Mailboxes the oracle speaks for.
    pub observed: &'static [&'static str],
}

impl std::fmt::Debug for PatternProgram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PatternProgram").field("name", &self.name).finish_non_exhaustive()
    }
}

impl PatternProgram {
    /// A scenario running this pattern on its default topology.
    pub fn scenario(&self, workload: &Workload, seed: u64) -> Scenario {
        let mut s = Scenario::named(self.name, seed);
        s.nodes = self.nodes.clone();
        s.placement = self.hints.clone();
        s.workload = workload.items.clone();
        s.init = workload.init.clone();
        s
    }

    /// `outputs` restricted to the mailboxes the oracle covers.
    pub fn observe(&self, outputs: &Outputs) -> Outputs {
        outputs
            .iter()
            .filter(|(mb, _)| self.observed.contains(&mb.as_str()))
            .cloned()
            .collect()
    }
}

pub fn all() -> Vec<PatternProgram> {
    vec![
        covid::covid_tracker(),
        actors::actor_patterns(),
        futures::futures_pattern(),
        mpi::mpi_collectives(),
        reach::transitive_closure(),
    ]
}

pub fn names() -> Vec<&'static str> {
    all().into_iter().map(|p| p.name).collect()
}

pub fn by_name(name: &str) -> Option<PatternProgram> {
    all().into_iter().find(|p| p.name == name)
}

/// Every pattern UDF, for inline programs that reuse them.
pub fn all_udfs() -> UdfRegistry {
    let mut r = UdfRegistry::new();
    for p in all() {
        r.extend(&p.udfs);
    }
    r
}

/// Canonical key for an output payload.
pub fn output_key(mailbox: &str, row: &crate::value::Row) -> (String, String) {
    let mut r = (**row).clone();
    r.remove(MESSAGE_ID);
    r.remove(REPLY_TO);
    let json = crate::value::Value::Row(Arc::new(r)).to_json();
    (mailbox.to_string(), json.to_string())
}

/// Builds one expected output entry from JSON.
pub fn expect(mailbox: &str, payload: serde_json::Value) -> (String, String) {
    (mailbox.to_string(), payload.to_string())
}

pub(crate) fn single_node() -> Vec<NodeSpec> {
    vec![NodeSpec::new(crate::lowering::DEFAULT_ROLE, &["az0", "dc0", "rack0", "vm0"])]
}

pub(crate) fn ints(values: &[i64]) -> crate::value::Value {
    crate::value::Value::tuple(values.iter().map(|v| crate::lattice::Scalar::Int(*v)).collect())
}
