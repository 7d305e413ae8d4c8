//! A lattice-typed declarative program IR with transducer tick semantics,
//! a monotonicity analyzer, a dataflow runtime, a deterministic network
//! simulator with replication and sequencing facets, and a deployment
//! planner.

pub mod analysis;
pub mod facets;
pub mod ir;
pub mod lattice;
pub mod lowering;
pub mod patterns;
pub mod planner;
pub mod runtime;
pub mod sim;
pub mod value;
