//! Energy-aware wireless ad-hoc network simulator.
//!
//! The crate is layered bottom-up:
//!
//! - [`model`]: closed-form power, loss, throughput and caching formulas.
//! - [`engine`]: discrete-event kernel, seeded random streams, Pareto flows.
//! - [`topology`]: grid placement, mobility, directed links, zone routing.
//! - [`control`]: packet classification, forward/cache/drop decisions,
//!   cache stores, radio states and the per-node energy ledger.
//! - [`metrics`]: run metrics and the figure aggregations.
//! - [`scenario`] and [`runner`]: configuration, single runs and sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod topology;

pub use error::{Error, Result};
pub use model::{CachingParams, CapacityExponent, CapacityState, LinkSpec, PowerCalibration, ThroughputStats};
pub use scenario::Scenario;
pub use sim::{simulate, RunOutput, Simulation};
pub use topology::{NodeId, Route, Topology, Zone};
