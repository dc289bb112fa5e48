//! Deterministic simulator for energy-aware VM consolidation in a
//! homogeneous-rack data center.
//!
//! A [`engine::Simulation`] replays per-VM CPU utilization traces in fixed
//! steps. Each step an overload detector flags hosts, a selector picks VMs
//! to evict, and power-aware best fit decreasing places them; underloaded
//! hosts are drained and put to sleep. Energy and SLA ledgers are reduced
//! into the metrics in [`metrics`], and [`experiment`] sweeps whole grids.

// `!(x > 0.0)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod detection;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod placement;
pub mod selection;
pub mod stats;
pub mod workload;

pub use detection::{DetectorConfig, DetectorKind};
pub use engine::{Mode, Simulation, SimulationConfig, SimulationResult, Workload};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{DataCenterConfig, HostId, PowerModel, VmId};
pub use selection::{SelectorConfig, SelectorKind};
pub use workload::{TraceSet, UtilizationTrace};
