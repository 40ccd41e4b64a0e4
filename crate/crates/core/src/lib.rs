//! Trace-driven simulation of model-serving functions on a GPU cluster.
//!
//! Each GPU caches whole models under LRU eviction. Requests wait in one
//! global queue and are placed by a pluggable scheduler.

pub mod catalog;
pub mod cluster;
pub mod config;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod report;
pub mod sched;
pub mod time;
pub mod workload;

pub use catalog::{Catalog, ModelId, ModelProfile};
pub use cluster::{ClusterState, GpuId, GpuState, DEFAULT_CAPACITY_MB};
pub use config::{Inputs, SimConfig, DEFAULT_GPU_COUNT};
pub use engine::{
    run, run_many, run_sweep, run_with_inputs, simulate, EngineOptions, EventRecord, SimRun,
    SweepAxis,
};
pub use error::{Error, Result};
pub use metrics::SimReport;
pub use sched::{Decision, DecisionKind, Dispatcher, GlobalQueue, Policy, SchedulerConfig};
pub use time::Micros;
pub use workload::{Request, RequestId, SyntheticTrace, TraceMatrix, Workload, WorkloadSpec};
