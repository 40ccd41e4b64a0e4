//! Discrete-event simulation loop.
//!
//! Two event kinds exist: a request arriving and a GPU finishing. Events are
//! ordered by time, then completions before arrivals (a GPU freed at `t` can
//! take a request arriving at `t`), then insertion order. The scheduler runs
//! after every event.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::cluster::{ClusterState, GpuId, GpuSnapshot, QueuedRequest};
use crate::config::{Inputs, SimConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricsAccumulator, SimReport};
use crate::sched::{DecisionKind, Dispatcher, GlobalQueue, Policy};
use crate::time::Micros;
use crate::workload::{Request, RequestId, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Completion(GpuId),
    Arrival(RequestId),
}

impl EventKind {
    fn priority(self) -> u8 {
        match self {
            EventKind::Completion(_) => 0,
            EventKind::Arrival(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: Micros,
    priority: u8,
    sequence: u64,
    kind: EventKind,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EventRecord {
    pub t_us: u64,
    pub event: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_id: Option<RequestId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gpu_id: Option<GpuId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub false_miss: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip_count: Option<u32>,
}

impl EventRecord {
    fn new(t: Micros, event: &'static str) -> Self {
        EventRecord {
            t_us: t.0,
            event,
            request_id: None,
            gpu_id: None,
            decision: None,
            hit: None,
            false_miss: None,
            skip_count: None,
        }
    }
}

/// Per-GPU cache contents after an event was handled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CacheSnapshot {
    pub t_us: u64,
    pub gpus: Vec<GpuSnapshot>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineOptions {
    pub record_events: bool,
    pub record_snapshots: bool,
    /// Re-check cluster invariants after every event.
    pub check_invariants: bool,
}

impl EngineOptions {
    pub fn recording() -> Self {
        EngineOptions {
            record_events: true,
            record_snapshots: true,
            check_invariants: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimRun {
    pub report: SimReport,
    pub requests: Vec<Request>,
    pub events: Vec<EventRecord>,
    pub snapshots: Vec<CacheSnapshot>,
}

impl SimRun {
    pub fn event_log_jsonl(&self) -> String {
        to_jsonl(&self.events)
    }

    pub fn snapshots_jsonl(&self) -> String {
        to_jsonl(&self.snapshots)
    }
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("log records serialize"));
        out.push('\n');
    }
    out
}

/// Runs `workload` to completion on a fresh cluster.
pub fn simulate<D: Dispatcher>(
    workload: &Workload,
    gpu_count: usize,
    capacity_mb: u64,
    dispatcher: &mut D,
    options: EngineOptions,
) -> Result<SimRun> {
    if gpu_count == 0 {
        return Err(Error::Config("gpu_count must be at least 1".into()));
    }
    let catalog = &workload.models;
    let mut used = vec![false; catalog.len()];
    for r in &workload.requests {
        *used.get_mut(r.model.index()).ok_or_else(|| {
            Error::Config(format!(
                "request {} names model {} outside the catalog",
                r.id, r.model.0
            ))
        })? = true;
    }
    for (p, _) in catalog.profiles().iter().zip(&used).filter(|(_, &u)| u) {
        if p.occupation_mb > capacity_mb {
            return Err(Error::ModelTooLarge {
                model_id: p.model_id.clone(),
                occupation_mb: p.occupation_mb,
                capacity_mb,
            });
        }
    }

    let mut requests = workload.requests.clone();
    if let Some((i, r)) = requests.iter().enumerate().find(|(i, r)| r.id != *i as u64) {
        return Err(Error::Config(format!(
            "request at position {i} has id {}; ids must be 0.. in arrival order",
            r.id
        )));
    }
    if requests.windows(2).any(|w| w[0].arrival > w[1].arrival) {
        return Err(Error::Config("requests are not sorted by arrival".into()));
    }

    let mut cluster = ClusterState::new(gpu_count, capacity_mb, catalog.len());
    let mut queue = GlobalQueue::new();
    let mut metrics = MetricsAccumulator::new(catalog, workload.top_model());
    let mut events = Vec::new();
    let mut snapshots = Vec::new();

    let mut heap = BinaryHeap::with_capacity(requests.len() + gpu_count);
    let mut sequence = 0u64;
    let mut push = |heap: &mut BinaryHeap<Reverse<Event>>, time: Micros, kind: EventKind| {
        heap.push(Reverse(Event {
            time,
            priority: kind.priority(),
            sequence,
            kind,
        }));
        sequence += 1;
    };
    for r in &requests {
        push(&mut heap, r.arrival, EventKind::Arrival(r.id));
    }

    let mut now = Micros::ZERO;
    while let Some(Reverse(event)) = heap.pop() {
        if event.time < now {
            return Err(Error::Invariant(format!(
                "time moved backwards from {now} to {}",
                event.time
            )));
        }
        now = event.time;

        match event.kind {
            EventKind::Arrival(id) => {
                let r = &requests[id as usize];
                queue.enqueue(QueuedRequest {
                    id,
                    model: r.model,
                    skip_count: 0,
                });
                if options.record_events {
                    let mut rec = EventRecord::new(now, "arrival");
                    rec.request_id = Some(id);
                    events.push(rec);
                }
            }
            EventKind::Completion(gpu) => {
                let done = cluster
                    .complete(gpu, now)
                    .map_err(|e| diagnose(e, now, &cluster, catalog))?;
                requests[done.request.id as usize].completed_at = Some(now);
                if options.record_events {
                    let mut rec = EventRecord::new(now, "completion");
                    rec.request_id = Some(done.request.id);
                    rec.gpu_id = Some(gpu);
                    events.push(rec);
                }
            }
        }

        let decisions = dispatcher
            .on_scheduling_point(&mut queue, &mut cluster, catalog, now)
            .map_err(|e| diagnose(e, now, &cluster, catalog))?;
        for d in &decisions {
            metrics.record_dispatch(d);
            let r = &mut requests[d.request as usize];
            r.skip_count = d.skip_count;
            r.gpu = Some(d.gpu);
            if d.kind.is_dispatch() {
                let completion = d.completion.ok_or_else(|| {
                    Error::Invariant(format!("dispatch of {} has no completion time", d.request))
                })?;
                r.dispatched_at = Some(now);
                r.hit = Some(d.kind == DecisionKind::DispatchHitIdle);
                r.false_miss = d.false_miss;
                push(&mut heap, completion, EventKind::Completion(d.gpu));
            }
            if options.record_events {
                let mut rec = EventRecord::new(now, "decision");
                rec.request_id = Some(d.request);
                rec.gpu_id = Some(d.gpu);
                rec.decision = Some(d.kind);
                if d.kind.is_dispatch() {
                    rec.hit = Some(d.kind == DecisionKind::DispatchHitIdle);
                    rec.false_miss = Some(d.false_miss);
                }
                rec.skip_count = Some(d.skip_count);
                events.push(rec);
            }
        }

        metrics.observe_cluster(now, &cluster);
        if options.check_invariants {
            cluster
                .check_invariants()
                .map_err(|e| diagnose(e, now, &cluster, catalog))?;
        }
        if options.record_snapshots {
            snapshots.push(CacheSnapshot {
                t_us: now.0,
                gpus: cluster.snapshot(catalog),
            });
        }
    }

    if !queue.is_empty() || cluster.gpus().iter().any(|g| g.local_queue().len() > 0) {
        return Err(diagnose(
            Error::Invariant("event queue drained with requests still waiting".into()),
            now,
            &cluster,
            catalog,
        ));
    }
    if let Some(r) = requests.iter().find(|r| r.completed_at.is_none()) {
        return Err(Error::Invariant(format!(
            "request {} never completed",
            r.id
        )));
    }

    let report = metrics.finalize(&requests, &cluster, catalog, now);
    Ok(SimRun {
        report,
        requests,
        events,
        snapshots,
    })
}

fn diagnose(e: Error, now: Micros, cluster: &ClusterState, catalog: &crate::Catalog) -> Error {
    if !e.is_internal() {
        return e;
    }
    let dump = serde_json::to_string(&cluster.snapshot(catalog)).unwrap_or_default();
    Error::Invariant(format!("{e} at t={now}; cluster state: {dump}"))
}

/// Loads inputs, synthesizes the workload and simulates it.
pub fn run(config: &SimConfig, options: EngineOptions) -> Result<SimRun> {
    let inputs = config.load_inputs()?;
    run_with_inputs(&inputs, config, options)
}

pub fn run_with_inputs(
    inputs: &Inputs,
    config: &SimConfig,
    options: EngineOptions,
) -> Result<SimRun> {
    let workload = inputs.workload(config)?;
    let mut scheduler = config.scheduler;
    simulate(
        &workload,
        config.gpu_count,
        config.capacity_mb,
        &mut scheduler,
        options,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    O3Limit,
    WorkingSetSize,
    GpuCount,
    Scheduler,
}

impl SweepAxis {
    /// A copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &SimConfig, value: &str) -> Result<SimConfig> {
        let bad = || Error::Config(format!("invalid value `{value}` for sweep axis {self}"));
        let mut cfg = base.clone();
        match self {
            SweepAxis::O3Limit => cfg.scheduler.o3_limit = value.parse().map_err(|_| bad())?,
            SweepAxis::WorkingSetSize => {
                cfg.workload.working_set_size = value.parse().map_err(|_| bad())?;
            }
            SweepAxis::GpuCount => cfg.gpu_count = value.parse().map_err(|_| bad())?,
            SweepAxis::Scheduler => cfg.scheduler.policy = value.parse::<Policy>()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::O3Limit => "o3_limit",
            SweepAxis::WorkingSetSize => "working_set_size",
            SweepAxis::GpuCount => "gpu_count",
            SweepAxis::Scheduler => "scheduler",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "o3_limit" => Ok(SweepAxis::O3Limit),
            "working_set_size" | "working_set" => Ok(SweepAxis::WorkingSetSize),
            "gpu_count" | "gpus" => Ok(SweepAxis::GpuCount),
            "scheduler" => Ok(SweepAxis::Scheduler),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected o3_limit, working_set_size, gpu_count or scheduler)"
            ))),
        }
    }
}

/// Runs `configs` on up to `jobs` threads against shared inputs. Results
/// come back in input order.
pub fn run_many(
    inputs: &Inputs,
    configs: &[SimConfig],
    jobs: usize,
    options: EngineOptions,
) -> Result<Vec<SimRun>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        configs
            .par_iter()
            .map(|cfg| run_with_inputs(inputs, cfg, options))
            .collect()
    })
}

/// One run per value along `axis`, all with the base seed.
pub fn run_sweep(
    base: &SimConfig,
    axis: SweepAxis,
    values: &[String],
    jobs: usize,
) -> Result<Vec<(SimConfig, SimReport)>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let inputs = base.load_inputs()?;
    let runs = run_many(&inputs, &configs, jobs, EngineOptions::default())?;
    Ok(configs
        .into_iter()
        .zip(runs.into_iter().map(|r| r.report))
        .collect())
}
