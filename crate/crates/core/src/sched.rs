//! Scheduling policies.
//!
//! * **LB** hands the head of the global queue to whichever GPU is idle.
//! * **LALB** prefers an idle GPU that already holds the request's model,
//!   then a busy one whose backlog clears sooner than a cold load would
//!   take, and only then accepts a miss.
//! * **LALBO3** is LALB that may promote a later request past earlier ones
//!   when it would hit on the idle GPU, as long as no request is passed over
//!   more than `o3_limit` times.
//!
//! The scheduler runs at every arrival and completion. It mutates the global
//! queue and the cluster directly and reports what it did as [`Decision`]s.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ModelId};
use crate::cluster::{ClusterState, GpuId, QueuedRequest};
use crate::error::{Error, Result};
use crate::time::Micros;
use crate::workload::RequestId;

pub const DEFAULT_O3_LIMIT: u32 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Lb,
    Lalb,
    Lalbo3,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Lb, Policy::Lalb, Policy::Lalbo3];
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Lb => "lb",
            Policy::Lalb => "lalb",
            Policy::Lalbo3 => "lalbo3",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lb" => Ok(Policy::Lb),
            "lalb" => Ok(Policy::Lalb),
            "lalbo3" => Ok(Policy::Lalbo3),
            other => Err(Error::Config(format!(
                "unknown scheduler `{other}` (expected lb, lalb or lalbo3)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub policy: Policy,
    pub o3_limit: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            policy: Policy::Lalbo3,
            o3_limit: DEFAULT_O3_LIMIT,
        }
    }
}

impl SchedulerConfig {
    pub fn new(policy: Policy, o3_limit: u32) -> Self {
        SchedulerConfig { policy, o3_limit }
    }

    /// The skip limit actually in force; only LALBO3 reorders.
    pub fn effective_limit(&self) -> u32 {
        match self.policy {
            Policy::Lalbo3 => self.o3_limit,
            Policy::Lb | Policy::Lalb => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    DispatchHitIdle,
    DispatchMissIdle,
    EnqueueLocalBusy,
    NoAction,
}

impl DecisionKind {
    pub fn is_dispatch(self) -> bool {
        matches!(
            self,
            DecisionKind::DispatchHitIdle | DecisionKind::DispatchMissIdle
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Decision {
    pub kind: DecisionKind,
    pub request: RequestId,
    pub model: ModelId,
    pub gpu: GpuId,
    pub false_miss: bool,
    pub skip_count: u32,
    /// Dispatched from the GPU's local queue rather than the global queue.
    pub from_local: bool,
    /// Set for dispatches.
    pub completion: Option<Micros>,
    pub evicted: Vec<ModelId>,
}

/// Arrival-ordered pending requests, indexed by model.
///
/// Request ids are assigned in arrival order, so id order is arrival order.
#[derive(Debug, Clone, Default)]
pub struct GlobalQueue {
    entries: BTreeMap<RequestId, QueuedRequest>,
    by_model: BTreeMap<ModelId, BTreeSet<RequestId>>,
}

impl GlobalQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, request: QueuedRequest) {
        self.by_model
            .entry(request.model)
            .or_default()
            .insert(request.id);
        self.entries.insert(request.id, request);
    }

    pub fn remove(&mut self, id: RequestId) -> Result<QueuedRequest> {
        let q = self.entries.remove(&id).ok_or(Error::UnknownRequest(id))?;
        let ids = self
            .by_model
            .get_mut(&q.model)
            .expect("model index tracks entries");
        ids.remove(&id);
        if ids.is_empty() {
            self.by_model.remove(&q.model);
        }
        Ok(q)
    }

    pub fn get(&self, id: RequestId) -> Option<&QueuedRequest> {
        self.entries.get(&id)
    }

    pub fn head(&self) -> Option<&QueuedRequest> {
        self.entries.values().next()
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueuedRequest> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Queued requests for `model`, in arrival order.
    pub fn for_model(&self, model: ModelId) -> impl Iterator<Item = RequestId> + '_ {
        self.by_model.get(&model).into_iter().flatten().copied()
    }

    fn ids(&self) -> Vec<RequestId> {
        self.entries.keys().copied().collect()
    }

    fn bump_skip(&mut self, id: RequestId) {
        if let Some(q) = self.entries.get_mut(&id) {
            q.skip_count += 1;
        }
    }
}

/// Pluggable decision procedure, so tests can interpose on the scheduler.
pub trait Dispatcher {
    fn on_scheduling_point(
        &mut self,
        queue: &mut GlobalQueue,
        cluster: &mut ClusterState,
        catalog: &Catalog,
        now: Micros,
    ) -> Result<Vec<Decision>>;
}

impl Dispatcher for SchedulerConfig {
    fn on_scheduling_point(
        &mut self,
        queue: &mut GlobalQueue,
        cluster: &mut ClusterState,
        catalog: &Catalog,
        now: Micros,
    ) -> Result<Vec<Decision>> {
        on_scheduling_point(queue, cluster, catalog, self, now)
    }
}

struct Ctx<'a> {
    queue: &'a mut GlobalQueue,
    cluster: &'a mut ClusterState,
    catalog: &'a Catalog,
    now: Micros,
    decisions: Vec<Decision>,
}

impl Ctx<'_> {
    fn dispatch(&mut self, gpu: GpuId, request: QueuedRequest, from_local: bool) -> Result<()> {
        let exec = self
            .cluster
            .begin_execution(gpu, request, self.now, self.catalog)?;
        if from_local && !exec.hit {
            return Err(Error::Invariant(format!(
                "local-queue request {} missed on GPU {gpu}",
                request.id
            )));
        }
        self.decisions.push(Decision {
            kind: if exec.hit {
                DecisionKind::DispatchHitIdle
            } else {
                DecisionKind::DispatchMissIdle
            },
            request: request.id,
            model: request.model,
            gpu,
            false_miss: exec.false_miss,
            skip_count: request.skip_count,
            from_local,
            completion: Some(exec.completion),
            evicted: exec.evicted,
        });
        Ok(())
    }

    fn dispatch_queued(&mut self, gpu: GpuId, id: RequestId) -> Result<()> {
        let request = self.queue.remove(id)?;
        self.dispatch(gpu, request, false)
    }

    fn enqueue_local(&mut self, gpu: GpuId, id: RequestId) -> Result<()> {
        let request = self.queue.remove(id)?;
        self.cluster.enqueue_local(gpu, request, self.catalog)?;
        self.decisions.push(Decision {
            kind: DecisionKind::EnqueueLocalBusy,
            request: request.id,
            model: request.model,
            gpu,
            false_miss: false,
            skip_count: request.skip_count,
            from_local: false,
            completion: None,
            evicted: Vec::new(),
        });
        Ok(())
    }
}

/// Runs the active policy for every idle GPU and returns what was done.
pub fn on_scheduling_point(
    queue: &mut GlobalQueue,
    cluster: &mut ClusterState,
    catalog: &Catalog,
    config: &SchedulerConfig,
    now: Micros,
) -> Result<Vec<Decision>> {
    let mut ctx = Ctx {
        queue,
        cluster,
        catalog,
        now,
        decisions: Vec::new(),
    };
    match config.policy {
        Policy::Lb => {
            let idle: Vec<GpuId> = ctx.cluster.idle_gpus().collect();
            for gpu in idle {
                if ctx.queue.is_empty() {
                    break;
                }
                lb_step(&mut ctx, gpu)?;
            }
        }
        Policy::Lalb | Policy::Lalbo3 => {
            let limit = config.effective_limit();
            for gpu in idle_order(ctx.cluster) {
                // earlier GPUs may have routed work here
                if ctx.cluster.gpu(gpu).is_idle() {
                    lalb_step(&mut ctx, gpu, limit)?;
                }
            }
        }
    }
    Ok(ctx.decisions)
}

/// Idle GPUs with the hottest caches first: descending sum of access
/// counts over resident models, then ascending id.
pub fn idle_order(cluster: &ClusterState) -> Vec<GpuId> {
    let mut idle: Vec<(u64, GpuId)> = cluster
        .idle_gpus()
        .map(|g| {
            let heat = cluster
                .gpu(g)
                .cached()
                .map(|c| cluster.access_count(c.model))
                .sum();
            (heat, g)
        })
        .collect();
    idle.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    idle.into_iter().map(|(_, g)| g).collect()
}

/// Baseline: the head of the global queue goes to `gpu`, cached or not.
pub fn schedule_idle_gpu_lb(
    queue: &mut GlobalQueue,
    cluster: &mut ClusterState,
    catalog: &Catalog,
    gpu: GpuId,
    now: Micros,
) -> Result<Decision> {
    let mut ctx = Ctx {
        queue,
        cluster,
        catalog,
        now,
        decisions: Vec::new(),
    };
    lb_step(&mut ctx, gpu)?;
    Ok(ctx.decisions.pop().unwrap_or(Decision {
        kind: DecisionKind::NoAction,
        request: 0,
        model: ModelId(0),
        gpu,
        false_miss: false,
        skip_count: 0,
        from_local: false,
        completion: None,
        evicted: Vec::new(),
    }))
}

fn lb_step(ctx: &mut Ctx<'_>, gpu: GpuId) -> Result<()> {
    if let Some(head) = ctx.queue.head().map(|q| q.id) {
        ctx.dispatch_queued(gpu, head)?;
    }
    Ok(())
}

/// One LALB pass for an idle GPU. Returns every decision taken, including
/// requests routed to other GPUs along the way.
pub fn schedule_idle_gpu_lalb(
    queue: &mut GlobalQueue,
    cluster: &mut ClusterState,
    catalog: &Catalog,
    gpu: GpuId,
    config: &SchedulerConfig,
    now: Micros,
) -> Result<Vec<Decision>> {
    let mut ctx = Ctx {
        queue,
        cluster,
        catalog,
        now,
        decisions: Vec::new(),
    };
    lalb_step(&mut ctx, gpu, config.effective_limit())?;
    Ok(ctx.decisions)
}

fn lalb_step(ctx: &mut Ctx<'_>, gpu: GpuId, limit: u32) -> Result<()> {
    if let Some(local) = ctx.cluster.pop_local(gpu) {
        return ctx.dispatch(gpu, local, true);
    }

    // Look for a queued request that hits here. Requests that have already
    // been passed over `limit` times are placed before the scan moves on.
    let mut passed_over = Vec::new();
    for id in ctx.queue.ids() {
        let Some(&request) = ctx.queue.get(id) else {
            continue;
        };
        if ctx.cluster.is_cached(gpu, request.model) {
            ctx.dispatch_queued(gpu, id)?;
            for p in passed_over {
                ctx.queue.bump_skip(p);
            }
            return Ok(());
        }
        if request.skip_count >= limit {
            if balance(ctx, gpu, id)? {
                return Ok(());
            }
        } else {
            passed_over.push(id);
        }
    }

    // Nothing hits here: place requests in order until one lands on `gpu`.
    for id in ctx.queue.ids() {
        if balance(ctx, gpu, id)? {
            break;
        }
    }
    Ok(())
}

/// Places one queued request for the idle GPU `gpu`. Returns true when the
/// request was dispatched to `gpu` itself.
pub fn locality_load_balance(
    queue: &mut GlobalQueue,
    cluster: &mut ClusterState,
    catalog: &Catalog,
    gpu: GpuId,
    request: RequestId,
    now: Micros,
) -> Result<(bool, Vec<Decision>)> {
    let mut ctx = Ctx {
        queue,
        cluster,
        catalog,
        now,
        decisions: Vec::new(),
    };
    let here = balance(&mut ctx, gpu, request)?;
    Ok((here, ctx.decisions))
}

fn balance(ctx: &mut Ctx<'_>, gpu: GpuId, id: RequestId) -> Result<bool> {
    let request = *ctx.queue.get(id).ok_or(Error::UnknownRequest(id))?;
    let holders = ctx.cluster.locations(request.model);

    if holders.contains(&gpu) {
        ctx.dispatch_queued(gpu, id)?;
        return Ok(true);
    }
    if holders.is_empty() {
        ctx.dispatch_queued(gpu, id)?;
        return Ok(true);
    }

    // Another idle GPU has it: use the most recently touched copy.
    let idle_holder = holders
        .iter()
        .copied()
        .filter(|&g| ctx.cluster.gpu(g).is_idle())
        .max_by(|&a, &b| {
            let la = ctx.cluster.gpu(a).last_used(request.model);
            let lb = ctx.cluster.gpu(b).last_used(request.model);
            la.cmp(&lb).then(b.cmp(&a))
        });
    if let Some(other) = idle_holder {
        ctx.dispatch_queued(other, id)?;
        return Ok(false);
    }

    // Only busy GPUs have it: wait for the soonest one if that beats a load.
    let load_time = ctx.catalog.get(request.model).load_time;
    let mut busy: Vec<(Micros, GpuId)> = holders
        .iter()
        .map(|&g| {
            ctx.cluster
                .gpu(g)
                .estimate_finish_time(ctx.now, ctx.catalog)
                .map(|t| (t, g))
        })
        .collect::<Result<_>>()?;
    busy.sort();
    for (finish, other) in busy {
        if finish < load_time {
            ctx.enqueue_local(other, id)?;
            return Ok(false);
        }
    }

    ctx.dispatch_queued(gpu, id)?;
    Ok(true)
}
