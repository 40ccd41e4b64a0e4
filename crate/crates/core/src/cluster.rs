//! GPU state, per-GPU model caches and execution.
//!
//! Every GPU serves one request at a time. A model stays resident after use
//! and is only evicted, least recently used first, when a miss needs the
//! space. Models referenced by the running request or by anything waiting in
//! the GPU's local queue are pinned.

use std::collections::{BTreeSet, VecDeque};

use serde::Serialize;

use crate::catalog::{Catalog, ModelId};
use crate::error::{Error, Result};
use crate::time::Micros;
use crate::workload::RequestId;

pub type GpuId = usize;

/// Default per-GPU memory: a GeForce RTX 2080.
pub const DEFAULT_CAPACITY_MB: u64 = 8192;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CachedModel {
    pub model: ModelId,
    pub occupation_mb: u64,
    pub last_used: Micros,
}

/// A request waiting in a queue, global or local.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QueuedRequest {
    pub id: RequestId,
    pub model: ModelId,
    pub skip_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Running {
    pub request: QueuedRequest,
    pub started: Micros,
    pub hit: bool,
}

#[derive(Debug, Clone)]
pub struct GpuState {
    pub id: GpuId,
    pub capacity_mb: u64,
    /// Most recently used first.
    cached: VecDeque<CachedModel>,
    local_queue: VecDeque<QueuedRequest>,
    busy_until: Option<Micros>,
    running: Option<Running>,
    busy_total: Micros,
    infer_total: Micros,
}

impl GpuState {
    pub fn new(id: GpuId, capacity_mb: u64) -> Self {
        GpuState {
            id,
            capacity_mb,
            cached: VecDeque::new(),
            local_queue: VecDeque::new(),
            busy_until: None,
            running: None,
            busy_total: Micros::ZERO,
            infer_total: Micros::ZERO,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.running.is_none()
    }

    pub fn busy_until(&self) -> Option<Micros> {
        self.busy_until
    }

    pub fn running(&self) -> Option<&Running> {
        self.running.as_ref()
    }

    pub fn cached(&self) -> impl ExactSizeIterator<Item = &CachedModel> + DoubleEndedIterator {
        self.cached.iter()
    }

    pub fn local_queue(&self) -> impl ExactSizeIterator<Item = &QueuedRequest> {
        self.local_queue.iter()
    }

    pub fn used_mb(&self) -> u64 {
        self.cached.iter().map(|c| c.occupation_mb).sum()
    }

    pub fn free_mb(&self) -> u64 {
        self.capacity_mb - self.used_mb()
    }

    pub fn is_cached(&self, model: ModelId) -> bool {
        self.position(model).is_some()
    }

    pub fn last_used(&self, model: ModelId) -> Option<Micros> {
        self.position(model).map(|i| self.cached[i].last_used)
    }

    /// Total time spent loading and inferring.
    pub fn busy_total(&self) -> Micros {
        self.busy_total
    }

    pub fn infer_total(&self) -> Micros {
        self.infer_total
    }

    fn position(&self, model: ModelId) -> Option<usize> {
        self.cached.iter().position(|c| c.model == model)
    }

    fn is_pinned(&self, model: ModelId) -> bool {
        self.running
            .as_ref()
            .is_some_and(|r| r.request.model == model)
            || self.local_queue.iter().any(|q| q.model == model)
    }

    /// Least-recently-used models to evict so `incoming_mb` fits. Pinned
    /// models are passed over; order is never rearranged to pack tighter.
    pub fn select_victims(&self, incoming_mb: u64) -> Result<Vec<ModelId>> {
        if incoming_mb > self.capacity_mb {
            return Err(Error::ModelTooLarge {
                model_id: String::from("<incoming>"),
                occupation_mb: incoming_mb,
                capacity_mb: self.capacity_mb,
            });
        }
        let mut free = self.free_mb();
        let mut victims = Vec::new();
        for entry in self.cached.iter().rev() {
            if free >= incoming_mb {
                break;
            }
            if self.is_pinned(entry.model) {
                continue;
            }
            free += entry.occupation_mb;
            victims.push(entry.model);
        }
        if free < incoming_mb {
            return Err(Error::InsufficientSpace {
                gpu: self.id,
                model_id: String::from("<incoming>"),
                free_mb: free,
                needed_mb: incoming_mb,
            });
        }
        Ok(victims)
    }

    /// Remaining time on the current request plus the inference time of
    /// everything already waiting in the local queue.
    pub fn estimate_finish_time(&self, now: Micros, catalog: &Catalog) -> Result<Micros> {
        let until = self.busy_until.ok_or(Error::GpuIdle(self.id))?;
        let queued: Micros = self
            .local_queue
            .iter()
            .map(|q| catalog.get(q.model).infer_time)
            .sum();
        Ok(until.saturating_sub(now) + queued)
    }
}

/// What `begin_execution` did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub gpu: GpuId,
    pub request: QueuedRequest,
    pub hit: bool,
    /// Miss while the model was resident on some other GPU.
    pub false_miss: bool,
    pub evicted: Vec<ModelId>,
    pub completion: Micros,
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    gpus: Vec<GpuState>,
    model_locations: Vec<BTreeSet<GpuId>>,
    access_counts: Vec<u64>,
    evictions: u64,
}

impl ClusterState {
    pub fn new(gpu_count: usize, capacity_mb: u64, model_count: usize) -> Self {
        ClusterState {
            gpus: (0..gpu_count)
                .map(|i| GpuState::new(i, capacity_mb))
                .collect(),
            model_locations: vec![BTreeSet::new(); model_count],
            access_counts: vec![0; model_count],
            evictions: 0,
        }
    }

    pub fn gpus(&self) -> &[GpuState] {
        &self.gpus
    }

    pub fn gpu(&self, id: GpuId) -> &GpuState {
        &self.gpus[id]
    }

    pub fn is_cached(&self, gpu: GpuId, model: ModelId) -> bool {
        self.gpus[gpu].is_cached(model)
    }

    /// GPUs currently holding `model`, ascending.
    pub fn locations(&self, model: ModelId) -> &BTreeSet<GpuId> {
        &self.model_locations[model.index()]
    }

    /// Number of executions that have used `model` so far.
    pub fn access_count(&self, model: ModelId) -> u64 {
        self.access_counts[model.index()]
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn idle_gpus(&self) -> impl Iterator<Item = GpuId> + '_ {
        self.gpus.iter().filter(|g| g.is_idle()).map(|g| g.id)
    }

    pub fn evict(&mut self, gpu: GpuId, victims: &[ModelId], catalog: &Catalog) -> Result<()> {
        for &v in victims {
            let g = &mut self.gpus[gpu];
            let pos = g.position(v).ok_or_else(|| Error::NotCached {
                gpu,
                model_id: catalog.name(v).to_string(),
            })?;
            g.cached.remove(pos);
            self.model_locations[v.index()].remove(&gpu);
            self.evictions += 1;
        }
        Ok(())
    }

    pub fn insert_model(
        &mut self,
        gpu: GpuId,
        model: ModelId,
        catalog: &Catalog,
        now: Micros,
    ) -> Result<()> {
        let profile = catalog.get(model);
        let g = &mut self.gpus[gpu];
        if g.is_cached(model) {
            return Err(Error::Invariant(format!(
                "`{}` inserted twice on GPU {gpu}",
                profile.model_id
            )));
        }
        if g.free_mb() < profile.occupation_mb {
            return Err(Error::InsufficientSpace {
                gpu,
                model_id: profile.model_id.clone(),
                free_mb: g.free_mb(),
                needed_mb: profile.occupation_mb,
            });
        }
        g.cached.push_front(CachedModel {
            model,
            occupation_mb: profile.occupation_mb,
            last_used: now,
        });
        self.model_locations[model.index()].insert(gpu);
        Ok(())
    }

    pub fn touch(
        &mut self,
        gpu: GpuId,
        model: ModelId,
        catalog: &Catalog,
        now: Micros,
    ) -> Result<()> {
        let g = &mut self.gpus[gpu];
        let pos = g.position(model).ok_or_else(|| Error::NotCached {
            gpu,
            model_id: catalog.name(model).to_string(),
        })?;
        let mut entry = g.cached.remove(pos).expect("position is in range");
        entry.last_used = now;
        g.cached.push_front(entry);
        Ok(())
    }

    /// Starts `request` on an idle GPU, loading its model first on a miss.
    pub fn begin_execution(
        &mut self,
        gpu: GpuId,
        request: QueuedRequest,
        now: Micros,
        catalog: &Catalog,
    ) -> Result<Execution> {
        if !self.gpus[gpu].is_idle() {
            return Err(Error::GpuBusy(gpu));
        }
        let profile = catalog.get(request.model);
        if profile.occupation_mb > self.gpus[gpu].capacity_mb {
            return Err(Error::ModelTooLarge {
                model_id: profile.model_id.clone(),
                occupation_mb: profile.occupation_mb,
                capacity_mb: self.gpus[gpu].capacity_mb,
            });
        }

        let hit = self.gpus[gpu].is_cached(request.model);
        let mut false_miss = false;
        let mut evicted = Vec::new();
        let mut duration = profile.infer_time;
        if hit {
            self.touch(gpu, request.model, catalog, now)?;
        } else {
            false_miss = !self.model_locations[request.model.index()].is_empty();
            evicted = self.gpus[gpu]
                .select_victims(profile.occupation_mb)
                .map_err(|e| name_incoming(e, &profile.model_id))?;
            self.evict(gpu, &evicted, catalog)?;
            self.insert_model(gpu, request.model, catalog, now)?;
            duration += profile.load_time;
        }

        let completion = now + duration;
        let g = &mut self.gpus[gpu];
        g.busy_until = Some(completion);
        g.running = Some(Running {
            request,
            started: now,
            hit,
        });
        g.busy_total += duration;
        g.infer_total += profile.infer_time;
        self.access_counts[request.model.index()] += 1;

        Ok(Execution {
            gpu,
            request,
            hit,
            false_miss,
            evicted,
            completion,
        })
    }

    /// Marks the GPU idle. Must be called exactly at its `busy_until`.
    pub fn complete(&mut self, gpu: GpuId, now: Micros) -> Result<Running> {
        let g = &mut self.gpus[gpu];
        match g.busy_until {
            None => Err(Error::GpuIdle(gpu)),
            Some(t) if t != now => Err(Error::Invariant(format!(
                "GPU {gpu} completion fired at {now} but it is busy until {t}"
            ))),
            Some(_) => {
                g.busy_until = None;
                Ok(g.running
                    .take()
                    .expect("running is set whenever busy_until is"))
            }
        }
    }

    /// Commits `request` to a busy GPU that already holds its model.
    pub fn enqueue_local(
        &mut self,
        gpu: GpuId,
        request: QueuedRequest,
        catalog: &Catalog,
    ) -> Result<()> {
        let g = &mut self.gpus[gpu];
        if g.is_idle() {
            return Err(Error::GpuIdle(gpu));
        }
        if !g.is_cached(request.model) {
            return Err(Error::NotCached {
                gpu,
                model_id: catalog.name(request.model).to_string(),
            });
        }
        g.local_queue.push_back(request);
        Ok(())
    }

    pub fn pop_local(&mut self, gpu: GpuId) -> Option<QueuedRequest> {
        self.gpus[gpu].local_queue.pop_front()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut expected = vec![BTreeSet::new(); self.model_locations.len()];
        for g in &self.gpus {
            let used = g.used_mb();
            if used > g.capacity_mb {
                return Err(Error::Invariant(format!(
                    "GPU {} holds {used} MB of {} MB",
                    g.id, g.capacity_mb
                )));
            }
            if g.running.is_some() != g.busy_until.is_some() {
                return Err(Error::Invariant(format!(
                    "GPU {} running/busy_until disagree",
                    g.id
                )));
            }
            for c in &g.cached {
                if !expected[c.model.index()].insert(g.id) {
                    return Err(Error::Invariant(format!(
                        "model {} cached twice on GPU {}",
                        c.model.0, g.id
                    )));
                }
            }
            if let Some(r) = &g.running {
                if !g.is_cached(r.request.model) {
                    return Err(Error::Invariant(format!(
                        "GPU {} runs request {} without its model resident",
                        g.id, r.request.id
                    )));
                }
            }
            if let Some(q) = g.local_queue.iter().find(|q| !g.is_cached(q.model)) {
                return Err(Error::Invariant(format!(
                    "GPU {} local queue holds request {} whose model is not resident",
                    g.id, q.id
                )));
            }
        }
        if expected != self.model_locations {
            return Err(Error::Invariant("model location index out of sync".into()));
        }
        Ok(())
    }

    pub fn snapshot(&self, catalog: &Catalog) -> Vec<GpuSnapshot> {
        self.gpus
            .iter()
            .map(|g| GpuSnapshot {
                gpu: g.id,
                busy_until_us: g.busy_until.map(|t| t.0),
                running: g.running.as_ref().map(|r| r.request.id),
                cached: g
                    .cached
                    .iter()
                    .map(|c| catalog.name(c.model).to_string())
                    .collect(),
                local_queue: g.local_queue.iter().map(|q| q.id).collect(),
            })
            .collect()
    }
}

fn name_incoming(e: Error, name: &str) -> Error {
    match e {
        Error::ModelTooLarge {
            occupation_mb,
            capacity_mb,
            ..
        } => Error::ModelTooLarge {
            model_id: name.to_string(),
            occupation_mb,
            capacity_mb,
        },
        Error::InsufficientSpace {
            gpu,
            free_mb,
            needed_mb,
            ..
        } => Error::InsufficientSpace {
            gpu,
            model_id: name.to_string(),
            free_mb,
            needed_mb,
        },
        other => other,
    }
}

/// Cache contents of one GPU, MRU first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GpuSnapshot {
    pub gpu: GpuId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub busy_until_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub running: Option<RequestId>,
    pub cached: Vec<String>,
    pub local_queue: Vec<RequestId>,
}
