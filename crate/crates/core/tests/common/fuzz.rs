//! Random cluster operation sequences and the properties checked on them.

use std::collections::BTreeSet;

use gpusched::cluster::QueuedRequest;
use gpusched::{Catalog, ClusterState, Error, Micros, ModelId};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use super::{cache_lists, RefLru};

#[derive(Debug, Clone)]
pub enum Op {
    /// Run a request for `model` on `gpu` if it is idle.
    Start { gpu: usize, model: usize },
    /// Finish `gpu`'s request, then start its local-queue head if any.
    Finish { gpu: usize },
    /// Queue a request behind `gpu`'s current one.
    Enqueue { gpu: usize, model: usize },
}

pub const GPUS: usize = 3;

pub fn ops(models: usize, len: usize) -> impl Strategy<Value = Vec<Op>> {
    let op = prop_oneof![
        4 => (0..GPUS, 0..models).prop_map(|(gpu, model)| Op::Start { gpu, model }),
        3 => (0..GPUS).prop_map(|gpu| Op::Finish { gpu }),
        2 => (0..GPUS, 0..models).prop_map(|(gpu, model)| Op::Enqueue { gpu, model }),
    ];
    prop::collection::vec(op, 1..=len)
}

/// Capacities between the largest catalog model and about three models.
pub fn capacity() -> impl Strategy<Value = u64> {
    3947u64..12_000
}

fn locations_mirror_caches(cluster: &ClusterState, models: usize) -> Result<(), TestCaseError> {
    for m in 0..models {
        let expected: BTreeSet<usize> = (0..cluster.gpus().len())
            .filter(|&g| cluster.gpu(g).cached().any(|c| c.model.index() == m))
            .collect();
        prop_assert_eq!(cluster.locations(ModelId(m as u32)), &expected);
    }
    Ok(())
}

/// Applies `ops` and checks capacity, index and execution invariants after
/// every step.
pub fn check_capacity(catalog: &Catalog, capacity: u64, ops: &[Op]) -> Result<(), TestCaseError> {
    let mut cluster = ClusterState::new(GPUS, capacity, catalog.len());
    let mut now = Micros::ZERO;
    let mut next_id = 0u64;
    let mut request = |model: usize| {
        next_id += 1;
        QueuedRequest {
            id: next_id,
            model: ModelId(model as u32),
            skip_count: 0,
        }
    };

    for op in ops {
        now += Micros(10_000);
        match *op {
            Op::Start { gpu, model } => {
                let idle = cluster.gpu(gpu).is_idle();
                let r = cluster.begin_execution(gpu, request(model), now, catalog);
                if idle {
                    let exec = r.map_err(|e| TestCaseError::fail(e.to_string()))?;
                    prop_assert_eq!(exec.completion > now, true);
                } else {
                    prop_assert!(matches!(r, Err(Error::GpuBusy(g)) if g == gpu));
                }
            }
            Op::Finish { gpu } => {
                let Some(until) = cluster.gpu(gpu).busy_until() else {
                    prop_assert!(cluster.complete(gpu, now).is_err());
                    continue;
                };
                now = now.max(until);
                if now > until {
                    prop_assert!(cluster.complete(gpu, now).is_err());
                    now = until;
                }
                cluster
                    .complete(gpu, now)
                    .map_err(|e| TestCaseError::fail(e.to_string()))?;
                if let Some(next) = cluster.pop_local(gpu) {
                    let exec = cluster
                        .begin_execution(gpu, next, now, catalog)
                        .map_err(|e| TestCaseError::fail(e.to_string()))?;
                    prop_assert!(exec.hit, "local-queue request missed");
                }
            }
            Op::Enqueue { gpu, model } => {
                let g = cluster.gpu(gpu);
                let allowed = !g.is_idle() && g.is_cached(ModelId(model as u32));
                let before = g.estimate_finish_time(now, catalog).ok();
                let r = cluster.enqueue_local(gpu, request(model), catalog);
                prop_assert_eq!(r.is_ok(), allowed);
                if allowed {
                    let after = cluster.gpu(gpu).estimate_finish_time(now, catalog).unwrap();
                    let infer = catalog.profiles()[model].infer_time;
                    prop_assert_eq!(after, before.unwrap() + infer);
                }
            }
        }

        for g in cluster.gpus() {
            prop_assert!(
                g.used_mb() <= capacity,
                "GPU {} holds {} of {} MB",
                g.id,
                g.used_mb(),
                capacity
            );
            prop_assert_eq!(g.is_idle(), g.running().is_none());
            for q in g.local_queue() {
                prop_assert!(g.is_cached(q.model), "local-queue model evicted");
            }
        }
        locations_mirror_caches(&cluster, catalog.len())?;
        cluster
            .check_invariants()
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
    }
    Ok(())
}

/// Runs back-to-back requests given as (gpu, model) and compares every
/// GPU's cache list and evictions with a reference LRU.
pub fn check_lru(
    catalog: &Catalog,
    capacity: u64,
    accesses: &[(usize, usize)],
) -> Result<(), TestCaseError> {
    let mut cluster = ClusterState::new(GPUS, capacity, catalog.len());
    let mut reference = vec![RefLru::new(capacity); GPUS];
    let mut now = Micros::ZERO;
    for (k, &(gpu, model)) in accesses.iter().enumerate() {
        let r = QueuedRequest {
            id: k as u64,
            model: ModelId(model as u32),
            skip_count: 0,
        };
        let exec = cluster
            .begin_execution(gpu, r, now, catalog)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        now = exec.completion;
        cluster
            .complete(gpu, now)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;

        let (hit, evicted) = reference[gpu].access(model, catalog.profiles()[model].occupation_mb);
        prop_assert_eq!(exec.hit, hit);
        let got: Vec<usize> = exec.evicted.iter().map(|m| m.index()).collect();
        prop_assert_eq!(got, evicted);
        let lists = cache_lists(&cluster);
        for g in 0..GPUS {
            prop_assert_eq!(
                &lists[g],
                &reference[g].models(),
                "GPU {} after access {}",
                g,
                k
            );
        }
    }
    Ok(())
}

pub fn accesses(models: usize, len: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..GPUS, 0..models), 1..=len)
}
