//! A dispatcher wrapper that checks per-scheduling-point invariants.

use std::collections::BTreeSet;

use gpusched::{
    Catalog, ClusterState, Decision, DecisionKind, Dispatcher, GlobalQueue, Micros, Policy, Result,
    SchedulerConfig,
};

use super::oracle::State;

pub struct Watch {
    pub config: SchedulerConfig,
    pub models: usize,
    pub violations: Vec<String>,
    /// Requests in the order they left the global queue.
    pub left_global: Vec<u64>,
}

impl Watch {
    pub fn new(config: SchedulerConfig, catalog: &Catalog) -> Self {
        Watch {
            config,
            models: catalog.len(),
            violations: Vec::new(),
            left_global: Vec::new(),
        }
    }

    fn limit(&self) -> u32 {
        match self.config.policy {
            Policy::Lalbo3 => self.config.o3_limit,
            _ => 0,
        }
    }
}

impl Dispatcher for Watch {
    fn on_scheduling_point(
        &mut self,
        queue: &mut GlobalQueue,
        cluster: &mut ClusterState,
        catalog: &Catalog,
        now: Micros,
    ) -> Result<Vec<Decision>> {
        let before = State::capture(queue, cluster, self.models, now);
        let decisions = self
            .config
            .on_scheduling_point(queue, cluster, catalog, now)?;
        let limit = self.limit();
        let policy = self.config.policy;
        let mut found = Vec::new();
        let mut fail = |msg: String| found.push(format!("t={now}: {msg}"));

        // idle GPUs left behind only when there is nothing left to place
        for g in cluster.gpus() {
            if g.is_idle() && (g.local_queue().len() > 0 || !queue.is_empty()) {
                fail(format!("GPU {} idle with work pending", g.id));
            }
        }

        if policy != Policy::Lb {
            // A request at the skip limit is placed before anything behind
            // it and may take the idle GPU as a miss. Each idle GPU's pass
            // bumps a skip count at most once, so only cached requests with
            // no predecessor able to reach the limit are owed a hit.
            let idle = before
                .gpus
                .iter()
                .filter(|g| g.busy_until.is_none())
                .count() as u32;
            let hit_possible = before.gpus.iter().any(|g| {
                g.busy_until.is_none()
                    && g.local.is_empty()
                    && before.queue.iter().enumerate().any(|(k, r)| {
                        g.cache.iter().any(|s| s.model == r.model)
                            && before.queue[..k].iter().all(|a| a.skip + idle < limit)
                    })
            });
            let hit_made = decisions
                .iter()
                .any(|d| d.kind == DecisionKind::DispatchHitIdle);
            if hit_possible && !hit_made {
                fail(
                    "an idle GPU could serve a queued request from cache but no hit was dispatched"
                        .into(),
                );
            }
        }

        let at_limit: BTreeSet<u64> = before
            .queue
            .iter()
            .filter(|r| r.skip >= limit)
            .map(|r| r.id)
            .collect();
        let mut gone = BTreeSet::new();
        let mut left = Vec::new();
        for d in decisions.iter().filter(|d| !d.from_local) {
            if let Some(&r) = at_limit
                .iter()
                .find(|&&r| r < d.request && !gone.contains(&r))
            {
                fail(format!(
                    "request {} left the queue ahead of {r}, which was at the limit",
                    d.request
                ));
            }
            gone.insert(d.request);
            left.push(d.request);
            if d.skip_count > limit && policy == Policy::Lalbo3 {
                fail(format!(
                    "request {} skipped {} times",
                    d.request, d.skip_count
                ));
            }
        }

        for d in &decisions {
            match d.kind {
                DecisionKind::EnqueueLocalBusy => {
                    let g = cluster.gpu(d.gpu);
                    if g.is_idle() || !g.is_cached(d.model) {
                        fail(format!(
                            "request {} queued on GPU {} without its model",
                            d.request, d.gpu
                        ));
                    }
                }
                DecisionKind::DispatchHitIdle if d.false_miss => {
                    fail(format!("hit {} flagged as false miss", d.request));
                }
                DecisionKind::NoAction => fail("NoAction in a decision list".into()),
                _ => {}
            }
        }
        self.violations.extend(found);
        self.left_global.extend(left);
        Ok(decisions)
    }
}
