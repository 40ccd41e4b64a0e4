//! Run metrics.
//!
//! Ratios are per dispatch (a request starting to execute on a GPU). Local
//! enqueues are tallied separately and count as dispatches only once the
//! request actually starts.

use serde::Serialize;

use crate::catalog::{Catalog, ModelId};
use crate::cluster::ClusterState;
use crate::sched::{Decision, DecisionKind};
use crate::time::Micros;
use crate::workload::Request;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ModelTally {
    pub model_id: String,
    pub requests: u64,
    pub hits: u64,
    pub misses: u64,
    pub false_misses: u64,
}

/// Collects counts while a run is in flight.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    hits: u64,
    misses: u64,
    false_misses: u64,
    local_enqueues: u64,
    max_skip_count: u32,
    per_model: Vec<ModelTally>,
    top_model: Option<ModelId>,
    // time-weighted copies of the top model
    copies: usize,
    copies_since: Micros,
    copy_area: u128,
}

impl MetricsAccumulator {
    pub fn new(catalog: &Catalog, top_model: Option<ModelId>) -> Self {
        MetricsAccumulator {
            hits: 0,
            misses: 0,
            false_misses: 0,
            local_enqueues: 0,
            max_skip_count: 0,
            per_model: catalog
                .profiles()
                .iter()
                .map(|p| ModelTally {
                    model_id: p.model_id.clone(),
                    ..Default::default()
                })
                .collect(),
            top_model,
            copies: 0,
            copies_since: Micros::ZERO,
            copy_area: 0,
        }
    }

    pub fn top_model(&self) -> Option<ModelId> {
        self.top_model
    }

    pub fn record_dispatch(&mut self, decision: &Decision) {
        self.max_skip_count = self.max_skip_count.max(decision.skip_count);
        let tally = &mut self.per_model[decision.model.index()];
        match decision.kind {
            DecisionKind::DispatchHitIdle => {
                self.hits += 1;
                tally.hits += 1;
            }
            DecisionKind::DispatchMissIdle => {
                self.misses += 1;
                tally.misses += 1;
                if decision.false_miss {
                    self.false_misses += 1;
                    tally.false_misses += 1;
                }
            }
            DecisionKind::EnqueueLocalBusy => self.local_enqueues += 1,
            DecisionKind::NoAction => {}
        }
    }

    /// Call after any cache change with the current number of GPUs holding
    /// the top model.
    pub fn observe_top_copies(&mut self, now: Micros, copies: usize) {
        self.copy_area += self.copies as u128 * (now - self.copies_since).0 as u128;
        self.copies = copies;
        self.copies_since = now;
    }

    pub fn observe_cluster(&mut self, now: Micros, cluster: &ClusterState) {
        if let Some(top) = self.top_model {
            let n = cluster.locations(top).len();
            if n != self.copies {
                self.observe_top_copies(now, n);
            }
        }
    }

    pub fn finalize(
        mut self,
        requests: &[Request],
        cluster: &ClusterState,
        catalog: &Catalog,
        makespan: Micros,
    ) -> SimReport {
        self.observe_top_copies(makespan, self.copies);
        for r in requests {
            self.per_model[r.model.index()].requests += 1;
        }
        let n = requests.len();
        let dispatches = self.hits + self.misses;
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);

        let latencies: Vec<f64> = requests
            .iter()
            .filter_map(|r| r.latency())
            .map(Micros::as_secs_f64)
            .collect();
        let (avg_latency_s, latency_variance_s2) = mean_and_variance(&latencies);

        let span = makespan.0 as f64;
        let per_gpu = |f: fn(&crate::cluster::GpuState) -> Micros| -> Option<f64> {
            (makespan > Micros::ZERO && !cluster.gpus().is_empty()).then(|| {
                cluster
                    .gpus()
                    .iter()
                    .map(|g| f(g).0 as f64 / span)
                    .sum::<f64>()
                    / cluster.gpus().len() as f64
            })
        };

        SimReport {
            request_count: n as u64,
            completed: latencies.len() as u64,
            avg_latency_s,
            latency_variance_s2,
            max_latency_s: latencies.iter().copied().reduce(f64::max),
            cache_miss_ratio: ratio(self.misses, dispatches),
            false_miss_ratio: ratio(self.false_misses, dispatches),
            false_miss_per_miss: ratio(self.false_misses, self.misses),
            top_model: self.top_model.map(|m| catalog.name(m).to_string()),
            avg_top_model_duplicates: (self.top_model.is_some() && makespan > Micros::ZERO)
                .then(|| self.copy_area as f64 / span),
            utilization_busy: per_gpu(|g| g.busy_total()),
            utilization_infer_only: per_gpu(|g| g.infer_total()),
            hits: self.hits,
            misses: self.misses,
            false_misses: self.false_misses,
            local_enqueues: self.local_enqueues,
            evictions: cluster.evictions(),
            max_skip_count: self.max_skip_count,
            makespan_s: makespan.as_secs_f64(),
            per_model: self.per_model,
        }
    }
}

/// Population mean and variance; `None` for an empty sample.
pub fn mean_and_variance(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var))
}

/// Aggregates for one run. Fields that are undefined for an empty run are
/// `None` (serialized as `null`, or an empty CSV cell).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub request_count: u64,
    pub completed: u64,
    pub avg_latency_s: Option<f64>,
    pub latency_variance_s2: Option<f64>,
    pub max_latency_s: Option<f64>,
    pub cache_miss_ratio: Option<f64>,
    pub false_miss_ratio: Option<f64>,
    pub false_miss_per_miss: Option<f64>,
    pub top_model: Option<String>,
    pub avg_top_model_duplicates: Option<f64>,
    pub utilization_busy: Option<f64>,
    pub utilization_infer_only: Option<f64>,
    pub hits: u64,
    pub misses: u64,
    pub false_misses: u64,
    pub local_enqueues: u64,
    pub evictions: u64,
    pub max_skip_count: u32,
    pub makespan_s: f64,
    pub per_model: Vec<ModelTally>,
}

impl SimReport {
    /// Column names for [`SimReport::csv_values`].
    pub const CSV_COLUMNS: [&'static str; 18] = [
        "request_count",
        "completed",
        "avg_latency_s",
        "latency_variance_s2",
        "max_latency_s",
        "cache_miss_ratio",
        "false_miss_ratio",
        "false_miss_per_miss",
        "top_model",
        "avg_top_model_duplicates",
        "utilization_busy",
        "utilization_infer_only",
        "hits",
        "misses",
        "false_misses",
        "local_enqueues",
        "evictions",
        "max_skip_count",
    ];

    pub fn csv_values(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.request_count.to_string(),
            self.completed.to_string(),
            opt(self.avg_latency_s),
            opt(self.latency_variance_s2),
            opt(self.max_latency_s),
            opt(self.cache_miss_ratio),
            opt(self.false_miss_ratio),
            opt(self.false_miss_per_miss),
            self.top_model.clone().unwrap_or_default(),
            opt(self.avg_top_model_duplicates),
            opt(self.utilization_busy),
            opt(self.utilization_infer_only),
            self.hits.to_string(),
            self.misses.to_string(),
            self.false_misses.to_string(),
            self.local_enqueues.to_string(),
            self.evictions.to_string(),
            self.max_skip_count.to_string(),
        ]
    }
}
