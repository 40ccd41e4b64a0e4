//! Invocation traces and request synthesis.
//!
//! A trace is a function × minute matrix of invocation counts (the layout of
//! the public Azure Functions dataset). A workload keeps the `k` most popular
//! functions, maps each one onto a profiled model, rescales every minute to a
//! fixed request total, and scatters the invocations uniformly inside their
//! minute.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ModelId, ModelProfile};
use crate::cluster::GpuId;
use crate::error::{Error, Result};
use crate::time::Micros;

pub mod synthetic;

pub use synthetic::SyntheticTrace;

const MINUTE: Micros = Micros::from_secs(60);

/// Per-function, per-minute invocation counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceMatrix {
    functions: Vec<String>,
    minutes: usize,
    counts: Vec<Vec<u64>>,
}

impl TraceMatrix {
    pub fn new(functions: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if functions.len() != counts.len() {
            return Err(Error::Config(format!(
                "{} function ids but {} count rows",
                functions.len(),
                counts.len()
            )));
        }
        let minutes = counts.first().map_or(0, Vec::len);
        if let Some((i, _)) = counts.iter().enumerate().find(|(_, r)| r.len() != minutes) {
            return Err(Error::Config(format!(
                "row for `{}` has {} minutes, expected {minutes}",
                functions[i],
                counts[i].len()
            )));
        }
        Ok(TraceMatrix {
            functions,
            minutes,
            counts,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header".into(),
                })
            }
            Some(r) => r.map_err(csv_error)?,
        };
        if header.get(0) != Some("function_id") {
            return Err(Error::Parse {
                line: 1,
                message: "first column must be `function_id`".into(),
            });
        }
        let minutes = header.len() - 1;

        let mut functions = Vec::new();
        let mut counts = Vec::new();
        for record in records {
            let record = record.map_err(csv_error)?;
            let line = record.position().map_or(0, |p| p.line());
            let function = record[0].to_string();
            let mut row = Vec::with_capacity(minutes);
            for field in record.iter().skip(1) {
                let value: i64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("count `{field}` is not an integer"),
                })?;
                if value < 0 {
                    return Err(Error::NegativeCount {
                        line,
                        function,
                        value,
                    });
                }
                row.push(value as u64);
            }
            functions.push(function);
            counts.push(row);
        }
        Ok(TraceMatrix {
            functions,
            minutes,
            counts,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("function_id");
        for m in 1..=self.minutes {
            out.push_str(&format!(",m{m}"));
        }
        out.push('\n');
        for (f, row) in self.functions.iter().zip(&self.counts) {
            out.push_str(f);
            for c in row {
                out.push(',');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn functions(&self) -> &[String] {
        &self.functions
    }

    pub fn minutes(&self) -> usize {
        self.minutes
    }

    pub fn count(&self, function: usize, minute: usize) -> u64 {
        self.counts[function][minute]
    }

    pub fn total(&self, function: usize) -> u64 {
        self.counts[function].iter().sum()
    }

    pub fn grand_total(&self) -> u64 {
        (0..self.functions.len()).map(|f| self.total(f)).sum()
    }
}

/// Indices of the `k` most invoked functions, most popular first.
/// Ties go to the lexicographically smaller function id.
pub fn select_working_set(trace: &TraceMatrix, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("working set size must be at least 1".into()));
    }
    if k > trace.functions.len() {
        return Err(Error::WorkingSetTooLarge {
            requested: k,
            available: trace.functions.len(),
        });
    }
    let mut order: Vec<(u64, usize)> = (0..trace.functions.len())
        .map(|f| (trace.total(f), f))
        .collect();
    order.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then_with(|| trace.functions[a.1].cmp(&trace.functions[b.1]))
    });
    Ok(order.into_iter().take(k).map(|(_, f)| f).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub working_set_size: usize,
    pub per_minute_total: u64,
    pub duration_minutes: usize,
    pub seed: u64,
    /// Explicit function → model assignment. When absent, sizes are spread
    /// evenly over popularity ranks (see [`default_model_mapping`]).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_mapping: Option<BTreeMap<String, String>>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            working_set_size: 15,
            per_minute_total: 325,
            duration_minutes: 6,
            seed: 1,
            model_mapping: None,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.working_set_size == 0 {
            return Err(Error::Config("working_set_size must be positive".into()));
        }
        if self.per_minute_total == 0 {
            return Err(Error::Config("per_minute_total must be positive".into()));
        }
        if self.duration_minutes == 0 {
            return Err(Error::Config("duration_minutes must be positive".into()));
        }
        Ok(())
    }
}

pub type RequestId = u64;

/// One function invocation and its lifecycle in the simulation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Request {
    pub id: RequestId,
    pub model: ModelId,
    pub arrival: Micros,
    pub skip_count: u32,
    pub dispatched_at: Option<Micros>,
    pub completed_at: Option<Micros>,
    pub gpu: Option<GpuId>,
    pub hit: Option<bool>,
    pub false_miss: bool,
}

impl Request {
    pub fn new(id: RequestId, model: ModelId, arrival: Micros) -> Self {
        Request {
            id,
            model,
            arrival,
            skip_count: 0,
            dispatched_at: None,
            completed_at: None,
            gpu: None,
            hit: None,
            false_miss: false,
        }
    }

    pub fn latency(&self) -> Option<Micros> {
        self.completed_at.map(|c| c - self.arrival)
    }
}

/// A synthesized request stream together with the models it references.
///
/// `models` holds exactly one entry per working-set function, so a model id
/// is also a cache item identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub models: Catalog,
    pub functions: Vec<String>,
    pub requests: Vec<Request>,
}

impl Workload {
    /// Builds a workload directly from `(model name, arrival)` pairs. Requests
    /// are sorted by arrival and numbered in that order.
    pub fn from_arrivals(models: Catalog, arrivals: &[(&str, Micros)]) -> Result<Self> {
        let mut reqs = arrivals
            .iter()
            .map(|(name, t)| Ok((*t, models.id_of(name)?)))
            .collect::<Result<Vec<_>>>()?;
        reqs.sort_by_key(|(t, _)| *t);
        let requests = reqs
            .into_iter()
            .enumerate()
            .map(|(i, (t, m))| Request::new(i as RequestId, m, t))
            .collect();
        let functions = models
            .profiles()
            .iter()
            .map(|p| p.model_id.clone())
            .collect();
        Ok(Workload {
            models,
            functions,
            requests,
        })
    }

    /// The model with the most requests; ties go to the lower model id.
    pub fn top_model(&self) -> Option<ModelId> {
        let mut counts = vec![0u64; self.models.len()];
        for r in &self.requests {
            counts[r.model.index()] += 1;
        }
        let (idx, &n) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
        (n > 0).then_some(ModelId(idx as u32))
    }
}

/// Catalog models in the order they are handed to popularity ranks: sorted
/// by occupation, then alternating smallest and largest remaining.
pub fn interleaved_by_size(catalog: &Catalog) -> Vec<&ModelProfile> {
    let mut sorted: Vec<&ModelProfile> = catalog.profiles().iter().collect();
    sorted.sort_by(|a, b| {
        a.occupation_mb
            .cmp(&b.occupation_mb)
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    let mut out = Vec::with_capacity(sorted.len());
    let (mut lo, mut hi) = (0usize, sorted.len());
    while lo < hi {
        out.push(sorted[lo]);
        lo += 1;
        if lo < hi {
            hi -= 1;
            out.push(sorted[hi]);
        }
    }
    out
}

/// Assigns one profile per popularity rank. Ranks beyond the catalog size
/// cycle through it again as distinct replicas named `<model>#<cycle>`.
pub fn default_model_mapping(catalog: &Catalog, ranks: usize) -> Vec<ModelProfile> {
    let order = interleaved_by_size(catalog);
    (0..ranks)
        .map(|r| {
            let base = order[r % order.len()];
            let cycle = r / order.len();
            let mut p = base.clone();
            if cycle > 0 {
                p.model_id = format!("{}#{cycle}", base.model_id);
            }
            p
        })
        .collect()
}

/// Rescales `counts` to sum to exactly `total` with largest-remainder
/// rounding. Remainder ties go to the earlier index.
pub fn largest_remainder(counts: &[u64], total: u64) -> Option<Vec<u64>> {
    let sum: u64 = counts.iter().sum();
    if sum == 0 {
        return None;
    }
    let mut out = Vec::with_capacity(counts.len());
    let mut rems = Vec::with_capacity(counts.len());
    for (i, &c) in counts.iter().enumerate() {
        let num = c as u128 * total as u128;
        out.push((num / sum as u128) as u64);
        rems.push((num % sum as u128, i));
    }
    let assigned: u64 = out.iter().sum();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take((total - assigned) as usize) {
        out[i] += 1;
    }
    Some(out)
}

/// Turns a trace into a concrete, arrival-sorted request stream.
pub fn synthesize(trace: &TraceMatrix, spec: &WorkloadSpec, catalog: &Catalog) -> Result<Workload> {
    spec.validate()?;
    if spec.duration_minutes > trace.minutes() {
        return Err(Error::TraceTooShort {
            requested: spec.duration_minutes,
            available: trace.minutes(),
        });
    }
    let working_set = select_working_set(trace, spec.working_set_size)?;
    let functions: Vec<String> = working_set
        .iter()
        .map(|&f| trace.functions()[f].clone())
        .collect();

    let (models, rank_model) = match &spec.model_mapping {
        None => {
            let profiles = default_model_mapping(catalog, working_set.len());
            let ids = (0..profiles.len() as u32).map(ModelId).collect();
            (Catalog::from_profiles(profiles)?, ids)
        }
        Some(mapping) => explicit_mapping(catalog, &functions, mapping)?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pending: Vec<(Micros, ModelId)> =
        Vec::with_capacity(spec.per_minute_total as usize * spec.duration_minutes);
    for minute in 0..spec.duration_minutes {
        let counts: Vec<u64> = working_set
            .iter()
            .map(|&f| trace.count(f, minute))
            .collect();
        let scaled = largest_remainder(&counts, spec.per_minute_total)
            .ok_or(Error::ZeroInvocations { minute })?;
        let start = Micros(MINUTE.0 * minute as u64);
        for (rank, &n) in scaled.iter().enumerate() {
            for _ in 0..n {
                let offset = Micros(rng.random_range(0..MINUTE.0));
                pending.push((start + offset, rank_model[rank]));
            }
        }
    }
    pending.sort_by_key(|(t, _)| *t);
    let requests = pending
        .into_iter()
        .enumerate()
        .map(|(i, (t, m))| Request::new(i as RequestId, m, t))
        .collect();

    Ok(Workload {
        models,
        functions,
        requests,
    })
}

fn explicit_mapping(
    catalog: &Catalog,
    functions: &[String],
    mapping: &BTreeMap<String, String>,
) -> Result<(Catalog, Vec<ModelId>)> {
    let mut profiles: Vec<ModelProfile> = Vec::new();
    let mut seen: BTreeMap<&str, ModelId> = BTreeMap::new();
    let mut rank_model = Vec::with_capacity(functions.len());
    for f in functions {
        let name = mapping
            .get(f)
            .ok_or_else(|| Error::UnmappedFunction(f.clone()))?;
        let id = match seen.get(name.as_str()) {
            Some(&id) => id,
            None => {
                let id = ModelId(profiles.len() as u32);
                profiles.push(catalog.lookup(name)?.clone());
                seen.insert(name, id);
                id
            }
        };
        rank_model.push(id);
    }
    Ok((Catalog::from_profiles(profiles)?, rank_model))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}
