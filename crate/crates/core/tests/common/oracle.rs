//! Table-driven transcription of the locality-aware scheduler.
//!
//! The oracle sees a plain copy of the cluster and global queue and replays
//! one scheduling point on it, branch by branch. Interpretation choices are
//! the same as the simulator's and are listed next to the rule they affect.

use std::cmp::Reverse;

use gpusched::{
    Catalog, ClusterState, Decision, DecisionKind, Dispatcher, GlobalQueue, Micros, ModelId,
    Policy, Result, SchedulerConfig,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub model: usize,
    pub mb: u64,
    pub last_used: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Req {
    pub id: u64,
    pub model: usize,
    pub skip: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gpu {
    pub capacity: u64,
    pub busy_until: Option<u64>,
    pub running_model: Option<usize>,
    /// Most recently used first.
    pub cache: Vec<Slot>,
    pub local: Vec<Req>,
}

impl Gpu {
    fn idle(&self) -> bool {
        self.busy_until.is_none()
    }

    fn has(&self, model: usize) -> bool {
        self.cache.iter().any(|s| s.model == model)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct State {
    pub now: u64,
    pub gpus: Vec<Gpu>,
    /// Arrival order.
    pub queue: Vec<Req>,
    pub access: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Profiles {
    pub mb: Vec<u64>,
    pub load: Vec<u64>,
    pub infer: Vec<u64>,
}

impl Profiles {
    pub fn of(catalog: &Catalog) -> Self {
        let p = catalog.profiles();
        Profiles {
            mb: p.iter().map(|x| x.occupation_mb).collect(),
            load: p.iter().map(|x| x.load_time.0).collect(),
            infer: p.iter().map(|x| x.infer_time.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Hit,
    Miss,
    Enqueue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub kind: Kind,
    pub request: u64,
    pub gpu: usize,
    pub false_miss: bool,
    pub skip: u32,
}

impl From<&Decision> for Outcome {
    fn from(d: &Decision) -> Self {
        let kind = match d.kind {
            DecisionKind::DispatchHitIdle => Kind::Hit,
            DecisionKind::DispatchMissIdle => Kind::Miss,
            DecisionKind::EnqueueLocalBusy => Kind::Enqueue,
            DecisionKind::NoAction => panic!("scheduler reported NoAction"),
        };
        Outcome {
            kind,
            request: d.request,
            gpu: d.gpu,
            false_miss: d.false_miss,
            skip: d.skip_count,
        }
    }
}

impl State {
    pub fn capture(
        queue: &GlobalQueue,
        cluster: &ClusterState,
        models: usize,
        now: Micros,
    ) -> State {
        let req = |q: &gpusched::cluster::QueuedRequest| Req {
            id: q.id,
            model: q.model.index(),
            skip: q.skip_count,
        };
        State {
            now: now.0,
            gpus: cluster
                .gpus()
                .iter()
                .map(|g| Gpu {
                    capacity: g.capacity_mb,
                    busy_until: g.busy_until().map(|t| t.0),
                    running_model: g.running().map(|r| r.request.model.index()),
                    cache: g
                        .cached()
                        .map(|c| Slot {
                            model: c.model.index(),
                            mb: c.occupation_mb,
                            last_used: c.last_used.0,
                        })
                        .collect(),
                    local: g.local_queue().map(req).collect(),
                })
                .collect(),
            queue: queue.iter().map(req).collect(),
            access: (0..models)
                .map(|m| cluster.access_count(ModelId(m as u32)))
                .collect(),
        }
    }

    /// Starts `r` on idle GPU `g`, loading its model under LRU if needed.
    fn run(&mut self, g: usize, r: Req, p: &Profiles, out: &mut Vec<Outcome>) {
        let now = self.now;
        let m = r.model;
        let hit = self.gpus[g].has(m);
        let false_miss = !hit
            && self
                .gpus
                .iter()
                .enumerate()
                .any(|(j, o)| j != g && o.has(m));
        let gpu = &mut self.gpus[g];
        assert!(gpu.idle(), "oracle dispatched to busy GPU {g}");
        if hit {
            let i = gpu.cache.iter().position(|s| s.model == m).unwrap();
            let mut slot = gpu.cache.remove(i);
            slot.last_used = now;
            gpu.cache.insert(0, slot);
        } else {
            // victims from the least recent end; local-queue models stay
            let mut free = gpu.capacity - gpu.cache.iter().map(|s| s.mb).sum::<u64>();
            let mut k = gpu.cache.len();
            while free < p.mb[m] {
                k -= 1;
                let pinned = gpu.local.iter().any(|q| q.model == gpu.cache[k].model);
                if !pinned {
                    free += gpu.cache.remove(k).mb;
                }
            }
            gpu.cache.insert(
                0,
                Slot {
                    model: m,
                    mb: p.mb[m],
                    last_used: now,
                },
            );
        }
        let duration = p.infer[m] + if hit { 0 } else { p.load[m] };
        gpu.busy_until = Some(now + duration);
        gpu.running_model = Some(m);
        self.access[m] += 1;
        out.push(Outcome {
            kind: if hit { Kind::Hit } else { Kind::Miss },
            request: r.id,
            gpu: g,
            false_miss,
            skip: r.skip,
        });
    }

    fn take(&mut self, id: u64) -> Req {
        let i = self.queue.iter().position(|r| r.id == id).unwrap();
        self.queue.remove(i)
    }

    fn estimate(&self, j: usize, p: &Profiles) -> u64 {
        let g = &self.gpus[j];
        g.busy_until.unwrap() - self.now + g.local.iter().map(|q| p.infer[q.model]).sum::<u64>()
    }
}

enum Action {
    RunHere,
    RunOn(usize),
    Enqueue(usize),
}

type Rule = fn(&State, &Profiles, usize, &Req) -> Option<Action>;

fn holders(st: &State, i: usize, r: &Req) -> Vec<usize> {
    (0..st.gpus.len())
        .filter(|&j| j != i && st.gpus[j].has(r.model))
        .collect()
}

/// Placement of one request for idle GPU `i`, one row per branch, tried top
/// to bottom.
const LOCALITY_RULES: [(&str, Rule); 4] = [
    ("not cached on any other GPU", |st, _, i, r| {
        holders(st, i, r).is_empty().then_some(Action::RunHere)
    }),
    // several idle copies: most recently used, then lowest index
    ("cached on another idle GPU", |st, _, i, r| {
        holders(st, i, r)
            .into_iter()
            .filter(|&j| st.gpus[j].idle())
            .max_by_key(|&j| {
                let slot = st.gpus[j]
                    .cache
                    .iter()
                    .find(|s| s.model == r.model)
                    .unwrap();
                (slot.last_used, Reverse(j))
            })
            .map(Action::RunOn)
    }),
    // busy copies in order of estimated finish, then index
    ("busy GPU finishes before a load would", |st, p, i, r| {
        let mut busy: Vec<(u64, usize)> = holders(st, i, r)
            .into_iter()
            .map(|j| (st.estimate(j, p), j))
            .collect();
        busy.sort();
        busy.into_iter()
            .find(|&(finish, _)| finish < p.load[r.model])
            .map(|(_, j)| Action::Enqueue(j))
    }),
    ("allow cache miss", |_, _, _, _| Some(Action::RunHere)),
];

/// Returns true when the request went to `i`.
fn locality_load_balance(
    st: &mut State,
    p: &Profiles,
    i: usize,
    id: u64,
    out: &mut Vec<Outcome>,
) -> bool {
    let r = st.queue.iter().find(|r| r.id == id).unwrap().clone();
    let action = LOCALITY_RULES
        .iter()
        .find_map(|(_, rule)| rule(st, p, i, &r))
        .expect("last rule always fires");
    let r = st.take(id);
    match action {
        Action::RunHere => {
            st.run(i, r, p, out);
            true
        }
        Action::RunOn(j) => {
            st.run(j, r, p, out);
            false
        }
        Action::Enqueue(j) => {
            out.push(Outcome {
                kind: Kind::Enqueue,
                request: r.id,
                gpu: j,
                false_miss: false,
                skip: r.skip,
            });
            st.gpus[j].local.push(r);
            false
        }
    }
}

fn locality_aware(st: &mut State, p: &Profiles, limit: u32, out: &mut Vec<Outcome>) {
    // "sorted by frequency": hottest resident models first, then index
    let mut idle: Vec<usize> = (0..st.gpus.len()).filter(|&i| st.gpus[i].idle()).collect();
    idle.sort_by_key(|&i| {
        let heat: u64 = st.gpus[i].cache.iter().map(|s| st.access[s.model]).sum();
        (Reverse(heat), i)
    });

    for i in idle {
        // an earlier GPU may have handed this one a request
        if !st.gpus[i].idle() {
            continue;
        }
        if !st.gpus[i].local.is_empty() {
            let r = st.gpus[i].local.remove(0);
            st.run(i, r, p, out);
            continue;
        }

        let ids: Vec<u64> = st.queue.iter().map(|r| r.id).collect();
        let mut broke = false;
        let mut visited = Vec::new();
        for id in ids {
            let Some(r) = st.queue.iter().find(|r| r.id == id).cloned() else {
                continue;
            };
            if st.gpus[i].has(r.model) {
                let r = st.take(id);
                st.run(i, r, p, out);
                // skips count only when the scan ends in a promotion
                for v in &visited {
                    if let Some(q) = st.queue.iter_mut().find(|q| q.id == *v) {
                        q.skip += 1;
                    }
                }
                broke = true;
                break;
            }
            if r.skip >= limit {
                if locality_load_balance(st, p, i, id, out) {
                    broke = true;
                    break;
                }
            } else {
                visited.push(id);
            }
        }
        if !broke {
            let ids: Vec<u64> = st.queue.iter().map(|r| r.id).collect();
            for id in ids {
                if locality_load_balance(st, p, i, id, out) {
                    break;
                }
            }
        }
    }
}

fn load_balance(st: &mut State, p: &Profiles, out: &mut Vec<Outcome>) {
    for i in 0..st.gpus.len() {
        if st.gpus[i].idle() && !st.queue.is_empty() {
            let r = st.queue.remove(0);
            st.run(i, r, p, out);
        }
    }
}

/// Replays one scheduling point on `st` and returns what should happen.
pub fn schedule(st: &mut State, p: &Profiles, policy: Policy, limit: u32) -> Vec<Outcome> {
    let mut out = Vec::new();
    match policy {
        Policy::Lb => load_balance(st, p, &mut out),
        Policy::Lalb => locality_aware(st, p, 0, &mut out),
        Policy::Lalbo3 => locality_aware(st, p, limit, &mut out),
    }
    out
}

/// Wraps the real scheduler and compares every scheduling point against
/// the oracle: the decisions and the resulting cluster and queue state.
pub struct Checked {
    pub config: SchedulerConfig,
    pub profiles: Profiles,
    pub models: usize,
    pub points: usize,
    pub decisions: usize,
    pub mismatches: Vec<String>,
}

impl Checked {
    pub fn new(config: SchedulerConfig, catalog: &Catalog) -> Self {
        Checked {
            config,
            profiles: Profiles::of(catalog),
            models: catalog.len(),
            points: 0,
            decisions: 0,
            mismatches: Vec::new(),
        }
    }
}

impl Dispatcher for Checked {
    fn on_scheduling_point(
        &mut self,
        queue: &mut GlobalQueue,
        cluster: &mut ClusterState,
        catalog: &Catalog,
        now: Micros,
    ) -> Result<Vec<Decision>> {
        let before = State::capture(queue, cluster, self.models, now);
        let mut expected_state = before.clone();
        let expected = schedule(
            &mut expected_state,
            &self.profiles,
            self.config.policy,
            self.config.o3_limit,
        );
        let actual = self
            .config
            .on_scheduling_point(queue, cluster, catalog, now)?;
        let got: Vec<Outcome> = actual.iter().map(Outcome::from).collect();
        if got != expected {
            self.mismatches.push(format!(
                "t={now}: expected {expected:?}, got {got:?}, from {before:?}"
            ));
        } else {
            let after = State::capture(queue, cluster, self.models, now);
            if after != expected_state {
                self.mismatches.push(format!(
                    "t={now}: state expected {expected_state:?}, got {after:?}"
                ));
            }
        }
        self.points += 1;
        self.decisions += got.len();
        Ok(actual)
    }
}

/// Two of the four small-catalog models fit at once, never three.
pub const TIGHT_MB: u64 = 5300;

/// Arrival spacings in µs: bursts, sub-inference gaps and gaps longer than a
/// cold start.
const SPACINGS: [u64; 3] = [0, 700_000, 4_500_000];

/// Simulates `arrivals` with every scheduling point checked.
pub fn run_checked(
    catalog: &Catalog,
    arrivals: &[(usize, u64)],
    gpus: usize,
    mb: u64,
    config: SchedulerConfig,
) -> Checked {
    let w = super::workload(catalog, arrivals);
    let mut checked = Checked::new(config, catalog);
    let options = gpusched::EngineOptions {
        check_invariants: true,
        ..Default::default()
    };
    let run = gpusched::simulate(&w, gpus, mb, &mut checked, options).unwrap();
    assert_eq!(run.report.completed, arrivals.len() as u64);
    checked
}

#[derive(Debug, Default)]
pub struct Enumeration {
    pub instances: u64,
    pub decisions: usize,
    pub mismatches: Vec<String>,
}

/// Two GPUs, four models, every model sequence of 1..=6 requests, under
/// each spacing, capacity and policy.
pub fn exhaustive_small() -> Enumeration {
    let catalog = super::small_catalog();
    let configs = [
        SchedulerConfig::new(Policy::Lb, 0),
        SchedulerConfig::new(Policy::Lalb, 0),
        SchedulerConfig::new(Policy::Lalbo3, 1),
        SchedulerConfig::new(Policy::Lalbo3, 2),
        SchedulerConfig::new(Policy::Lalbo3, 25),
    ];
    let mut e = Enumeration::default();
    for n in 1..=6u32 {
        for code in 0..4u32.pow(n) {
            let models: Vec<usize> = (0..n).map(|k| (code / 4u32.pow(k) % 4) as usize).collect();
            for spacing in SPACINGS {
                let arrivals: Vec<(usize, u64)> = models
                    .iter()
                    .enumerate()
                    .map(|(k, &m)| (m, k as u64 * spacing))
                    .collect();
                for mb in [TIGHT_MB, 8192] {
                    for config in configs {
                        let c = run_checked(&catalog, &arrivals, 2, mb, config);
                        e.decisions += c.decisions;
                        e.instances += 1;
                        e.mismatches.extend(
                            c.mismatches
                                .into_iter()
                                .map(|m| format!("{config:?} {arrivals:?} @ {mb} MB: {m}")),
                        );
                    }
                }
            }
        }
    }
    e
}
