//! Virtual-time event loop.
//!
//! Between events every rate (flush, merges, admission, arrivals) is
//! constant, so the loop jumps straight to the earliest completion or
//! boundary. In-memory writes cost no time; latency comes from queuing
//! behind stalls and write-rate caps.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::latency::{
    measure_windows, queue_account, CumulativeCurve, LatencyDistribution, LatencySummary, LinearPiece, Window,
};
use crate::model::{SimParams, SizeModel, TaskId, TreeState, MemoryState};
use crate::policy::{MergePolicy, PolicyConfig, PolicyFamily};
use crate::scheduler::{
    admit_writes, allocate, blsm_rates, Admission, Allocation, ComponentLimit, SchedulerConfig, SchedulerKind,
    StallCause,
};
use crate::workload::{ArrivalKind, ArrivalProcess, ArrivalSchedule};

/// Longest gap tolerated between events while work is pending.
pub const STUCK_HORIZON: f64 = 1e9;

const ZERO_STEP_LIMIT: usize = 1_000_000;
const DEFAULT_WINDOW: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    MergeDone,
    FlushDone,
    MemFull,
    StallRelease,
    ArrivalSegmentBoundary,
    QueueDrained,
    Refresh,
    End,
    /// Periodic force of buffered device writes; recorded, no effect.
    ForceNoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    pub id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StallInterval {
    pub start: f64,
    pub end: f64,
    pub cause: StallCause,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSample {
    pub time_s: f64,
    pub component_count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub p50: f64,
    pub p99: f64,
    pub p999: f64,
    pub max: f64,
    pub processing_p50: f64,
    pub processing_p99: f64,
    pub processing_p999: f64,
    pub processing_max: f64,
}

impl LatencyReport {
    pub fn new(write: LatencySummary, processing: LatencySummary) -> Self {
        Self {
            p50: write.p50,
            p99: write.p99,
            p999: write.p999,
            max: write.max,
            processing_p50: processing.p50,
            processing_p99: processing.p99,
            processing_p999: processing.p999,
            processing_max: processing.max,
        }
    }
}

/// Everything a run produced. Only the listed fields are serialized; the
/// detail is kept for analysis in process.
#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    pub config_echo: serde_json::Value,
    pub events: Vec<SimEvent>,
    pub windows: Vec<Window>,
    pub components: Vec<ComponentSample>,
    pub stalls: Vec<StallInterval>,
    pub latency: LatencyReport,
    #[serde(skip)]
    pub detail: TraceDetail,
}

#[derive(Debug, Clone)]
pub struct TraceDetail {
    pub duration: f64,
    /// Writes admitted into memory, `A(t)`.
    pub admissions: CumulativeCurve,
    /// Open arrival schedule `N(t)`; `None` for closed clients.
    pub arrivals: Option<ArrivalSchedule>,
    pub write_latency: LatencyDistribution,
    pub processing_latency: LatencyDistribution,
    /// Backlog `(time, queued writes)` sampled at every event.
    pub queue: Vec<(f64, f64)>,
    pub final_tree: TreeState,
}

impl Trace {
    pub fn duration(&self) -> f64 {
        self.detail.duration
    }

    /// Writes admitted in `[from, to]`.
    pub fn processed_between(&self, from: f64, to: f64) -> f64 {
        self.detail.admissions.value_at(to) - self.detail.admissions.value_at(from)
    }

    pub fn stalled_time(&self, from: f64, to: f64) -> f64 {
        self.stalls
            .iter()
            .map(|s| (s.end.min(to) - s.start.max(from)).max(0.0))
            .sum::<f64>()
            + 0.0
    }

    pub fn final_queue(&self) -> f64 {
        self.detail.queue.last().map_or(0.0, |q| q.1)
    }

    /// Final backlog is nonempty and larger than at three quarters of the run.
    pub fn queue_growing(&self) -> bool {
        let end = self.detail.duration;
        let q = &self.detail.queue;
        let final_q = self.final_queue();
        if final_q <= 0.0 {
            return false;
        }
        let i = q.partition_point(|s| s.0 <= 0.75 * end);
        let earlier = if i == 0 { 0.0 } else { q[i - 1].1 };
        final_q > earlier
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One simulated LSM-tree with its policy and scheduler.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: SimParams,
    policy_config: PolicyConfig,
    policy: MergePolicy,
    sched: SchedulerConfig,
    limit: ComponentLimit,
    tree: TreeState,
    flush_cache: HashMap<u64, f64>,
    checked: bool,
}

impl Simulator {
    pub fn new(params: &SimParams, policy: &PolicyConfig, sched: &SchedulerConfig) -> Result<Self> {
        params.validate()?;
        policy.validate()?;
        sched.validate()?;
        if policy.family == PolicyFamily::PartitionedLeveling && !matches!(params.key_distribution, crate::model::KeyDistribution::Uniform) {
            return Err(Error::Validation("partitioned leveling requires uniform keys".into()));
        }
        let merge_policy = MergePolicy::new(policy, params);
        if sched.kind == SchedulerKind::Blsm && (policy.family != PolicyFamily::Leveling || merge_policy.levels != 2) {
            return Err(Error::Validation("blsm scheduling needs a leveling tree with two disk levels".into()));
        }
        let limit = ComponentLimit::resolve(sched, &merge_policy);
        let memory = MemoryState::new(params.mem_component_size, params.mem_component_count);
        let tree = TreeState::new(memory, policy.family == PolicyFamily::PartitionedLeveling);
        Ok(Self {
            params: params.clone(),
            policy_config: policy.clone(),
            policy: merge_policy,
            sched: sched.clone(),
            limit,
            tree,
            flush_cache: HashMap::new(),
            checked: false,
        })
    }

    /// Verify structural, bandwidth and write-conservation invariants at
    /// every event; a violation aborts the run with an error.
    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    fn check_step(&self, t: f64, alloc: &Allocation, admitted: f64, queue: f64, schedule: Option<&ArrivalSchedule>) -> Result<()> {
        let fail = |msg: String| Err(Error::Simulation(format!("invariant violated at t={t}: {msg}")));
        if let Err(msg) = self.tree.check_invariants() {
            return fail(msg);
        }
        let b = self.params.bandwidth;
        if alloc.total() > b * (1.0 + 1e-9) {
            return fail(format!("allocated {} of {b}", alloc.total()));
        }
        let pending = self.tree.memory.flush_remaining.is_some() || !self.tree.in_flight.is_empty();
        if pending && self.sched.kind != SchedulerKind::Blsm && alloc.total() < b * (1.0 - 1e-9) {
            return fail(format!("pending work but only {} of {b} allocated", alloc.total()));
        }
        if self.policy.family() == PolicyFamily::Leveling {
            for (level, comps) in self.tree.levels.iter().enumerate().skip(1) {
                if comps.iter().filter(|c| !c.merging).count() > 1 {
                    return fail(format!("level {level} holds more than one resident component"));
                }
            }
        }
        if let Some(s) = schedule {
            let arrived = s.count_at(t);
            if (arrived - admitted - queue).abs() > 1e-6 * (1.0 + arrived) {
                return fail(format!("arrived {arrived} but admitted {admitted} + queued {queue}"));
            }
        }
        Ok(())
    }

    pub fn tree(&self) -> &TreeState {
        &self.tree
    }

    pub fn policy(&self) -> &MergePolicy {
        &self.policy
    }

    /// Replace the tree, shifting its timestamps by `-offset` so that a
    /// snapshot taken at time `offset` continues from time 0.
    pub fn adopt_tree(&mut self, mut tree: TreeState, offset: f64) {
        for c in tree.levels.iter_mut().flatten() {
            c.created_at -= offset;
        }
        for t in &mut tree.in_flight {
            t.created_at -= offset;
        }
        self.tree = tree;
    }

    /// Bulk-load `dataset_size` unique entries: one flush per full memory
    /// component, each followed by merges that complete instantly.
    pub fn preload(&mut self) -> Result<()> {
        let m = self.params.mem_component_size;
        let flushes = (self.params.dataset_size / m).floor() as usize;
        for _ in 0..flushes {
            self.tree.push_flushed(m, m, 0.0);
            self.quiesce_instantly()?;
        }
        Ok(())
    }

    fn quiesce_instantly(&mut self) -> Result<()> {
        for _ in 0..100_000 {
            self.policy.schedule(&mut self.tree, 0.0);
            if self.tree.in_flight.is_empty() {
                return Ok(());
            }
            let mut ids: Vec<TaskId> = self.tree.in_flight.iter().map(|t| t.id).collect();
            ids.sort_unstable();
            for id in ids {
                self.tree.complete_task(id, 0.0, self.params.keyspace, SizeModel::Disjoint);
            }
        }
        Err(Error::Simulation("preload merges do not settle".into()))
    }

    fn flush_size(&mut self, writes: f64) -> f64 {
        let params = &self.params;
        *self.flush_cache.entry(writes.to_bits()).or_insert_with(|| params.flush_size(writes))
    }

    fn config_echo(&self, arrivals: &ArrivalProcess, seed: u64) -> serde_json::Value {
        json!({
            "sim": self.params,
            "policy": self.policy_config,
            "scheduler": self.sched,
            "arrivals": arrivals,
            "levels": self.policy.levels,
            "seed": seed,
        })
    }

    /// Bandwidth split and admission cap for the current state.
    fn rates(&self) -> Result<(Allocation, f64)> {
        let flush_active = self.tree.memory.flush_remaining.is_some();
        let b = self.params.bandwidth;
        let (alloc, mut cap) = if self.sched.kind == SchedulerKind::Blsm {
            let r = blsm_rates(&self.policy, &self.tree, flush_active, b)?;
            (r.allocation, if self.tree.in_flight.is_empty() { f64::INFINITY } else { r.write_cap })
        } else {
            let a = allocate(self.sched.kind, self.sched.flush_priority, &self.tree.in_flight, flush_active, b);
            (a, f64::INFINITY)
        };
        cap = cap.min(self.sched.write_interaction.cap());
        Ok((alloc, cap))
    }

    /// Run `arrivals` from virtual time 0 to its duration, continuing from
    /// the current tree. The tree is left in its final state.
    pub fn run(&mut self, arrivals: &ArrivalProcess, window: f64, seed: u64) -> Result<Trace> {
        arrivals.validate()?;
        if !(window > 0.0) {
            return Err(Error::Validation("window must be > 0".into()));
        }
        let end = arrivals.duration;
        let schedule = arrivals.schedule();
        let clients = match arrivals.kind {
            ArrivalKind::Closed { clients } => Some(clients as f64),
            _ => None,
        };
        let mut run = RunState::new();
        if self.params.force_interval_bytes > 0 {
            run.events.push(SimEvent { time: 0.0, kind: EventKind::ForceNoop, id: self.params.force_interval_bytes });
        }
        let blsm = self.sched.kind == SchedulerKind::Blsm;
        let mut t = 0.0;
        let mut zero_steps = 0usize;

        loop {
            self.settle(t, &mut run, clients.is_some())?;

            let (alloc, cap) = self.rates()?;
            if self.checked {
                self.check_step(t, &alloc, run.admitted, run.queue, schedule.as_ref())?;
            }
            let lambda = schedule.as_ref().map_or(0.0, |s| s.rate_at(t));
            let admission = admit_writes(self.limit, &self.tree);
            let demand = clients.is_some() || run.queue > 0.0 || lambda > 0.0;
            let stall = match admission {
                Admission::Stalled(cause) if demand => Some(cause),
                _ => None,
            };
            run.track_stall(t, stall, clients.unwrap_or(1.0));

            let admit_rate = match admission {
                Admission::Stalled(_) => 0.0,
                Admission::Open if clients.is_some() || run.queue > 0.0 => {
                    if cap.is_finite() {
                        cap
                    } else {
                        0.0
                    }
                }
                Admission::Open => lambda.min(cap),
            };

            // Earliest next event.
            let mut next = Next::new(end, EventKind::End, 0);
            let mem = &self.tree.memory;
            let mut work_pending = false;
            let mut earliest_work = f64::INFINITY;
            if let Some(rem) = mem.flush_remaining {
                work_pending = true;
                if alloc.flush_rate > 0.0 {
                    let at = t + rem / alloc.flush_rate;
                    earliest_work = earliest_work.min(at);
                    next.offer(at, EventKind::FlushDone, 0);
                }
            }
            for task in &self.tree.in_flight {
                work_pending = true;
                let r = alloc.rate(task.id);
                if r > 0.0 {
                    let at = t + task.remaining / r;
                    earliest_work = earliest_work.min(at);
                    next.offer(at, EventKind::MergeDone, task.id);
                }
            }
            if work_pending && earliest_work > t + STUCK_HORIZON {
                return Err(Error::Simulation(format!(
                    "no merge or flush can finish within {STUCK_HORIZON} virtual seconds of t={t}"
                )));
            }
            if admit_rate > 0.0 {
                if let Some(fill) = mem.active_fill {
                    next.offer(t + (mem.capacity - fill).max(0.0) / admit_rate, EventKind::MemFull, 0);
                }
            }
            if clients.is_none() && run.queue > 0.0 && admit_rate > lambda {
                next.offer(t + run.queue / (admit_rate - lambda), EventKind::QueueDrained, 0);
            }
            if let Some(b) = schedule.as_ref().and_then(|s| s.next_boundary(t)) {
                next.offer(b, EventKind::ArrivalSegmentBoundary, 0);
            }
            if blsm && cap.is_finite() {
                next.offer(t + 1.0, EventKind::Refresh, 0);
            }

            let tau = next.time.min(end).max(t);
            let dt = tau - t;
            if dt == 0.0 {
                zero_steps += 1;
                if zero_steps > ZERO_STEP_LIMIT {
                    return Err(Error::Simulation(format!("no progress at t={t}")));
                }
            } else {
                zero_steps = 0;
            }

            // Advance every rate over [t, tau).
            if let Some(rem) = self.tree.memory.flush_remaining.as_mut() {
                *rem = (*rem - alloc.flush_rate * dt).max(0.0);
            }
            for task in &mut self.tree.in_flight {
                task.remaining = (task.remaining - alloc.rate(task.id) * dt).max(0.0);
            }
            let mut admitted = admit_rate * dt;
            if next.kind == EventKind::MemFull {
                let mem = &self.tree.memory;
                admitted = mem.capacity - mem.active_fill.unwrap_or(mem.capacity);
            }
            if admitted > 0.0 {
                self.tree.memory.admit(admitted);
                run.admitted += admitted;
                let latency = if cap.is_finite() { 1.0 / cap } else { 0.0 };
                run.processing.push(LinearPiece { weight: admitted, lat_start: latency, lat_end: latency, t0: t, t1: tau });
            }
            if clients.is_none() {
                run.queue += (lambda - admit_rate) * dt;
                if next.kind == EventKind::QueueDrained || run.queue < 1e-9 * (1.0 + lambda) {
                    run.queue = run.queue.max(0.0);
                    if next.kind == EventKind::QueueDrained {
                        run.queue = 0.0;
                    }
                }
            }
            run.curve.push(tau, run.admitted);
            t = tau;

            // Fire everything due at t.
            match next.kind {
                EventKind::FlushDone => self.tree.memory.flush_remaining = Some(0.0),
                EventKind::MergeDone => {
                    if let Some(task) = self.tree.task_mut(next.id) {
                        task.remaining = 0.0;
                    }
                }
                _ => {}
            }
            self.fire_due(t, &mut run);
            if next.kind == EventKind::ArrivalSegmentBoundary {
                run.events.push(SimEvent { time: t, kind: EventKind::ArrivalSegmentBoundary, id: 0 });
            }
            if next.kind == EventKind::QueueDrained {
                run.events.push(SimEvent { time: t, kind: EventKind::QueueDrained, id: 0 });
            }
            run.sample(t, &self.tree);
            if t >= end {
                break;
            }
        }

        run.track_stall(end, None, clients.unwrap_or(1.0));
        run.events.push(SimEvent { time: end, kind: EventKind::End, id: 0 });

        let processing = LatencyDistribution::new(std::mem::take(&mut run.processing));
        let write = match &schedule {
            Some(s) => queue_account(s, &run.curve, end),
            None => processing.clone(),
        };
        let windows = measure_windows(&run.curve, window, 0.0, end);
        let latency = LatencyReport::new(write.summary(), processing.summary());
        Ok(Trace {
            config_echo: self.config_echo(arrivals, seed),
            events: run.events,
            windows,
            components: run.components,
            stalls: run.stalls,
            latency,
            detail: TraceDetail {
                duration: end,
                admissions: run.curve,
                arrivals: schedule,
                write_latency: write,
                processing_latency: processing,
                queue: run.queue_samples,
                final_tree: self.tree.clone(),
            },
        })
    }

    /// Apply every zero-time action: start flushes, create merges and admit
    /// queued writes into free memory.
    fn settle(&mut self, t: f64, run: &mut RunState, closed: bool) -> Result<()> {
        for _ in 0..ZERO_STEP_LIMIT {
            let mut changed = false;
            if self.tree.memory.flush_remaining.is_none() {
                if let Some(&front) = self.tree.memory.sealed.front() {
                    let size = self.flush_size(front);
                    self.tree.memory.flush_remaining = Some(size);
                    changed = true;
                }
            }
            if !self.policy.schedule(&mut self.tree, t).is_empty() {
                changed = true;
            }
            let (_, cap) = self.rates()?;
            if admit_writes(self.limit, &self.tree) == Admission::Open && cap.is_infinite() {
                let want = if closed { f64::INFINITY } else { run.queue };
                let take = want.min(self.tree.memory.free_capacity());
                if take > 0.0 {
                    self.tree.memory.admit(take);
                    run.admitted += take;
                    if !closed {
                        run.queue = (run.queue - take).max(0.0);
                    }
                    run.curve.push(t, run.admitted);
                    run.processing.push(LinearPiece::atom(t, take, 0.0));
                    changed = true;
                }
            }
            if !changed {
                return Ok(());
            }
        }
        Err(Error::Simulation(format!("zero-time actions do not settle at t={t}")))
    }

    fn fire_due(&mut self, t: f64, run: &mut RunState) {
        let mut done: Vec<TaskId> = self
            .tree
            .in_flight
            .iter()
            .filter(|task| task.remaining <= 1e-9 * task.input_total.max(1.0))
            .map(|task| task.id)
            .collect();
        done.sort_unstable();
        for id in done {
            let out = self.tree.complete_task(id, t, self.params.keyspace, SizeModel::Independent);
            run.events.push(SimEvent { time: t, kind: EventKind::MergeDone, id: out.first().copied().unwrap_or(id) });
        }

        let mem = &mut self.tree.memory;
        if mem.flush_remaining.is_some_and(|r| r <= 1e-9 * mem.capacity.max(1.0)) {
            let logical = mem.release_front().unwrap_or(0.0);
            let size = self.flush_size(logical);
            let id = self.tree.push_flushed(logical, size, t);
            run.events.push(SimEvent { time: t, kind: EventKind::FlushDone, id });
        }

        let mem = &mut self.tree.memory;
        if let Some(fill) = mem.active_fill {
            if fill >= mem.capacity * (1.0 - 1e-12) {
                mem.active_fill = Some(mem.capacity);
                mem.seal();
                run.events.push(SimEvent { time: t, kind: EventKind::MemFull, id: mem.sealed.len() as u64 });
            }
        }
    }
}

struct Next {
    time: f64,
    kind: EventKind,
    id: u64,
}

impl Next {
    fn new(time: f64, kind: EventKind, id: u64) -> Self {
        Self { time, kind, id }
    }

    fn offer(&mut self, time: f64, kind: EventKind, id: u64) {
        let better = time < self.time || (time == self.time && (kind, id) < (self.kind, self.id));
        if better {
            *self = Self { time, kind, id };
        }
    }
}

struct RunState {
    events: Vec<SimEvent>,
    components: Vec<ComponentSample>,
    stalls: Vec<StallInterval>,
    current_stall: Option<(f64, f64, StallCause)>,
    curve: CumulativeCurve,
    admitted: f64,
    queue: f64,
    queue_samples: Vec<(f64, f64)>,
    processing: Vec<LinearPiece>,
}

impl RunState {
    fn new() -> Self {
        Self {
            events: Vec::new(),
            components: Vec::new(),
            stalls: Vec::new(),
            current_stall: None,
            curve: CumulativeCurve::new(0.0),
            admitted: 0.0,
            queue: 0.0,
            queue_samples: Vec::new(),
            processing: Vec::new(),
        }
    }

    fn sample(&mut self, t: f64, tree: &TreeState) {
        let count = tree.total_components();
        if self.components.last().map_or(true, |s| s.component_count != count || s.time_s != t) {
            self.components.push(ComponentSample { time_s: t, component_count: count });
        }
        self.queue_samples.push((t, self.queue));
    }

    /// `(run_start, segment_start, cause)` for an ongoing stall. A stall
    /// that changes cause is split; the writer blocked by it accounts the
    /// whole run as processing time when it ends.
    fn track_stall(&mut self, t: f64, stall: Option<StallCause>, blocked: f64) {
        match (self.current_stall, stall) {
            (Some((_, _, c)), Some(cause)) if c == cause => {}
            (Some((run_start, seg_start, c)), Some(cause)) => {
                if t > seg_start {
                    self.stalls.push(StallInterval { start: seg_start, end: t, cause: c });
                }
                self.current_stall = Some((run_start, t, cause));
            }
            (Some((run_start, seg_start, c)), None) => {
                if t > seg_start {
                    self.stalls.push(StallInterval { start: seg_start, end: t, cause: c });
                }
                if t > run_start {
                    self.processing.push(LinearPiece::atom(t, blocked, t - run_start));
                    self.events.push(SimEvent { time: t, kind: EventKind::StallRelease, id: 0 });
                }
                self.current_stall = None;
            }
            (None, Some(cause)) => self.current_stall = Some((t, t, cause)),
            (None, None) => {}
        }
    }
}

/// Build, preload and run one simulation.
pub fn run_sim(
    params: &SimParams,
    policy: &PolicyConfig,
    sched: &SchedulerConfig,
    arrivals: &ArrivalProcess,
    seed: u64,
) -> Result<Trace> {
    let mut sim = Simulator::new(params, policy, sched)?;
    sim.preload()?;
    sim.run(arrivals, DEFAULT_WINDOW, seed)
}
