//! Merge schedulers: bandwidth allocation, component constraints and the
//! write-admission decision.
//!
//! Threads are not simulated; each scheduler is a rule for splitting the I/O
//! budget among live merges at a given instant.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{MergeTask, TaskId, TreeState};
use crate::policy::{MergePolicy, PolicyFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    SingleThreaded,
    Fair,
    Greedy,
    Blsm,
}

impl SchedulerKind {
    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::SingleThreaded => "single_threaded",
            SchedulerKind::Fair => "fair",
            SchedulerKind::Greedy => "greedy",
            SchedulerKind::Blsm => "blsm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::SingleThreaded, Self::Fair, Self::Greedy, Self::Blsm]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintScope {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WriteInteraction {
    AsFastAsPossible,
    RateLimit(f64),
}

impl WriteInteraction {
    pub fn cap(&self) -> f64 {
        match *self {
            WriteInteraction::AsFastAsPossible => f64::INFINITY,
            WriteInteraction::RateLimit(r) => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    pub constraint: ConstraintScope,
    /// Component limit: total for a global constraint, per level for a local
    /// one. `None` uses the policy default.
    pub max_components: Option<usize>,
    /// Level-0 stop threshold for partitioned leveling.
    pub l0_stop: usize,
    pub write_interaction: WriteInteraction,
    pub flush_priority: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            kind: SchedulerKind::Fair,
            constraint: ConstraintScope::Global,
            max_components: None,
            l0_stop: 12,
            write_interaction: WriteInteraction::AsFastAsPossible,
            flush_priority: true,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if let WriteInteraction::RateLimit(r) = self.write_interaction {
            if !(r > 0.0) {
                return Err(invalid("scheduler.write_limit must be > 0"));
            }
        }
        if self.max_components == Some(0) {
            return Err(invalid("scheduler.max_components must be >= 1"));
        }
        if self.l0_stop == 0 {
            return Err(invalid("scheduler.l0_stop must be >= 1"));
        }
        Ok(())
    }
}

/// A component constraint resolved against a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentLimit {
    Global(usize),
    PerLevel(usize),
    Level0(usize),
}

impl ComponentLimit {
    pub fn resolve(cfg: &SchedulerConfig, policy: &MergePolicy) -> Self {
        let t = policy.config.size_ratio as usize;
        let levels = policy.levels;
        match policy.family() {
            PolicyFamily::PartitionedLeveling => ComponentLimit::Level0(cfg.l0_stop),
            PolicyFamily::SizeTiered => ComponentLimit::Global(cfg.max_components.unwrap_or(50)),
            PolicyFamily::Leveling => match cfg.constraint {
                ConstraintScope::Global => ComponentLimit::Global(cfg.max_components.unwrap_or(2 * levels)),
                ConstraintScope::Local => ComponentLimit::PerLevel(cfg.max_components.unwrap_or(2)),
            },
            PolicyFamily::Tiering => match cfg.constraint {
                ConstraintScope::Global => {
                    ComponentLimit::Global(cfg.max_components.unwrap_or(2 * t * levels))
                }
                ConstraintScope::Local => ComponentLimit::PerLevel(cfg.max_components.unwrap_or(2 * t)),
            },
        }
    }

    pub fn violated(&self, tree: &TreeState) -> bool {
        match *self {
            ComponentLimit::Global(max) => tree.total_components() > max,
            ComponentLimit::PerLevel(max) => tree.levels.iter().any(|l| l.len() > max),
            ComponentLimit::Level0(stop) => tree.level_len(0) >= stop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StallCause {
    ComponentConstraint,
    MemoryFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Open,
    Stalled(StallCause),
}

/// Whether new writes may enter memory right now.
pub fn admit_writes(limit: ComponentLimit, tree: &TreeState) -> Admission {
    if limit.violated(tree) {
        Admission::Stalled(StallCause::ComponentConstraint)
    } else if tree.memory.is_full() {
        Admission::Stalled(StallCause::MemoryFull)
    } else {
        Admission::Open
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Allocation {
    pub rates: Vec<(TaskId, f64)>,
    pub flush_rate: f64,
}

impl Allocation {
    pub fn rate(&self, id: TaskId) -> f64 {
        self.rates.iter().find(|(t, _)| *t == id).map_or(0.0, |(_, r)| *r)
    }

    pub fn total(&self) -> f64 {
        self.flush_rate + self.rates.iter().map(|(_, r)| r).sum::<f64>()
    }
}

/// Task with the fewest remaining input entries; ties go to the lowest id.
pub fn greedy_reschedule(tasks: &[MergeTask]) -> Option<TaskId> {
    tasks
        .iter()
        .min_by(|a, b| a.remaining.total_cmp(&b.remaining).then(a.id.cmp(&b.id)))
        .map(|t| t.id)
}

fn oldest_task(tasks: &[MergeTask]) -> Option<TaskId> {
    tasks
        .iter()
        .min_by(|a, b| a.created_at.total_cmp(&b.created_at).then(a.id.cmp(&b.id)))
        .map(|t| t.id)
}

/// Split `bandwidth` between an optional flush and the live merges.
pub fn allocate(kind: SchedulerKind, flush_priority: bool, tasks: &[MergeTask], flush_active: bool, bandwidth: f64) -> Allocation {
    let mut alloc = Allocation::default();
    let mut left = bandwidth;
    if flush_active {
        alloc.flush_rate = if flush_priority || tasks.is_empty() {
            bandwidth
        } else {
            bandwidth / (tasks.len() + 1) as f64
        };
        left -= alloc.flush_rate;
    }
    if tasks.is_empty() || left <= 0.0 {
        alloc.rates = tasks.iter().map(|t| (t.id, 0.0)).collect();
        return alloc;
    }
    alloc.rates = match kind {
        SchedulerKind::Fair => {
            let share = left / tasks.len() as f64;
            tasks.iter().map(|t| (t.id, share)).collect()
        }
        SchedulerKind::Greedy | SchedulerKind::SingleThreaded => {
            let chosen = if kind == SchedulerKind::Greedy {
                greedy_reschedule(tasks)
            } else {
                oldest_task(tasks)
            };
            tasks
                .iter()
                .map(|t| (t.id, if Some(t.id) == chosen { left } else { 0.0 }))
                .collect()
        }
        SchedulerKind::Blsm => {
            let backlog: f64 = tasks.iter().map(|t| t.remaining).sum();
            tasks
                .iter()
                .map(|t| {
                    let share = if backlog > 0.0 { t.remaining / backlog } else { 1.0 / tasks.len() as f64 };
                    (t.id, left * share)
                })
                .collect()
        }
    };
    alloc
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlsmRates {
    pub write_cap: f64,
    pub allocation: Allocation,
}

/// Spring-and-gear coupling for a two-disk-level leveling tree.
///
/// For each level `i` with a live outgoing merge, the admitted write rate is
/// chosen so that the fill of the next level-`i` component reaches capacity
/// exactly when the outgoing merge finishes:
/// `(1 - fill_i) / write_cap * capacity_i == (1 - progress_i) * input_i / rate_i`.
pub fn blsm_rates(policy: &MergePolicy, tree: &TreeState, flush_active: bool, bandwidth: f64) -> Result<BlsmRates> {
    if policy.family() != PolicyFamily::Leveling || policy.levels != 2 {
        return Err(invalid("blsm scheduling needs a leveling tree with two disk levels"));
    }
    let allocation = allocate(SchedulerKind::Blsm, true, &tree.in_flight, flush_active, bandwidth);
    // Coupling uses the share a merge holds between flushes.
    let sustained = allocate(SchedulerKind::Blsm, true, &tree.in_flight, false, bandwidth);
    let mem = &tree.memory;
    let mut cap = bandwidth;

    let coupled = |task: &MergeTask, fill: f64, capacity: f64| -> f64 {
        let rate = sustained.rate(task.id);
        let left = 1.0 - task.progress();
        if fill >= 1.0 || rate <= 0.0 {
            return 0.0;
        }
        if left <= 0.0 {
            return f64::INFINITY;
        }
        capacity * (rate / task.input_total) * (1.0 - fill) / left
    };

    for task in &tree.in_flight {
        let stage = task.output_level - 1;
        let (fill, capacity) = if stage == 0 {
            let l0: f64 = tree.levels[0]
                .iter()
                .filter(|c| !task.inputs.contains(&c.id))
                .map(|c| c.logical_writes)
                .sum();
            let capacity = mem.capacity * mem.count as f64;
            ((mem.buffered() + l0) / capacity, capacity)
        } else {
            let pending: f64 = tree.levels[..=stage]
                .iter()
                .flatten()
                .filter(|c| !task.inputs.contains(&c.id))
                .map(|c| c.logical_writes)
                .sum();
            let capacity = policy.level_cap(stage);
            ((pending + mem.buffered()) / capacity, capacity)
        };
        cap = cap.min(coupled(task, fill, capacity));
    }
    Ok(BlsmRates { write_cap: cap.max(0.0), allocation })
}
