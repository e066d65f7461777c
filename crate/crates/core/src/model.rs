//! LSM structure and the expected-size arithmetic used to size flushes and
//! merge outputs.
//!
//! Keys live on the continuous interval `[0, 1)`. A component over a key
//! interval of width `w` can hold at most `U * w` distinct entries, and its
//! entries are assumed to be spread uniformly over the interval. All sizes are
//! real-valued expected entry counts.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type ComponentId = u64;
pub type TaskId = u64;

/// Half-open key interval inside `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyInterval {
    pub start: f64,
    pub end: f64,
}

impl KeyInterval {
    pub const FULL: KeyInterval = KeyInterval { start: 0.0, end: 1.0 };

    pub fn new(start: f64, end: f64) -> Self {
        debug_assert!(start <= end, "inverted interval [{start}, {end})");
        Self { start, end }
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }

    pub fn overlaps(&self, other: &KeyInterval) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn hull(&self, other: &KeyInterval) -> KeyInterval {
        KeyInterval::new(self.start.min(other.start), self.end.max(other.end))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KeyDistribution {
    Uniform,
    Zipf(f64),
}

/// Workload and device parameters. Sizes are in entries, rates in entries/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub entry_size: u64,
    pub mem_component_size: f64,
    pub mem_component_count: usize,
    pub bandwidth: f64,
    pub keyspace: f64,
    pub key_distribution: KeyDistribution,
    pub dataset_size: f64,
    /// Periodic force interval in bytes. Accepted and echoed; the kernel does
    /// not model device flush behaviour.
    pub force_interval_bytes: u64,
}

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;

impl Default for SimParams {
    fn default() -> Self {
        let entry_size = KIB;
        Self {
            entry_size,
            mem_component_size: (128 * MIB / entry_size) as f64,
            mem_component_count: 2,
            bandwidth: (100 * MIB / entry_size) as f64,
            keyspace: 100_000_000.0,
            key_distribution: KeyDistribution::Uniform,
            dataset_size: 100_000_000.0,
            force_interval_bytes: 16 * MIB,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if self.entry_size == 0 {
            return Err(invalid("sim.entry_size must be > 0"));
        }
        if !(self.mem_component_size > 0.0) {
            return Err(invalid("sim.mem_component_size must be > 0"));
        }
        if self.mem_component_count < 1 {
            return Err(invalid("sim.mem_component_count must be >= 1"));
        }
        if !(self.bandwidth > 0.0) {
            return Err(invalid("sim.bandwidth must be > 0"));
        }
        if !(self.keyspace >= 1.0) {
            return Err(invalid("sim.keyspace must be >= 1"));
        }
        if !(self.dataset_size >= 0.0) {
            return Err(invalid("sim.dataset_size must be >= 0"));
        }
        if let KeyDistribution::Zipf(s) = self.key_distribution {
            if !(s >= 0.0) {
                return Err(invalid("zipf exponent must be >= 0"));
            }
        }
        Ok(())
    }

    /// Bytes to entries.
    pub fn entries(&self, bytes: u64) -> f64 {
        bytes as f64 / self.entry_size as f64
    }

    /// Distinct entries produced by flushing `writes` coalesced in memory.
    pub fn flush_size(&self, writes: f64) -> f64 {
        match self.key_distribution {
            KeyDistribution::Uniform => distinct_draws(writes, self.keyspace),
            KeyDistribution::Zipf(s) => zipf_distinct_unchecked(writes, self.keyspace as u64, s),
        }
    }
}

/// Expected number of distinct keys after `n` uniform draws over `k` keys.
pub fn draws_distinct(n: f64, k: f64) -> Result<f64> {
    if !(k >= 1.0) {
        return Err(Error::Domain(format!("keyspace must be >= 1, got {k}")));
    }
    if !(n >= 0.0) {
        return Err(Error::Domain(format!("draw count must be >= 0, got {n}")));
    }
    Ok(distinct_draws(n, k))
}

pub(crate) fn distinct_draws(n: f64, k: f64) -> f64 {
    if n <= 0.0 {
        return 0.0;
    }
    if k <= 1.0 {
        return 1.0;
    }
    // k * (1 - (1 - 1/k)^n), evaluated without cancellation.
    let out = -k * (n * (-1.0 / k).ln_1p()).exp_m1();
    out.min(n).min(k)
}

/// Expected size of the union of independent uniformly random subsets with
/// the given sizes, drawn from `k` keys.
pub fn union_distinct(sizes: &[f64], k: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::Domain(format!("keyspace must be > 0, got {k}")));
    }
    for &d in sizes {
        if !(0.0..=k).contains(&d) {
            return Err(Error::Domain(format!("input size {d} outside [0, {k}]")));
        }
    }
    Ok(union_of(sizes.iter().copied(), k))
}

pub(crate) fn union_of(sizes: impl IntoIterator<Item = f64>, k: f64) -> f64 {
    if k <= 0.0 {
        return 0.0;
    }
    let log_missing: f64 = sizes
        .into_iter()
        .map(|d| (-(d / k).clamp(0.0, 1.0)).ln_1p())
        .sum();
    -k * log_missing.exp_m1()
}

/// Expected distinct keys after `n` draws from a Zipf(`s`) distribution over
/// `u` ranked keys.
pub fn zipf_distinct(n: f64, u: u64, s: f64) -> Result<f64> {
    if u < 1 {
        return Err(Error::Domain("keyspace must be >= 1".into()));
    }
    if !(n >= 0.0) || !(s >= 0.0) {
        return Err(Error::Domain(format!("invalid zipf arguments n={n}, s={s}")));
    }
    Ok(zipf_distinct_unchecked(n, u, s))
}

fn zipf_distinct_unchecked(n: f64, u: u64, s: f64) -> f64 {
    if n <= 0.0 {
        return 0.0;
    }
    if s == 0.0 {
        return distinct_draws(n, u as f64);
    }
    let norm: f64 = (1..=u).map(|k| (k as f64).powf(-s)).sum();
    (1..=u)
        .map(|k| {
            let p = (k as f64).powf(-s) / norm;
            -(n * (-p).ln_1p()).exp_m1()
        })
        .sum()
}

/// Index range of the files in `files` whose intervals intersect `query`.
/// `files` must be sorted by start and pairwise disjoint, so the result is a
/// contiguous run.
pub fn overlapping_files(query: &KeyInterval, files: &[DiskComponent]) -> Range<usize> {
    let first = files.partition_point(|f| f.interval.end <= query.start);
    let last = first + files[first..].partition_point(|f| f.interval.start < query.end);
    first..last
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiskComponent {
    pub id: ComponentId,
    pub level: usize,
    pub logical_writes: f64,
    pub size: f64,
    pub interval: KeyInterval,
    pub created_at: f64,
    pub merging: bool,
}

impl DiskComponent {
    /// Fraction of the keys in this component's interval that are present.
    fn density(&self, keyspace: f64) -> f64 {
        let capacity = keyspace * self.interval.width();
        if capacity > 0.0 {
            (self.size / capacity).min(1.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTask {
    pub id: TaskId,
    pub inputs: Vec<ComponentId>,
    pub input_total: f64,
    pub remaining: f64,
    pub output_level: usize,
    pub output_interval: KeyInterval,
    /// Maximum entries per output file; `None` produces a single component.
    pub file_max: Option<f64>,
    pub created_at: f64,
}

impl MergeTask {
    pub fn progress(&self) -> f64 {
        if self.input_total > 0.0 {
            1.0 - self.remaining / self.input_total
        } else {
            1.0
        }
    }
}

/// How a merge output's size is derived from its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeModel {
    /// Inputs are independent random key subsets (updates).
    Independent,
    /// Inputs hold disjoint keys (bulk insert of unique records).
    Disjoint,
}

/// Memory components: one active buffer plus sealed buffers awaiting flush.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub capacity: f64,
    pub count: usize,
    /// Fill of the active component; `None` when every component is sealed.
    pub active_fill: Option<f64>,
    /// Logical writes held by each sealed component, oldest first. The front
    /// one is being flushed when `flush_remaining` is set.
    pub sealed: VecDeque<f64>,
    pub flush_remaining: Option<f64>,
}

impl MemoryState {
    pub fn new(capacity: f64, count: usize) -> Self {
        Self {
            capacity,
            count,
            active_fill: Some(0.0),
            sealed: VecDeque::new(),
            flush_remaining: None,
        }
    }

    pub fn is_full(&self) -> bool {
        self.active_fill.is_none()
    }

    /// Writes that can be buffered right now without waiting for a flush.
    pub fn free_capacity(&self) -> f64 {
        match self.active_fill {
            None => 0.0,
            Some(fill) => {
                let spare = self.count - self.sealed.len() - 1;
                (self.capacity - fill) + spare as f64 * self.capacity
            }
        }
    }

    /// Buffer up to `amount` writes, sealing full components. Returns the
    /// amount accepted.
    pub fn admit(&mut self, amount: f64) -> f64 {
        let mut left = amount;
        while left > 0.0 {
            let Some(fill) = self.active_fill else { break };
            let room = self.capacity - fill;
            if left < room {
                self.active_fill = Some(fill + left);
                left = 0.0;
            } else {
                left -= room;
                self.active_fill = Some(self.capacity);
                self.seal();
            }
        }
        amount - left
    }

    /// Seal the active component and open a fresh one if any is free.
    pub fn seal(&mut self) {
        if let Some(fill) = self.active_fill.take() {
            self.sealed.push_back(fill);
            if self.sealed.len() < self.count {
                self.active_fill = Some(0.0);
            }
        }
    }

    /// Drop the flushed front component and reopen an active one if needed.
    pub fn release_front(&mut self) -> Option<f64> {
        let done = self.sealed.pop_front();
        self.flush_remaining = None;
        if self.active_fill.is_none() && self.sealed.len() < self.count {
            self.active_fill = Some(0.0);
        }
        done
    }

    pub fn buffered(&self) -> f64 {
        self.active_fill.unwrap_or(0.0) + self.sealed.iter().sum::<f64>()
    }
}

/// Full LSM structure.
///
/// `levels[0]` holds flushed components oldest first. Size-tiered trees keep
/// every component in `levels[0]` in age order. Partitioned levels `>= 1` are
/// sorted by interval start and pairwise disjoint; other levels are in age
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeState {
    pub levels: Vec<Vec<DiskComponent>>,
    pub partitioned: bool,
    pub cursors: Vec<f64>,
    pub in_flight: Vec<MergeTask>,
    pub memory: MemoryState,
    next_component: ComponentId,
    next_task: TaskId,
}

impl TreeState {
    pub fn new(memory: MemoryState, partitioned: bool) -> Self {
        Self {
            levels: vec![Vec::new()],
            partitioned,
            cursors: Vec::new(),
            in_flight: Vec::new(),
            memory,
            next_component: 0,
            next_task: 0,
        }
    }

    pub fn total_components(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.levels.get(level).map_or(0, Vec::len)
    }

    pub fn level_size(&self, level: usize) -> f64 {
        self.levels.get(level).map_or(0.0, |l| l.iter().map(|c| c.size).sum())
    }

    pub fn ensure_level(&mut self, level: usize) {
        while self.levels.len() <= level {
            self.levels.push(Vec::new());
        }
        while self.cursors.len() <= level {
            self.cursors.push(0.0);
        }
    }

    pub fn find(&self, id: ComponentId) -> Option<&DiskComponent> {
        self.levels.iter().flatten().find(|c| c.id == id)
    }

    fn find_mut(&mut self, id: ComponentId) -> Option<&mut DiskComponent> {
        self.levels.iter_mut().flatten().find(|c| c.id == id)
    }

    pub fn task(&self, id: TaskId) -> Option<&MergeTask> {
        self.in_flight.iter().find(|t| t.id == id)
    }

    pub fn task_mut(&mut self, id: TaskId) -> Option<&mut MergeTask> {
        self.in_flight.iter_mut().find(|t| t.id == id)
    }

    /// Append a freshly flushed component at level 0.
    pub fn push_flushed(&mut self, logical: f64, size: f64, now: f64) -> ComponentId {
        let id = self.alloc_component();
        self.levels[0].push(DiskComponent {
            id,
            level: 0,
            logical_writes: logical,
            size,
            interval: KeyInterval::FULL,
            created_at: now,
            merging: false,
        });
        id
    }

    fn alloc_component(&mut self) -> ComponentId {
        let id = self.next_component;
        self.next_component += 1;
        id
    }

    /// Build (but do not register) a merge task over `inputs`.
    pub fn plan_task(
        &mut self,
        inputs: Vec<ComponentId>,
        output_level: usize,
        file_max: Option<f64>,
        now: f64,
    ) -> MergeTask {
        let mut total = 0.0;
        let mut interval: Option<KeyInterval> = None;
        for id in &inputs {
            let c = self.find(*id).expect("merge input must exist");
            debug_assert!(!c.merging, "component {id} already merging");
            total += c.size;
            interval = Some(interval.map_or(c.interval, |i| i.hull(&c.interval)));
        }
        let id = self.next_task;
        self.next_task += 1;
        MergeTask {
            id,
            inputs,
            input_total: total,
            remaining: total,
            output_level,
            output_interval: interval.unwrap_or(KeyInterval::FULL),
            file_max,
            created_at: now,
        }
    }

    /// Register a planned task and mark its inputs as merging.
    pub fn begin_task(&mut self, task: MergeTask) {
        for id in &task.inputs {
            let c = self.find_mut(*id).expect("merge input must exist");
            assert!(!c.merging, "component {id} claimed by two merges");
            c.merging = true;
        }
        self.ensure_level(task.output_level);
        self.in_flight.push(task);
    }

    /// Remove a finished task, replace its inputs with the merge output and
    /// return the ids of the new components.
    pub fn complete_task(
        &mut self,
        task_id: TaskId,
        now: f64,
        keyspace: f64,
        model: SizeModel,
    ) -> Vec<ComponentId> {
        let pos = self
            .in_flight
            .iter()
            .position(|t| t.id == task_id)
            .expect("completing unknown task");
        let task = self.in_flight.remove(pos);

        // Pull inputs out, remembering where same-level inputs sat.
        let mut inputs = Vec::with_capacity(task.inputs.len());
        let mut slot: Option<usize> = None;
        for id in &task.inputs {
            for (lvl, comps) in self.levels.iter_mut().enumerate() {
                if let Some(i) = comps.iter().position(|c| c.id == *id) {
                    if lvl == task.output_level {
                        slot = Some(slot.map_or(i, |s: usize| s.min(i)));
                    }
                    inputs.push(comps.remove(i));
                    break;
                }
            }
        }

        let pieces = merge_pieces(&inputs, &task.output_interval, keyspace, model);
        let outputs = split_output(&pieces, task.file_max);
        let level = task.output_level;
        self.ensure_level(level);

        let mut ids = Vec::with_capacity(outputs.len());
        let mut fresh = Vec::with_capacity(outputs.len());
        for (interval, logical, size) in outputs {
            let id = self.alloc_component();
            ids.push(id);
            fresh.push(DiskComponent {
                id,
                level,
                logical_writes: logical,
                size,
                interval,
                created_at: now,
                merging: false,
            });
        }

        let comps = &mut self.levels[level];
        if self.partitioned && level >= 1 {
            let at = comps.partition_point(|c| c.interval.start < fresh[0].interval.start);
            comps.splice(at..at, fresh);
        } else if let Some(at) = slot {
            comps.splice(at..at, fresh);
        } else {
            comps.extend(fresh);
        }
        ids
    }

    /// Ids of every component claimed by a live merge.
    pub fn merging_ids(&self) -> impl Iterator<Item = ComponentId> + '_ {
        self.in_flight.iter().flat_map(|t| t.inputs.iter().copied())
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for id in self.merging_ids() {
            if !seen.insert(id) {
                return Err(format!("component {id} in two merges"));
            }
            match self.find(id) {
                Some(c) if c.merging => {}
                Some(_) => return Err(format!("component {id} in a merge but not flagged")),
                None => return Err(format!("merge input {id} missing")),
            }
        }
        for c in self.levels.iter().flatten() {
            if c.merging && !seen.contains(&c.id) {
                return Err(format!("component {} flagged but in no merge", c.id));
            }
            if !(c.size > 0.0) || c.size > c.logical_writes * (1.0 + 1e-9) {
                return Err(format!("component {} has size {} logical {}", c.id, c.size, c.logical_writes));
            }
        }
        if self.partitioned {
            for (lvl, files) in self.levels.iter().enumerate().skip(1) {
                for pair in files.windows(2) {
                    if pair[0].interval.end > pair[1].interval.start + 1e-12 {
                        return Err(format!("level {lvl} files overlap"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One elementary key range of a merge output.
#[derive(Debug, Clone, Copy)]
struct Piece {
    interval: KeyInterval,
    logical: f64,
    size: f64,
}

fn merge_pieces(
    inputs: &[DiskComponent],
    span: &KeyInterval,
    keyspace: f64,
    model: SizeModel,
) -> Vec<Piece> {
    let mut cuts: Vec<f64> = vec![span.start, span.end];
    for c in inputs {
        for x in [c.interval.start, c.interval.end] {
            if x > span.start && x < span.end {
                cuts.push(x);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    cuts.windows(2)
        .map(|w| {
            let interval = KeyInterval::new(w[0], w[1]);
            let width = interval.width();
            let k = keyspace * width;
            let mut logical = 0.0;
            let mut sizes = Vec::with_capacity(inputs.len());
            for c in inputs.iter().filter(|c| c.interval.overlaps(&interval)) {
                let share = width / c.interval.width();
                logical += c.logical_writes * share;
                sizes.push(c.density(keyspace) * k);
            }
            let size = match model {
                SizeModel::Independent => union_of(sizes, k),
                SizeModel::Disjoint => sizes.iter().sum::<f64>().min(k),
            };
            Piece { interval, logical, size }
        })
        .collect()
}

/// Cut the output into files of at most `file_max` entries, splitting inside
/// pieces proportionally to key width.
fn split_output(pieces: &[Piece], file_max: Option<f64>) -> Vec<(KeyInterval, f64, f64)> {
    let whole = |ps: &[Piece]| {
        let interval = KeyInterval::new(ps[0].interval.start, ps[ps.len() - 1].interval.end);
        (
            interval,
            ps.iter().map(|p| p.logical).sum::<f64>(),
            ps.iter().map(|p| p.size).sum::<f64>(),
        )
    };
    let Some(limit) = file_max else {
        return vec![whole(pieces)];
    };

    let mut files = Vec::new();
    let mut start = pieces[0].interval.start;
    let (mut logical, mut size) = (0.0, 0.0);
    for p in pieces {
        let mut at = p.interval.start;
        let width = p.interval.width();
        let density = if width > 0.0 { p.size / width } else { 0.0 };
        let logical_density = if width > 0.0 { p.logical / width } else { 0.0 };
        let mut left = p.size;
        while size + left >= limit && density > 0.0 {
            let take = limit - size;
            let cut = (at + take / density).min(p.interval.end);
            logical += logical_density * (cut - at);
            files.push((KeyInterval::new(start, cut), logical, limit));
            left -= take;
            start = cut;
            at = cut;
            logical = 0.0;
            size = 0.0;
        }
        size += left.max(0.0);
        logical += logical_density * (p.interval.end - at);
    }
    let end = pieces[pieces.len() - 1].interval.end;
    if size > limit * 1e-9 || files.is_empty() {
        files.push((KeyInterval::new(start, end), logical, size));
    } else if let Some(last) = files.last_mut() {
        // Absorb a vanishing remainder into the previous file.
        last.0.end = end;
        last.1 += logical;
        last.2 += size;
    }
    files
}
