//! Brute-force and Monte-Carlo references for the analytic kernel.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::latency::LatencyDistribution;
use crate::model::{KeyDistribution, KeyInterval, MergeTask};
use crate::scheduler::{allocate, SchedulerKind};
use crate::workload::ArrivalSchedule;

pub const MAX_BRUTE_FORCE_MERGES: usize = 6;
pub const MAX_REFERENCE_WRITES: usize = 1_000_000;
pub const MIN_TRIALS: usize = 10_000;
/// Two-sided 99% normal quantile.
const Z99: f64 = 2.576;

/// Disk component count over time; a step function starting at the first
/// breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleCurve {
    pub breakpoints: Vec<(f64, u64)>,
}

impl ScheduleCurve {
    pub fn count_at(&self, t: f64) -> u64 {
        let idx = self.breakpoints.partition_point(|&(bt, _)| bt <= t);
        self.breakpoints[idx.saturating_sub(1)].1
    }

    /// Times at which the count drops, in order.
    pub fn completion_times(&self) -> Vec<f64> {
        self.breakpoints.iter().skip(1).map(|&(t, _)| t).collect()
    }

    /// True when this curve never lies above `other`.
    pub fn dominates(&self, other: &ScheduleCurve) -> bool {
        let mine = self.completion_times();
        let theirs = other.completion_times();
        mine.len() >= theirs.len() && mine.iter().zip(&theirs).all(|(a, b)| a <= b)
    }
}

/// A merge whose size is a whole number of work units. `after` names a merge
/// that must complete before this one exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticMerge {
    pub size: u64,
    pub after: Option<usize>,
}

impl StaticMerge {
    pub fn new(size: u64) -> Self {
        Self { size, after: None }
    }
}

/// Points at which a preemptive schedule may switch merges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub uniform_points: u64,
    /// Add every time at which some set of merges could finish back to back.
    pub completion_candidates: bool,
}

impl Default for Grid {
    fn default() -> Self {
        Self { uniform_points: 64, completion_candidates: true }
    }
}

type Ticks = Vec<u64>;

struct Enumerator<'a> {
    merges: &'a [StaticMerge],
    grid: Vec<u64>,
    /// Pointwise-minimal complete curves found so far.
    found: Vec<Ticks>,
    /// Interleavings that reach the same state with the same history.
    visited: HashSet<(Vec<u64>, Ticks)>,
}

fn weakly_below(a: &[u64], b: &[u64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

impl Enumerator<'_> {
    fn available(&self, remaining: &[u64], i: usize) -> bool {
        remaining[i] > 0 && self.merges[i].after.map_or(true, |d| remaining[d] == 0)
    }

    fn record(&mut self, curve: Ticks) {
        if self.found.iter().any(|f| weakly_below(f, &curve)) {
            return;
        }
        self.found.retain(|f| !weakly_below(&curve, f));
        self.found.push(curve);
    }

    /// Completing any `j` more merges takes at least the `j` smallest
    /// remaining amounts of work, so this curve bounds every continuation.
    fn lower_bound(prefix: &[u64], remaining: &[u64], now: u64) -> Ticks {
        let mut open: Vec<u64> = remaining.iter().copied().filter(|&r| r > 0).collect();
        open.sort_unstable();
        let mut bound = prefix.to_vec();
        let mut t = now;
        for r in open {
            t += r;
            bound.push(t);
        }
        bound
    }

    fn search(&mut self, remaining: &mut Vec<u64>, prefix: &mut Ticks, now: u64) {
        if remaining.iter().all(|&r| r == 0) {
            self.record(prefix.clone());
            return;
        }
        if !self.visited.insert((remaining.clone(), prefix.clone())) {
            return;
        }
        let bound = Self::lower_bound(prefix, remaining, now);
        if self.found.iter().any(|f| weakly_below(f, &bound)) {
            return;
        }
        let next = self.grid.iter().copied().find(|&g| g > now).unwrap_or(u64::MAX);
        let mut order: Vec<usize> = (0..remaining.len()).filter(|&i| self.available(remaining, i)).collect();
        // Shortest first finds tight curves early; the order does not affect the result.
        order.sort_by_key(|&i| (remaining[i], i));
        for i in order {
            let step = remaining[i].min(next - now);
            remaining[i] -= step;
            let finished = remaining[i] == 0;
            if finished {
                prefix.push(now + step);
            }
            self.search(remaining, prefix, now + step);
            if finished {
                prefix.pop();
            }
            remaining[i] += step;
        }
    }
}

/// Every pointwise-minimal component curve reachable by a single-stream
/// schedule that may switch merges only at grid points or completions.
/// Any other achievable curve on the grid lies on or above one of these.
pub fn brute_force_curves(
    merges: &[StaticMerge],
    bandwidth: f64,
    initial_components: u64,
    grid: Grid,
) -> Result<Vec<ScheduleCurve>> {
    if merges.len() > MAX_BRUTE_FORCE_MERGES {
        return Err(Error::SizeLimit(format!(
            "{} merges exceed the enumeration limit of {MAX_BRUTE_FORCE_MERGES}",
            merges.len()
        )));
    }
    if !(bandwidth > 0.0) || grid.uniform_points == 0 {
        return Err(invalid("bandwidth and grid resolution must be positive"));
    }
    if (initial_components as usize) < merges.len() {
        return Err(invalid("each merge must remove a component"));
    }
    for (i, m) in merges.iter().enumerate() {
        if m.size == 0 || m.after.is_some_and(|d| d >= merges.len() || d == i) {
            return Err(invalid(format!("merge {i} is malformed")));
        }
    }
    let scale = grid.uniform_points;
    let scaled: Vec<u64> = merges.iter().map(|m| m.size * scale).collect();
    let total: u64 = merges.iter().map(|m| m.size).sum();
    let mut points: Vec<u64> = (1..=scale).map(|k| k * total).collect();
    if grid.completion_candidates {
        for mask in 1u32..(1 << merges.len()) {
            points.push((0..merges.len()).filter(|i| mask >> i & 1 == 1).map(|i| scaled[i]).sum());
        }
    }
    points.sort_unstable();
    points.dedup();

    let mut en = Enumerator { merges, grid: points, found: Vec::new(), visited: HashSet::new() };
    let mut remaining = scaled;
    en.search(&mut remaining, &mut Vec::new(), 0);
    let mut ticks = en.found;
    ticks.sort();
    let per_tick = 1.0 / (scale as f64 * bandwidth);
    Ok(ticks
        .iter()
        .map(|c| {
            let mut breakpoints = vec![(0.0, initial_components)];
            breakpoints.extend(c.iter().enumerate().map(|(k, &t)| (t as f64 * per_tick, initial_components - k as u64 - 1)));
            ScheduleCurve { breakpoints }
        })
        .collect())
}

/// Component curve produced by a kernel scheduler on a static set of merges
/// with no flushes.
pub fn scheduler_curve(kind: SchedulerKind, merges: &[StaticMerge], bandwidth: f64, initial_components: u64) -> ScheduleCurve {
    let mut remaining: Vec<f64> = merges.iter().map(|m| m.size as f64).collect();
    let mut created = vec![0.0; merges.len()];
    let mut done = vec![false; merges.len()];
    let mut now = 0.0;
    let mut breakpoints = vec![(0.0, initial_components)];
    while done.iter().any(|d| !d) {
        let tasks: Vec<MergeTask> = (0..merges.len())
            .filter(|&i| !done[i] && merges[i].after.map_or(true, |d| done[d]))
            .map(|i| MergeTask {
                id: i as u64,
                inputs: Vec::new(),
                input_total: merges[i].size as f64,
                remaining: remaining[i],
                output_level: 0,
                output_interval: KeyInterval::new(0.0, 1.0),
                file_max: None,
                created_at: created[i],
            })
            .collect();
        let alloc = allocate(kind, true, &tasks, false, bandwidth);
        let (dt, _) = tasks
            .iter()
            .map(|t| (t.remaining / alloc.rate(t.id), t.id))
            .filter(|(dt, _)| dt.is_finite())
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
        now += dt;
        for t in &tasks {
            let i = t.id as usize;
            remaining[i] -= alloc.rate(t.id) * dt;
            if remaining[i] <= 1e-9 * merges[i].size as f64 {
                done[i] = true;
                breakpoints.push((now, breakpoints.last().unwrap().1 - 1));
                for (j, m) in merges.iter().enumerate() {
                    if m.after == Some(i) {
                        created[j] = now;
                    }
                }
            }
        }
    }
    ScheduleCurve { breakpoints }
}

/// Mean distinct keys among `n` independent draws over `u` keys, with the
/// 99% confidence half-width of that mean.
pub fn mc_distinct(n: u64, u: u64, dist: KeyDistribution, seed: u64, trials: usize) -> Result<(f64, f64)> {
    if trials < MIN_TRIALS {
        return Err(invalid(format!("at least {MIN_TRIALS} trials are required")));
    }
    if u == 0 {
        return Err(invalid("keyspace must be nonempty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = match dist {
        KeyDistribution::Uniform => Vec::new(),
        KeyDistribution::Zipf(s) => (1..=u).map(|k| (k as f64).powf(-s)).collect(),
    };
    let zipf = if weights.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(&weights).map_err(|e| invalid(e.to_string()))?)
    };
    let mut seen = vec![u32::MAX; u as usize];
    let samples = (0..trials).map(|trial| {
        let mut distinct = 0u64;
        for _ in 0..n {
            let key = match &zipf {
                Some(w) => w.sample(&mut rng),
                None => rng.gen_range(0..u as usize),
            };
            if seen[key] != trial as u32 {
                seen[key] = trial as u32;
                distinct += 1;
            }
        }
        distinct as f64
    });
    Ok(mean_half_width(samples, trials))
}

/// Mean size of the union of independent uniformly random subsets of `k`
/// keys with the given sizes.
pub fn mc_union(sizes: &[u64], k: u64, seed: u64, trials: usize) -> Result<(f64, f64)> {
    if trials < MIN_TRIALS {
        return Err(invalid(format!("at least {MIN_TRIALS} trials are required")));
    }
    if sizes.iter().any(|&s| s > k) {
        return Err(invalid("subset larger than the keyspace"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = vec![u32::MAX; k as usize];
    let samples = (0..trials).map(|trial| {
        let mut distinct = 0u64;
        for &s in sizes {
            for key in sample(&mut rng, k as usize, s as usize) {
                if seen[key] != trial as u32 {
                    seen[key] = trial as u32;
                    distinct += 1;
                }
            }
        }
        distinct as f64
    });
    Ok(mean_half_width(samples, trials))
}

fn mean_half_width(samples: impl Iterator<Item = f64>, trials: usize) -> (f64, f64) {
    // Welford's update keeps the variance stable for large counts.
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, x) in samples.enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    let sd = (m2 / (trials - 1) as f64).sqrt();
    (mean, Z99 * sd / (trials as f64).sqrt())
}

/// Arrival times of individual writes: within each segment, write `k`
/// arrives at `start + (k + 0.5) / rate`.
pub fn write_arrivals(arrivals: &ArrivalSchedule) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for seg in &arrivals.segments {
        if seg.rate <= 0.0 {
            continue;
        }
        let count = ((seg.end - seg.start) * seg.rate + 1e-9).floor() as usize;
        if out.len() + count > MAX_REFERENCE_WRITES {
            return Err(Error::SizeLimit(format!("more than {MAX_REFERENCE_WRITES} writes")));
        }
        out.extend((0..count).map(|k| seg.start + (k as f64 + 0.5) / seg.rate));
    }
    Ok(out)
}

/// Latency of every write when each is admitted in FIFO order as soon as no
/// stall is in effect.
pub fn per_write_reference(arrivals: &ArrivalSchedule, stalls: &[(f64, f64)]) -> Result<Vec<f64>> {
    let mut stalls = stalls.to_vec();
    stalls.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut prev = f64::NEG_INFINITY;
    Ok(write_arrivals(arrivals)?
        .into_iter()
        .map(|t| {
            let mut done = t.max(prev);
            for &(a, b) in &stalls {
                if a <= done && done < b {
                    done = b;
                }
            }
            prev = done;
            done - t
        })
        .collect())
}

/// Empirical quantiles at `(i + 0.5) / n`, paired with the sorted samples.
pub fn aligned_quantiles(latencies: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = latencies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted.into_iter().enumerate().map(|(i, l)| ((i as f64 + 0.5) / n, l)).collect()
}

/// Largest gap between aligned quantiles of `reference` and of `dist`
/// evaluated at the same write arrival times.
pub fn max_quantile_error(arrivals: &ArrivalSchedule, dist: &LatencyDistribution, reference: &[f64]) -> Result<f64> {
    let times = write_arrivals(arrivals)?;
    if times.len() != reference.len() {
        return Err(invalid("reference does not cover the arrival schedule"));
    }
    let analytic: Vec<f64> = times.iter().map(|&t| dist.latency_at(t).unwrap_or(0.0)).collect();
    let a = aligned_quantiles(&analytic);
    let r = aligned_quantiles(reference);
    Ok(a.iter().zip(&r).map(|(x, y)| (x.1 - y.1).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::{admission_with_stalls, queue_account};
    use crate::model::{draws_distinct, union_distinct, zipf_distinct};
    use crate::workload::Segment;

    fn sizes(s: &[u64]) -> Vec<StaticMerge> {
        s.iter().map(|&x| StaticMerge::new(x)).collect()
    }

    #[test]
    fn equal_merges_tie() {
        let curves = brute_force_curves(&sizes(&[2, 2]), 1.0, 2, Grid::default()).unwrap();
        assert_eq!(curves.len(), 1);
        assert_eq!(curves[0].completion_times(), vec![2.0, 4.0]);
        let greedy = scheduler_curve(SchedulerKind::Greedy, &sizes(&[2, 2]), 1.0, 2);
        assert_eq!(greedy, curves[0]);
    }

    #[test]
    fn greedy_is_minimal_for_three_merges() {
        let m = sizes(&[2, 5, 9]);
        let curves = brute_force_curves(&m, 100.0, 3, Grid::default()).unwrap();
        let greedy = scheduler_curve(SchedulerKind::Greedy, &m, 100.0, 3);
        assert!(curves.iter().all(|c| greedy.dominates(c)));
        assert!(curves.contains(&greedy));
    }

    #[test]
    fn fair_is_dominated_by_greedy() {
        let m = sizes(&[1, 3]);
        let fair = scheduler_curve(SchedulerKind::Fair, &m, 1.0, 2);
        let greedy = scheduler_curve(SchedulerKind::Greedy, &m, 1.0, 2);
        assert_eq!(fair.completion_times(), vec![2.0, 4.0]);
        assert!(greedy.dominates(&fair) && !fair.dominates(&greedy));
    }

    #[test]
    fn too_many_merges_rejected() {
        let m = sizes(&[1; 7]);
        assert!(matches!(brute_force_curves(&m, 1.0, 7, Grid::default()), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn dependent_merge_waits() {
        let m = vec![StaticMerge::new(5), StaticMerge { size: 1, after: Some(0) }];
        let curves = brute_force_curves(&m, 1.0, 3, Grid::default()).unwrap();
        assert_eq!(curves.len(), 1);
        assert_eq!(curves[0].completion_times(), vec![5.0, 6.0]);
        assert_eq!(curves[0].count_at(5.5), 2);
    }

    #[test]
    fn mc_trivial_counts() {
        assert_eq!(mc_distinct(0, 9, KeyDistribution::Uniform, 1, MIN_TRIALS).unwrap(), (0.0, 0.0));
        assert_eq!(mc_distinct(1, 9, KeyDistribution::Zipf(1.0), 1, MIN_TRIALS).unwrap(), (1.0, 0.0));
        assert!(mc_distinct(2, 4, KeyDistribution::Uniform, 1, 10).is_err());
    }

    #[test]
    fn mc_agrees_with_closed_forms() {
        let (m, h) = mc_distinct(2, 4, KeyDistribution::Uniform, 7, 1_000_000).unwrap();
        assert!((m - 1.75).abs() <= h.max(0.01), "{m} ± {h}");
        assert!((m - draws_distinct(2.0, 4.0).unwrap()).abs() <= h);
        let (m, h) = mc_distinct(2, 3, KeyDistribution::Zipf(1.0), 8, 1_000_000).unwrap();
        assert!((m - zipf_distinct(2.0, 3, 1.0).unwrap()).abs() <= h.max(0.01));
        let (m, h) = mc_union(&[10, 20], 50, 9, 100_000).unwrap();
        assert!((m - union_distinct(&[10.0, 20.0], 50.0).unwrap()).abs() <= h);
    }

    #[test]
    fn half_width_shrinks_with_trials() {
        let (_, h1) = mc_distinct(20, 30, KeyDistribution::Uniform, 3, 10_000).unwrap();
        let (_, h4) = mc_distinct(20, 30, KeyDistribution::Uniform, 3, 40_000).unwrap();
        let ratio = h1 / h4;
        assert!((1.0..=4.0).contains(&ratio), "{ratio}");
    }

    fn constant(rate: f64, end: f64) -> ArrivalSchedule {
        ArrivalSchedule::new(vec![Segment { start: 0.0, end, rate }])
    }

    #[test]
    fn no_stalls_zero_latency() {
        let lat = per_write_reference(&constant(10.0, 5.0), &[]).unwrap();
        assert_eq!(lat.len(), 50);
        assert!(lat.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn one_second_stall_averages_half_second() {
        let arrivals = constant(1000.0, 3.0);
        let lat = per_write_reference(&arrivals, &[(1.0, 2.0)]).unwrap();
        let stalled: Vec<f64> = lat.iter().copied().filter(|&l| l > 0.0).collect();
        assert_eq!(stalled.len(), 1000);
        let mean = stalled.iter().sum::<f64>() / 1000.0;
        assert!((mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reference_matches_queue_account() {
        let arrivals = constant(100.0, 30.0);
        let stalls = [(10.0, 11.0), (20.0, 22.0)];
        let reference = per_write_reference(&arrivals, &stalls).unwrap();
        let curve = admission_with_stalls(&arrivals, &stalls, true);
        let dist = queue_account(&arrivals, &curve, 30.0);
        let err = max_quantile_error(&arrivals, &dist, &reference).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn single_stall_matches_continuous_quantiles() {
        let arrivals = constant(100.0, 30.0);
        let reference = per_write_reference(&arrivals, &[(10.0, 12.0)]).unwrap();
        let curve = admission_with_stalls(&arrivals, &[(10.0, 12.0)], true);
        let dist = queue_account(&arrivals, &curve, 30.0);
        for (q, l) in aligned_quantiles(&reference) {
            assert!((dist.quantile(q) - l).abs() < 1e-9, "q={q}: {} vs {l}", dist.quantile(q));
        }
    }
}
