//! Property suites run by `stallsim verify` and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernel::Simulator;
use crate::latency::{admission_with_stalls, queue_account, CumulativeCurve};
use crate::model::{draws_distinct, union_distinct, zipf_distinct, KeyDistribution, SimParams};
use crate::oracles::{
    brute_force_curves, max_quantile_error, mc_distinct, mc_union, per_write_reference, scheduler_curve, Grid,
    StaticMerge,
};
use crate::policy::{PolicyConfig, PolicyFamily};
use crate::scheduler::{SchedulerConfig, SchedulerKind, WriteInteraction};
use crate::workload::{ArrivalKind, ArrivalProcess, ArrivalSchedule, Segment};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub const THEOREM1_SCHEDULERS: [SchedulerKind; 3] =
    [SchedulerKind::Fair, SchedulerKind::Greedy, SchedulerKind::SingleThreaded];

fn small_tree() -> (SimParams, PolicyConfig) {
    let params = SimParams {
        entry_size: 1,
        mem_component_size: 1000.0,
        bandwidth: 10_000.0,
        keyspace: 100_000.0,
        dataset_size: 100_000.0,
        ..SimParams::default()
    };
    (params, PolicyConfig { family: PolicyFamily::Tiering, size_ratio: 3, ..Default::default() })
}

pub fn admissions(kind: SchedulerKind, interaction: WriteInteraction, arrivals: &ArrivalProcess) -> Result<CumulativeCurve> {
    let (params, policy) = small_tree();
    let sched = SchedulerConfig { kind, write_interaction: interaction, ..Default::default() };
    let mut sim = Simulator::new(&params, &policy, &sched)?;
    sim.preload()?;
    Ok(sim.run(arrivals, 30.0, 0)?.detail.admissions)
}

/// Largest amount by which the unthrottled admission count trails a
/// throttled one, checked at every breakpoint of either curve.
fn max_lag(fast: &CumulativeCurve, slow: &CumulativeCurve) -> f64 {
    fast.points()
        .iter()
        .chain(slow.points())
        .map(|&(t, _)| slow.value_at(t) - fast.value_at(t))
        .fold(0.0, f64::max)
}

pub fn random_trace(rng: &mut ChaCha8Rng, duration: f64) -> ArrivalProcess {
    let mut steps = Vec::new();
    let mut t = 0.0;
    while t < duration {
        steps.push((t, rng.gen_range(0.0..6000.0)));
        t += rng.gen_range(5.0..60.0);
    }
    ArrivalProcess { kind: ArrivalKind::OpenPiecewise { steps }, duration }
}

/// Admitting writes as fast as possible never delays any write relative to
/// a rate limit, on `traces` random arrival traces per scheduler.
/// Largest admission lag of each rate-limited run behind its unthrottled
/// twin, over `traces` random traces, two limits and every scheduler.
pub fn theorem1_lags(traces: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..traces {
        let arrivals = random_trace(&mut rng, 300.0);
        let limits = [rng.gen_range(500.0..3000.0), rng.gen_range(3000.0..8000.0)];
        for kind in THEOREM1_SCHEDULERS {
            let fast = admissions(kind, WriteInteraction::AsFastAsPossible, &arrivals)?;
            for &limit in &limits {
                let slow = admissions(kind, WriteInteraction::RateLimit(limit), &arrivals)?;
                out.push((max_lag(&fast, &slow), fast.last().1));
            }
        }
    }
    Ok(out)
}

pub fn theorem1(traces: usize, seed: u64) -> Result<Check> {
    let lags = theorem1_lags(traces, seed)?;
    // One part in 10^9 of the admitted count absorbs summation order.
    let violations = lags.iter().filter(|(lag, total)| *lag > 1e-9 * total.max(1.0)).count();
    let worst = lags.iter().map(|l| l.0).fold(0.0, f64::max);
    Ok(Check::new(
        "theorem1_latency_dominance",
        violations == 0,
        format!("{traces} traces, {} comparisons, {violations} violations, worst lag {worst:.3e} writes", lags.len()),
    ))
}

/// Every multiset of at most `max_len` merges with sizes in `1..=max_size`.
pub fn merge_multisets(max_len: usize, max_size: u64) -> Vec<Vec<u64>> {
    fn extend(from: u64, max_len: usize, max_size: u64, cur: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if !cur.is_empty() {
            out.push(cur.clone());
        }
        if cur.len() == max_len {
            return;
        }
        for s in from..=max_size {
            cur.push(s);
            extend(s, max_len, max_size, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    extend(1, max_len, max_size, &mut Vec::new(), &mut out);
    out
}

/// The greedy scheduler's curve is pointwise at or below every enumerated
/// curve for every small static merge set.
pub fn theorem2() -> Result<Check> {
    let sets = merge_multisets(5, 5);
    let mut violations = 0;
    let mut missing = 0;
    for sizes in &sets {
        let merges: Vec<StaticMerge> = sizes.iter().map(|&s| StaticMerge::new(s)).collect();
        let n = merges.len() as u64;
        let curves = brute_force_curves(&merges, 1.0, n, Grid::default())?;
        let greedy = scheduler_curve(SchedulerKind::Greedy, &merges, 1.0, n);
        violations += curves.iter().filter(|c| !greedy.dominates(c)).count();
        let found = curves.iter().any(|c| {
            let (a, b) = (c.completion_times(), greedy.completion_times());
            a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9)
        });
        if !found {
            missing += 1;
        }
    }
    Ok(Check::new(
        "theorem2_greedy_optimal",
        violations == 0 && missing == 0,
        format!("{} merge sets, {violations} violations, greedy curve missing from {missing}", sets.len()),
    ))
}

/// Optima of the first and second completion in the Theorem 3 instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem3 {
    pub first_optimum: f64,
    pub second_optimum: f64,
    pub both_achievable: bool,
    pub curves: Vec<Vec<f64>>,
}

/// Two independent merges of 300 and 500 units; completing the 500 unit
/// merge creates a 100 unit merge. Five components, bandwidth 100.
pub fn theorem3_instance() -> Result<Theorem3> {
    let merges = [StaticMerge::new(300), StaticMerge::new(500), StaticMerge { size: 100, after: Some(1) }];
    let curves = brute_force_curves(&merges, 100.0, 5, Grid::default())?;
    let times: Vec<Vec<f64>> = curves.iter().map(|c| c.completion_times()).collect();
    let first_optimum = times.iter().map(|t| t[0]).fold(f64::INFINITY, f64::min);
    let second_optimum = times.iter().map(|t| t[1]).fold(f64::INFINITY, f64::min);
    let both_achievable = times.iter().any(|t| t[0] <= first_optimum && t[1] <= second_optimum);
    Ok(Theorem3 { first_optimum, second_optimum, both_achievable, curves: times })
}

pub fn theorem3() -> Result<Check> {
    let r = theorem3_instance()?;
    let passed = r.first_optimum == 3.0 && r.second_optimum == 6.0 && !r.both_achievable;
    Ok(Check::new(
        "theorem3_no_universal_optimum",
        passed,
        format!(
            "first completion optimum {}, second {}, achieved together: {}, minimal curves {:?}",
            r.first_optimum, r.second_optimum, r.both_achievable, r.curves
        ),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DedupPoint {
    pub formula: f64,
    pub mean: f64,
    pub half_width: f64,
}

impl DedupPoint {
    pub fn agrees(&self) -> bool {
        (self.formula - self.mean).abs() <= self.half_width.max(1e-9 * self.formula.abs())
    }
}

pub const DEDUP_TRIALS: usize = 100_000;

/// Random parameter points for each dedup formula against Monte-Carlo.
pub fn dedup_points(points: usize, seed: u64) -> Result<[(&'static str, Vec<DedupPoint>); 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut draws, mut zipf, mut union) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..points {
        let s = seed.wrapping_add(i as u64 * 3);
        let n = rng.gen_range(0..=200u64);
        let k = rng.gen_range(1..=500u64);
        let (mean, half_width) = mc_distinct(n, k, KeyDistribution::Uniform, s, DEDUP_TRIALS)?;
        draws.push(DedupPoint { formula: draws_distinct(n as f64, k as f64)?, mean, half_width });

        let n = rng.gen_range(0..=200u64);
        let u = rng.gen_range(1..=300u64);
        let exp = rng.gen_range(0.5..1.5);
        let (mean, half_width) = mc_distinct(n, u, KeyDistribution::Zipf(exp), s + 1, DEDUP_TRIALS)?;
        zipf.push(DedupPoint { formula: zipf_distinct(n as f64, u, exp)?, mean, half_width });

        let k = rng.gen_range(10..=300u64);
        let sizes: Vec<u64> = (0..rng.gen_range(2..=4)).map(|_| rng.gen_range(0..=k)).collect();
        let as_f64: Vec<f64> = sizes.iter().map(|&x| x as f64).collect();
        let (mean, half_width) = mc_union(&sizes, k, s + 2, DEDUP_TRIALS)?;
        union.push(DedupPoint { formula: union_distinct(&as_f64, k as f64)?, mean, half_width });
    }
    Ok([("draws_distinct", draws), ("zipf_distinct", zipf), ("union_distinct", union)])
}

pub fn dedup_agreement(points: usize, seed: u64) -> Result<Vec<Check>> {
    Ok(dedup_points(points, seed)?
        .into_iter()
        .map(|(name, pts)| {
            let misses = pts.iter().filter(|p| !p.agrees()).count();
            Check::new(
                &format!("dedup_{name}"),
                misses == 0,
                format!("{} points, {misses} outside the 99% half-width", pts.len()),
            )
        })
        .collect())
}

/// Random constant-rate trace with stalls aligned to whole inter-arrival
/// gaps, so discrete writes and the fluid model see the same schedule.
pub fn random_stall_schedule(rng: &mut ChaCha8Rng) -> (ArrivalSchedule, Vec<(f64, f64)>) {
    let rate = rng.gen_range(10..=500) as f64;
    let slots = (60.0 * rate) as u64;
    let mut cuts: Vec<u64> = (0..2 * rng.gen_range(1..=5)).map(|_| rng.gen_range(1..slots)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let stalls = cuts.chunks_exact(2).map(|c| (c[0] as f64 / rate, c[1] as f64 / rate)).collect();
    (ArrivalSchedule::new(vec![Segment { start: 0.0, end: 60.0, rate }]), stalls)
}

pub fn queue_accounting(schedules: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..schedules {
        let (arrivals, stalls) = random_stall_schedule(&mut rng);
        let reference = per_write_reference(&arrivals, &stalls)?;
        let dist = queue_account(&arrivals, &admission_with_stalls(&arrivals, &stalls, true), arrivals.end());
        worst = worst.max(max_quantile_error(&arrivals, &dist, &reference)?);
    }
    let differential = Check::new(
        "queue_account_vs_per_write",
        worst < 1e-9,
        format!("{schedules} stall schedules, max quantile error {worst:.3e} s"),
    );

    let arrivals = ArrivalSchedule::new(vec![Segment { start: 0.0, end: 3.0, rate: 1000.0 }]);
    let dist = queue_account(&arrivals, &admission_with_stalls(&arrivals, &[(1.0, 2.0)], true), 3.0);
    let stalled: Vec<_> = dist.pieces.iter().filter(|p| p.t0 >= 1.0 && p.t1 <= 2.0).collect();
    let weight: f64 = stalled.iter().map(|p| p.weight).sum();
    let mean = stalled.iter().map(|p| p.weight * 0.5 * (p.lat_start + p.lat_end)).sum::<f64>() / weight;
    let example = Check::new(
        "one_second_stall_mean",
        (mean - 0.5).abs() < 1e-12 && (weight - 1000.0).abs() < 1e-9,
        format!("{weight} stalled writes, mean latency {mean} s"),
    );
    Ok(vec![differential, example])
}

/// Everything `stallsim verify` reports.
pub fn all(seed: u64) -> Result<Vec<Check>> {
    let mut out = vec![theorem1(100, seed)?, theorem2()?, theorem3()?];
    out.extend(dedup_agreement(20, seed)?);
    out.extend(queue_accounting(50, seed)?);
    Ok(out)
}
