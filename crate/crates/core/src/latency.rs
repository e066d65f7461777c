//! Cumulative admission curves and exact latency distributions.

use serde::{Deserialize, Serialize};

use crate::workload::ArrivalSchedule;

/// Nondecreasing piecewise-linear curve `A(t)`. Two points with the same
/// time encode a jump; the curve is right-continuous.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CumulativeCurve {
    points: Vec<(f64, f64)>,
}

impl CumulativeCurve {
    pub fn new(t0: f64) -> Self {
        Self { points: vec![(t0, 0.0)] }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn last(&self) -> (f64, f64) {
        *self.points.last().unwrap_or(&(0.0, 0.0))
    }

    /// Append `(t, v)`. Collinear interior points are dropped.
    pub fn push(&mut self, t: f64, v: f64) {
        debug_assert!(self.points.last().map_or(true, |&(lt, lv)| t >= lt && v >= lv - 1e-6));
        let n = self.points.len();
        if let Some(&(lt, lv)) = self.points.last() {
            if t == lt && v == lv {
                return;
            }
            if n >= 2 {
                let (pt, pv) = self.points[n - 2];
                let same_rate = lt > pt && t > lt && {
                    let r1 = (lv - pv) / (lt - pt);
                    let r2 = (v - lv) / (t - lt);
                    r1 == r2
                };
                if same_rate {
                    self.points[n - 1] = (t, v);
                    return;
                }
            }
        }
        self.points.push((t, v));
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let i = self.points.partition_point(|p| p.0 <= t);
        if i == 0 {
            return 0.0;
        }
        let (t0, v0) = self.points[i - 1];
        match self.points.get(i) {
            Some(&(t1, v1)) if t1 > t0 => v0 + (v1 - v0) * (t - t0) / (t1 - t0),
            _ => v0,
        }
    }

    /// `inf { t : A(t) >= x }`, or `None` if the curve never reaches `x`.
    pub fn inverse(&self, x: f64) -> Option<f64> {
        let j = self.points.partition_point(|p| p.1 < x);
        if j >= self.points.len() {
            return None;
        }
        if j == 0 {
            return Some(self.points[0].0);
        }
        let (t0, v0) = self.points[j - 1];
        let (t1, v1) = self.points[j];
        if t1 == t0 {
            return Some(t1);
        }
        Some(t0 + (x - v0) / (v1 - v0) * (t1 - t0))
    }
}

/// Writes arriving uniformly over `[t0, t1)` whose latency moves linearly
/// from `lat_start` to `lat_end`. `t0 == t1` is an atom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearPiece {
    pub weight: f64,
    pub lat_start: f64,
    pub lat_end: f64,
    pub t0: f64,
    pub t1: f64,
}

impl LinearPiece {
    pub fn atom(t: f64, weight: f64, latency: f64) -> Self {
        Self { weight, lat_start: latency, lat_end: latency, t0: t, t1: t }
    }

    fn bounds(&self) -> (f64, f64) {
        (self.lat_start.min(self.lat_end), self.lat_start.max(self.lat_end))
    }

    fn mass_at_most(&self, l: f64) -> f64 {
        let (lo, hi) = self.bounds();
        if l >= hi {
            self.weight
        } else if l < lo {
            0.0
        } else {
            self.weight * (l - lo) / (hi - lo)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50: f64,
    pub p99: f64,
    pub p999: f64,
    pub max: f64,
}

/// Latency mass over writes, assembled from linear pieces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyDistribution {
    pub pieces: Vec<LinearPiece>,
}

impl LatencyDistribution {
    pub fn new(pieces: Vec<LinearPiece>) -> Self {
        Self { pieces: pieces.into_iter().filter(|p| p.weight > 0.0).collect() }
    }

    pub fn total(&self) -> f64 {
        self.pieces.iter().map(|p| p.weight).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn mass_at_most(&self, l: f64) -> f64 {
        self.pieces.iter().map(|p| p.mass_at_most(l)).sum()
    }

    /// Latency of the write arriving at `t`, read off the time-spanning
    /// pieces. Atoms carry no arrival time and are ignored.
    pub fn latency_at(&self, t: f64) -> Option<f64> {
        self.pieces.iter().find(|p| p.t0 < p.t1 && p.t0 <= t && t < p.t1).map(|p| {
            let f = (t - p.t0) / (p.t1 - p.t0);
            p.lat_start + f * (p.lat_end - p.lat_start)
        })
    }

    pub fn max(&self) -> f64 {
        self.pieces.iter().map(|p| p.bounds().1).fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        let total = self.total();
        if total == 0.0 {
            return 0.0;
        }
        self.pieces.iter().map(|p| p.weight * 0.5 * (p.lat_start + p.lat_end)).sum::<f64>() / total
    }

    /// Smallest latency `l` with at least a `q` fraction of writes at or
    /// below it. Empty distributions report 0.
    pub fn quantile(&self, q: f64) -> f64 {
        let total = self.total();
        if total == 0.0 {
            return 0.0;
        }
        let max = self.max();
        if q >= 1.0 {
            return max;
        }
        let target = q * total;
        let mut lo = 0.0;
        if self.mass_at_most(lo) >= target {
            return 0.0;
        }
        let mut hi = max;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.mass_at_most(mid) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    pub fn summary(&self) -> LatencySummary {
        LatencySummary {
            p50: self.quantile(0.50),
            p99: self.quantile(0.99),
            p999: self.quantile(0.999),
            max: self.max(),
        }
    }
}

/// Latency of the write arriving at `t`: `A^{-1}(N(t)) - t`. Writes never
/// admitted before `horizon` are censored at the horizon.
pub fn write_latency_at(arrivals: &ArrivalSchedule, admissions: &CumulativeCurve, horizon: f64, t: f64) -> f64 {
    let x = arrivals.count_at(t);
    let done = admissions.inverse(x).unwrap_or(horizon).max(t);
    let lat = done - t;
    // Rounding residue from inverting a curve that tracks arrivals exactly.
    if lat < 1e-9 * t.max(1.0) {
        0.0
    } else {
        lat
    }
}

/// Queuing latency of every open arrival against an admission curve.
pub fn queue_account(arrivals: &ArrivalSchedule, admissions: &CumulativeCurve, horizon: f64) -> LatencyDistribution {
    let mut cuts: Vec<f64> = arrivals.segments.iter().flat_map(|s| [s.start, s.end]).collect();
    for &(_, v) in admissions.points() {
        if let Some(t) = arrivals.time_of(v) {
            cuts.push(t);
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut pieces = Vec::with_capacity(cuts.len());
    for w in cuts.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let rate = arrivals.rate_at(0.5 * (ta + tb));
        if tb <= ta || rate <= 0.0 {
            continue;
        }
        // Latency is linear between cuts; sample away from the ends and extend.
        let dt = tb - ta;
        let (s1, s2) = (ta + 0.25 * dt, ta + 0.75 * dt);
        let l1 = write_latency_at(arrivals, admissions, horizon, s1);
        let l2 = write_latency_at(arrivals, admissions, horizon, s2);
        let slope = (l2 - l1) / (s2 - s1);
        pieces.push(LinearPiece {
            weight: rate * dt,
            lat_start: (l1 - slope * 0.25 * dt).max(0.0),
            lat_end: (l2 + slope * 0.25 * dt).max(0.0),
            t0: ta,
            t1: tb,
        });
    }
    LatencyDistribution::new(pieces)
}

/// Admission curve for open arrivals that are admitted on arrival except
/// during `stalls`. With `catch_up` the backlog is admitted the instant a
/// stall ends; otherwise it is discarded from the processed count.
pub fn admission_with_stalls(arrivals: &ArrivalSchedule, stalls: &[(f64, f64)], catch_up: bool) -> CumulativeCurve {
    let end = arrivals.end();
    let mut curve = CumulativeCurve::new(0.0);
    let mut cuts: Vec<f64> = arrivals.segments.iter().flat_map(|s| [s.start, s.end]).collect();
    cuts.extend(stalls.iter().flat_map(|&(a, b)| [a, b]));
    cuts.retain(|&t| (0.0..=end).contains(&t));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let stalled = |t: f64| stalls.iter().any(|&(a, b)| a <= t && t < b);
    let mut admitted = 0.0;
    let mut prev = 0.0;
    for &t in &cuts {
        if t > prev {
            if !stalled(0.5 * (prev + t)) {
                admitted += arrivals.count_at(t) - arrivals.count_at(prev);
            }
            curve.push(t, admitted);
        }
        if catch_up && !stalled(t) && stalls.iter().any(|&(_, b)| b == t) {
            admitted = arrivals.count_at(t);
            curve.push(t, admitted);
        }
        prev = t;
    }
    curve
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub time_s: f64,
    pub throughput_per_s: f64,
}

/// Processed writes per second over consecutive windows. A trailing
/// partial window is dropped.
pub fn measure_windows(processed: &CumulativeCurve, window: f64, start: f64, end: f64) -> Vec<Window> {
    assert!(window > 0.0, "window must be positive");
    if !(end > start) {
        return Vec::new();
    }
    let count = ((end - start) / window + 1e-9).floor() as usize;
    (0..count)
        .map(|k| {
            let a = start + k as f64 * window;
            let b = start + (k + 1) as f64 * window;
            let n = processed.value_at(b) - processed.value_at(a);
            Window { time_s: a, throughput_per_s: n / window }
        })
        .collect()
}
