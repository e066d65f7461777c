//! Write arrival processes.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalKind {
    /// Clients submit their next write as soon as the previous one completes.
    Closed { clients: usize },
    OpenConstant { rate: f64 },
    /// Alternates `base_duration` seconds at `base_rate` with
    /// `burst_duration` seconds at `burst_rate`.
    OpenBursty {
        base_rate: f64,
        base_duration: f64,
        burst_rate: f64,
        burst_duration: f64,
    },
    /// Arbitrary piecewise-constant rates: `(start, rate)` pairs, sorted.
    OpenPiecewise { steps: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalProcess {
    pub kind: ArrivalKind,
    pub duration: f64,
}

impl ArrivalProcess {
    pub fn closed(clients: usize, duration: f64) -> Self {
        Self { kind: ArrivalKind::Closed { clients }, duration }
    }

    pub fn constant(rate: f64, duration: f64) -> Self {
        Self { kind: ArrivalKind::OpenConstant { rate }, duration }
    }

    pub fn is_closed(&self) -> bool {
        matches!(self.kind, ArrivalKind::Closed { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(invalid("arrivals.duration must be > 0"));
        }
        match &self.kind {
            ArrivalKind::Closed { clients } if *clients == 0 => Err(invalid("arrivals.clients must be >= 1")),
            ArrivalKind::OpenConstant { rate } if !(*rate >= 0.0) => Err(invalid("arrivals.rate must be >= 0")),
            ArrivalKind::OpenBursty { base_rate, base_duration, burst_rate, burst_duration } => {
                if !(*base_rate > 0.0 && *burst_rate > 0.0) {
                    return Err(invalid("bursty rates must be > 0"));
                }
                if !(*base_duration > 0.0 && *burst_duration > 0.0) {
                    return Err(invalid("bursty durations must be > 0"));
                }
                Ok(())
            }
            ArrivalKind::OpenPiecewise { steps } => {
                if steps.iter().any(|(_, r)| !(*r >= 0.0)) {
                    return Err(invalid("piecewise rates must be >= 0"));
                }
                if steps.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(invalid("piecewise steps must be strictly increasing in time"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Piecewise-constant rate schedule over `[0, duration)`. Closed
    /// processes have no schedule.
    pub fn schedule(&self) -> Option<ArrivalSchedule> {
        let end = self.duration;
        let segments = match &self.kind {
            ArrivalKind::Closed { .. } => return None,
            ArrivalKind::OpenConstant { rate } => vec![Segment { start: 0.0, end, rate: *rate }],
            ArrivalKind::OpenBursty { base_rate, base_duration, burst_rate, burst_duration } => {
                let mut segs = Vec::new();
                let mut t = 0.0;
                let mut burst = false;
                while t < end {
                    let (len, rate) = if burst {
                        (*burst_duration, *burst_rate)
                    } else {
                        (*base_duration, *base_rate)
                    };
                    let stop = (t + len).min(end);
                    segs.push(Segment { start: t, end: stop, rate });
                    t = stop;
                    burst = !burst;
                }
                segs
            }
            ArrivalKind::OpenPiecewise { steps } => {
                let mut segs = Vec::new();
                let mut prev = (0.0, 0.0);
                for &(start, rate) in steps {
                    if start > prev.0 && prev.0 < end {
                        segs.push(Segment { start: prev.0, end: start.min(end), rate: prev.1 });
                    }
                    prev = (start.max(0.0), rate);
                }
                if prev.0 < end {
                    segs.push(Segment { start: prev.0, end, rate: prev.1 });
                }
                segs
            }
        };
        Some(ArrivalSchedule::new(segments))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub rate: f64,
}

/// Piecewise-constant arrival rate with its cumulative count.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalSchedule {
    pub segments: Vec<Segment>,
    cumulative: Vec<f64>,
}

impl ArrivalSchedule {
    pub fn new(segments: Vec<Segment>) -> Self {
        let mut cumulative = Vec::with_capacity(segments.len() + 1);
        let mut acc = 0.0;
        cumulative.push(acc);
        for s in &segments {
            acc += s.rate * (s.end - s.start);
            cumulative.push(acc);
        }
        Self { segments, cumulative }
    }

    pub fn end(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end)
    }

    pub fn total(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    fn segment_index(&self, t: f64) -> Option<usize> {
        let i = self.segments.partition_point(|s| s.end <= t);
        (i < self.segments.len() && self.segments[i].start <= t).then_some(i)
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        self.segment_index(t).map_or(0.0, |i| self.segments[i].rate)
    }

    /// Next rate change strictly after `t`.
    pub fn next_boundary(&self, t: f64) -> Option<f64> {
        self.segments
            .iter()
            .flat_map(|s| [s.start, s.end])
            .find(|&b| b > t)
    }

    /// Writes arrived in `[0, t]`.
    pub fn count_at(&self, t: f64) -> f64 {
        if t <= 0.0 || self.segments.is_empty() {
            return 0.0;
        }
        let i = self.segments.partition_point(|s| s.end <= t);
        if i >= self.segments.len() {
            return self.total();
        }
        let s = &self.segments[i];
        self.cumulative[i] + s.rate * (t - s.start).max(0.0)
    }

    /// Earliest time by which `x` writes have arrived.
    pub fn time_of(&self, x: f64) -> Option<f64> {
        if x > self.total() {
            return None;
        }
        let i = self.cumulative.partition_point(|&c| c < x);
        if i == 0 {
            return Some(self.segments.first().map_or(0.0, |s| s.start));
        }
        let s = &self.segments[i - 1];
        Some(s.start + (x - self.cumulative[i - 1]) / s.rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bursty_schedule_alternates() {
        let p = ArrivalProcess {
            kind: ArrivalKind::OpenBursty {
                base_rate: 2000.0,
                base_duration: 1500.0,
                burst_rate: 8000.0,
                burst_duration: 300.0,
            },
            duration: 3300.0,
        };
        let s = p.schedule().unwrap();
        assert_eq!(s.segments.len(), 3);
        assert_eq!(s.rate_at(1600.0), 8000.0);
        assert_eq!(s.rate_at(1900.0), 2000.0);
        assert_eq!(s.total(), 2000.0 * 1500.0 + 8000.0 * 300.0 + 2000.0 * 1500.0);
    }

    #[test]
    fn count_and_inverse_agree() {
        let s = ArrivalProcess {
            kind: ArrivalKind::OpenPiecewise { steps: vec![(0.0, 10.0), (5.0, 0.0), (8.0, 4.0)] },
            duration: 10.0,
        }
        .schedule()
        .unwrap();
        assert_eq!(s.count_at(5.0), 50.0);
        assert_eq!(s.count_at(7.0), 50.0);
        assert_eq!(s.count_at(9.0), 54.0);
        assert_eq!(s.time_of(54.0), Some(9.0));
        assert_eq!(s.time_of(25.0), Some(2.5));
        assert_eq!(s.time_of(100.0), None);
        assert_eq!(s.next_boundary(5.0), Some(8.0));
    }

    #[test]
    fn closed_has_no_schedule() {
        assert!(ArrivalProcess::closed(1, 10.0).schedule().is_none());
        assert!(ArrivalProcess::closed(0, 10.0).validate().is_err());
    }
}
