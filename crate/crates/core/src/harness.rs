//! Testing phase (closed clients, maximum throughput) and running phase
//! (open arrivals at a fraction of it).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::{ExperimentConfig, RunningStart};
use crate::error::{invalid, Result};
use crate::kernel::{ComponentSample, LatencyReport, Simulator, StallInterval, Trace};
use crate::latency::Window;
use crate::model::TreeState;
use crate::scheduler::{SchedulerConfig, SchedulerKind};
use crate::workload::ArrivalProcess;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Testing,
    Running,
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseReport {
    pub phase: Phase,
    /// Maximum write throughput (testing phase only).
    pub measured_w: Option<f64>,
    /// Open arrival rate (running phase only).
    pub target_rate: Option<f64>,
    pub utilization: Option<f64>,
    pub duration: f64,
    pub processed: f64,
    pub stall_fraction: f64,
    pub final_queue: f64,
    pub queue_growing: bool,
    pub max_components: usize,
    pub latency: LatencyReport,
    pub warnings: Vec<String>,
    pub windows: Vec<Window>,
    pub components: Vec<ComponentSample>,
    pub stalls: Vec<StallInterval>,
    #[serde(skip)]
    pub trace: Trace,
}

impl PhaseReport {
    fn from_trace(phase: Phase, trace: Trace, warnings: Vec<String>) -> Self {
        let duration = trace.duration();
        Self {
            phase,
            measured_w: None,
            target_rate: None,
            utilization: None,
            duration,
            processed: trace.processed_between(0.0, duration),
            stall_fraction: trace.stalled_time(0.0, duration) / duration,
            final_queue: trace.final_queue(),
            queue_growing: trace.queue_growing(),
            max_components: trace.components.iter().map(|c| c.component_count).max().unwrap_or(0),
            latency: trace.latency,
            warnings,
            windows: trace.windows.clone(),
            components: trace.components.clone(),
            stalls: trace.stalls.clone(),
            trace,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Peak component count per ten minutes trends upward.
    pub fn components_growing(&self) -> bool {
        component_trend(&self.components, self.duration, 600.0) > 0.0
    }
}

#[derive(Debug, Clone)]
pub struct TestingOutcome {
    pub report: PhaseReport,
    pub measured_w: f64,
    pub final_tree: TreeState,
}

fn simulator(cfg: &ExperimentConfig, sched: &SchedulerConfig, testing_mode: bool) -> Result<Simulator> {
    let policy = crate::policy::PolicyConfig { testing_mode, ..cfg.policy.clone() };
    Simulator::new(&cfg.sim, &policy, sched)
}

/// Scheduler used to measure maximum throughput: fair unless the
/// configuration asks for the bLSM controller.
pub fn testing_scheduler(cfg: &ExperimentConfig) -> SchedulerConfig {
    let mut sched = cfg.scheduler.clone();
    if matches!(sched.kind, SchedulerKind::Greedy | SchedulerKind::SingleThreaded) {
        sched.kind = SchedulerKind::Fair;
    }
    sched
}

/// Closed-system run with the configured scheduler. `W` counts writes
/// admitted after the warm-up.
pub fn testing_phase(cfg: &ExperimentConfig) -> Result<TestingOutcome> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    if cfg.scheduler.kind == SchedulerKind::Greedy {
        warnings.push("greedy scheduling overstates maximum throughput by starving large merges; use fair".into());
    }
    let mut sim = simulator(cfg, &cfg.scheduler, cfg.policy.testing_mode)?;
    sim.preload()?;
    let h = &cfg.harness;
    let arrivals = ArrivalProcess::closed(cfg.arrivals.clients.max(1), h.test_duration);
    let trace = sim.run(&arrivals, h.window, cfg.seed)?;
    let w = trace.processed_between(h.warmup, h.test_duration) / (h.test_duration - h.warmup);
    if !(w > 0.0) {
        warnings.push("no writes completed after the warm-up".into());
    }
    let final_tree = trace.detail.final_tree.clone();
    let mut report = PhaseReport::from_trace(Phase::Testing, trace, warnings);
    report.measured_w = Some(w);
    Ok(TestingOutcome { report, measured_w: w, final_tree })
}

/// Open constant arrivals at `utilization * w` with the configured policy
/// (testing-mode overrides off).
pub fn running_phase(
    cfg: &ExperimentConfig,
    w: f64,
    utilization: f64,
    snapshot: Option<&TreeState>,
) -> Result<PhaseReport> {
    if !(utilization > 0.0 && utilization < 1.0) {
        return Err(invalid("utilization must be in (0, 1)"));
    }
    let rate = utilization * w;
    let arrivals = ArrivalProcess::constant(rate, cfg.harness.run_duration);
    let mut report = open_phase(cfg, &arrivals, snapshot)?;
    report.target_rate = Some(rate);
    report.utilization = Some(utilization);
    Ok(report)
}

/// Run an open arrival process against the configured tree.
pub fn open_phase(cfg: &ExperimentConfig, arrivals: &ArrivalProcess, snapshot: Option<&TreeState>) -> Result<PhaseReport> {
    cfg.validate()?;
    let mut sim = simulator(cfg, &cfg.scheduler, false)?;
    match snapshot {
        Some(tree) => {
            let offset = tree
                .levels
                .iter()
                .flatten()
                .map(|c| c.created_at)
                .chain(tree.in_flight.iter().map(|t| t.created_at))
                .fold(0.0, f64::max);
            sim.adopt_tree(tree.clone(), offset);
        }
        None => sim.preload()?,
    }
    let trace = sim.run(arrivals, cfg.harness.window, cfg.seed)?;
    let mut warnings = Vec::new();
    if trace.queue_growing() {
        warnings.push(format!(
            "arrivals exceed sustained capacity: {:.0} writes still queued and growing",
            trace.final_queue()
        ));
    }
    Ok(PhaseReport::from_trace(Phase::Running, trace, warnings))
}

#[derive(Debug, Clone)]
pub struct TwoPhaseReport {
    pub testing: PhaseReport,
    pub running: PhaseReport,
}

/// Measure `W` with the testing scheduler, then run at the configured
/// utilization with the configured scheduler.
pub fn two_phase(cfg: &ExperimentConfig) -> Result<TwoPhaseReport> {
    let testing_cfg = ExperimentConfig { scheduler: testing_scheduler(cfg), ..cfg.clone() };
    let testing = testing_phase(&testing_cfg)?;
    let snapshot = match cfg.harness.running_start {
        RunningStart::TestingSnapshot => Some(&testing.final_tree),
        RunningStart::Preload => None,
    };
    let running = running_phase(cfg, testing.measured_w, cfg.harness.utilization, snapshot)?;
    Ok(TwoPhaseReport { testing: testing.report, running })
}

/// One running phase per utilization, all against the same `w`.
pub fn utilization_sweep(
    cfg: &ExperimentConfig,
    w: f64,
    utilizations: &[f64],
    snapshot: Option<&TreeState>,
) -> Result<Vec<PhaseReport>> {
    utilizations.iter().map(|&rho| running_phase(cfg, w, rho, snapshot)).collect()
}

/// Least-squares slope, in components per hour, of the peak component
/// count per `bucket` seconds. Positive when the tree keeps growing.
pub fn component_trend(samples: &[ComponentSample], duration: f64, bucket: f64) -> f64 {
    let buckets = (duration / bucket).ceil().max(1.0) as usize;
    let mut peaks = vec![None::<usize>; buckets];
    for s in samples {
        let i = ((s.time_s / bucket) as usize).min(buckets - 1);
        peaks[i] = Some(peaks[i].map_or(s.component_count, |p: usize| p.max(s.component_count)));
    }
    let pts: Vec<(f64, f64)> = peaks
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| ((i as f64 + 0.5) * bucket / 3600.0, p as f64)))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn throughput_csv(windows: &[Window]) -> String {
    let mut out = String::from("time_s,throughput_per_s\n");
    for w in windows {
        let _ = writeln!(out, "{},{}", w.time_s, w.throughput_per_s);
    }
    out
}

pub fn components_csv(samples: &[ComponentSample]) -> String {
    let mut out = String::from("time_s,component_count\n");
    for s in samples {
        let _ = writeln!(out, "{},{}", s.time_s, s.component_count);
    }
    out
}

pub fn stalls_csv(stalls: &[StallInterval]) -> String {
    let mut out = String::from("start_s,end_s,cause\n");
    for s in stalls {
        let cause = serde_json::to_value(s.cause).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", s.start, s.end, cause);
    }
    out
}

/// Write the series CSVs for `report` into `dir`.
pub fn write_series(dir: &Path, report: &PhaseReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("throughput.csv"), throughput_csv(&report.windows))?;
    fs::write(dir.join("components.csv"), components_csv(&report.components))?;
    fs::write(dir.join("stalls.csv"), stalls_csv(&report.stalls))?;
    Ok(())
}

/// `testing.json`, `running.json` and the running phase's series.
pub fn write_two_phase(dir: &Path, report: &TwoPhaseReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("testing.json"), report.testing.to_json()?)?;
    fs::write(dir.join("running.json"), report.running.to_json()?)?;
    write_series(dir, &report.running)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SimParams;
    use crate::policy::{PolicyConfig, PolicyFamily};

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            sim: SimParams {
                entry_size: 1,
                mem_component_size: 1000.0,
                bandwidth: 10_000.0,
                keyspace: 100_000.0,
                dataset_size: 100_000.0,
                ..SimParams::default()
            },
            policy: PolicyConfig { family: PolicyFamily::Tiering, size_ratio: 3, ..Default::default() },
            harness: crate::config::HarnessConfig {
                test_duration: 600.0,
                warmup: 100.0,
                run_duration: 600.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn component_trend_sign() {
        let rising: Vec<ComponentSample> =
            (0..120).map(|i| ComponentSample { time_s: i as f64 * 60.0, component_count: 10 + i / 10 }).collect();
        assert!((component_trend(&rising, 7200.0, 600.0) - 6.0).abs() < 1e-9);
        let flat: Vec<ComponentSample> =
            (0..120).map(|i| ComponentSample { time_s: i as f64 * 60.0, component_count: 5 + i % 3 }).collect();
        assert_eq!(component_trend(&flat, 7200.0, 600.0), 0.0);
        assert_eq!(component_trend(&[], 7200.0, 600.0), 0.0);
    }

    #[test]
    fn running_rate_is_exact_fraction() {
        let cfg = small();
        let t = testing_phase(&cfg).unwrap();
        assert!(t.measured_w > 0.0);
        let r = running_phase(&cfg, t.measured_w, 0.5, Some(&t.final_tree)).unwrap();
        assert_eq!(r.target_rate, Some(0.5 * t.measured_w));
    }

    #[test]
    fn light_load_has_no_stalls() {
        let cfg = small();
        let t = testing_phase(&cfg).unwrap();
        let r = running_phase(&cfg, t.measured_w, 0.05, None).unwrap();
        assert_eq!(r.stall_fraction, 0.0);
        assert_eq!(r.latency.p99, 0.0);
    }

    #[test]
    fn greedy_testing_warns() {
        let mut cfg = small();
        cfg.scheduler.kind = SchedulerKind::Greedy;
        assert!(!testing_phase(&cfg).unwrap().report.warnings.is_empty());
        assert_eq!(testing_scheduler(&cfg).kind, SchedulerKind::Fair);
    }

    #[test]
    fn bandwidth_doubling_doubles_w() {
        let cfg = small();
        let mut fast = small();
        fast.sim.bandwidth *= 2.0;
        let w1 = testing_phase(&cfg).unwrap().measured_w;
        let mut halved = fast.clone();
        halved.harness.test_duration /= 2.0;
        halved.harness.warmup /= 2.0;
        let w2 = testing_phase(&halved).unwrap().measured_w;
        assert!((w2 / w1 - 2.0).abs() < 0.1, "{w1} {w2}");
    }

    #[test]
    fn empty_sweep_is_empty() {
        assert!(utilization_sweep(&small(), 100.0, &[], None).unwrap().is_empty());
    }

    #[test]
    fn csv_headers() {
        assert!(throughput_csv(&[]).starts_with("time_s,throughput_per_s\n"));
        assert!(components_csv(&[]).starts_with("time_s,component_count\n"));
        assert!(stalls_csv(&[]).starts_with("start_s,end_s,cause\n"));
    }
}
