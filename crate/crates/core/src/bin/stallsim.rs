use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stallsim::config::{self, ExperimentConfig};
use stallsim::harness::{self, PhaseReport};
use stallsim::kernel::Simulator;
use stallsim::{presets, verify, Error, Result};

#[derive(Parser)]
#[command(name = "stallsim", version, about = "Virtual-time simulator for LSM-tree write stalls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key after the file is read; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Rho,
    #[value(name = "size_ratio")]
    SizeRatio,
    #[value(name = "file_max")]
    FileMax,
}

#[derive(Subcommand)]
enum Command {
    /// One kernel run with the configured arrivals.
    Simulate(Common),
    /// Testing phase, then a running phase at the configured utilization.
    TwoPhase(Common),
    /// Repeat the two-phase run along one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated list, or an inclusive integer range `a..b`.
        #[arg(long)]
        values: String,
    },
    /// Print or run a named preset.
    Preset {
        name: String,
        #[command(flatten)]
        common: Common,
        /// Print the configuration instead of running it.
        #[arg(long)]
        dump: bool,
        /// Restrict to one variant.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Run the theorem and oracle property suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Invalid(Error),
    Property,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Invalid(e)
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => config::parse(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    apply(&mut cfg, common)?;
    Ok(cfg)
}

fn apply(cfg: &mut ExperimentConfig, common: &Common) -> Result<()> {
    cfg.apply_overrides(&common.overrides)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()
}

fn parse_values(values: &str) -> Result<Vec<String>> {
    if let Some((a, b)) = values.split_once("..") {
        let parse = |s: &str| s.trim().parse::<i64>().map_err(|_| Error::Validation(format!("bad range bound `{s}`")));
        let (a, b) = (parse(a)?, parse(b)?);
        if a > b {
            return Err(Error::Validation(format!("empty range {values}")));
        }
        return Ok((a..=b).map(|v| v.to_string()).collect());
    }
    let out: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if out.is_empty() {
        return Err(Error::Validation("no sweep values".into()));
    }
    Ok(out)
}

fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    let mut sim = Simulator::new(&cfg.sim, &cfg.policy, &cfg.scheduler)?;
    sim.preload()?;
    let trace = sim.run(&cfg.arrivals.process(), cfg.harness.window, cfg.seed)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trace.json"), trace.to_json()?)?;
    fs::write(dir.join("throughput.csv"), harness::throughput_csv(&trace.windows))?;
    fs::write(dir.join("components.csv"), harness::components_csv(&trace.components))?;
    fs::write(dir.join("stalls.csv"), harness::stalls_csv(&trace.stalls))?;
    println!("{}", dir.display());
    Ok(())
}

fn summarize(label: &str, r: &PhaseReport) {
    let w = r.measured_w.map_or(String::new(), |w| format!(" W={w:.1}/s"));
    let rate = r.target_rate.map_or(String::new(), |x| format!(" rate={x:.1}/s"));
    println!(
        "{label}:{w}{rate} stall_fraction={:.4} p99={:.4}s processing_p99={:.4}s",
        r.stall_fraction, r.latency.p99, r.latency.processing_p99
    );
    for warning in &r.warnings {
        eprintln!("warning: {label}: {warning}");
    }
}

fn two_phase_into(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let report = harness::two_phase(cfg)?;
    harness::write_two_phase(dir, &report)?;
    summarize(&format!("{} testing", dir.display()), &report.testing);
    summarize(&format!("{} running", dir.display()), &report.running);
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, axis: Axis, values: &str) -> Result<()> {
    let values = parse_values(values)?;
    match axis {
        Axis::Rho => {
            let testing_cfg = ExperimentConfig { scheduler: harness::testing_scheduler(cfg), ..cfg.clone() };
            let testing = harness::testing_phase(&testing_cfg)?;
            fs::create_dir_all(&cfg.output_dir)?;
            fs::write(cfg.output_dir.join("testing.json"), testing.report.to_json()?)?;
            summarize("testing", &testing.report);
            let snapshot = match cfg.harness.running_start {
                config::RunningStart::TestingSnapshot => Some(&testing.final_tree),
                config::RunningStart::Preload => None,
            };
            for v in &values {
                let rho: f64 = v.parse().map_err(|_| Error::Validation(format!("bad utilization `{v}`")))?;
                let report = harness::running_phase(cfg, testing.measured_w, rho, snapshot)?;
                let dir = cfg.output_dir.join(format!("rho_{v}"));
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("running.json"), report.to_json()?)?;
                harness::write_series(&dir, &report)?;
                summarize(&dir.display().to_string(), &report);
            }
        }
        Axis::SizeRatio | Axis::FileMax => {
            let (key, tag) = match axis {
                Axis::SizeRatio => ("policy.size_ratio", "size_ratio"),
                _ => ("policy.file_max", "file_max"),
            };
            for v in &values {
                let mut point = cfg.clone();
                point.apply_override(&format!("{key}={v}"))?;
                point.validate()?;
                two_phase_into(&point, &cfg.output_dir.join(format!("{tag}_{v}")))?;
            }
        }
    }
    Ok(())
}

fn preset(name: &str, common: &Common, dump: bool, only: Option<&str>) -> Result<()> {
    let p = presets::preset(name)?;
    let mut variants = p.variants;
    if let Some(label) = only {
        variants.retain(|(l, _)| l == label);
        if variants.is_empty() {
            return Err(Error::Validation(format!("preset {name} has no variant `{label}`")));
        }
    }
    for (label, cfg) in &mut variants {
        apply(cfg, common)?;
        if dump {
            println!("# variant: {label}\n{}", config::dump(cfg));
            continue;
        }
        let dir = cfg.output_dir.join(name).join(&*label);
        if cfg.arrivals.process().is_closed() {
            two_phase_into(cfg, &dir)?;
        } else {
            let report = harness::open_phase(cfg, &cfg.arrivals.process(), None)?;
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("running.json"), report.to_json()?)?;
            harness::write_series(&dir, &report)?;
            summarize(&dir.display().to_string(), &report);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Simulate(common) => simulate(&load(&common)?)?,
        Command::TwoPhase(common) => {
            let cfg = load(&common)?;
            two_phase_into(&cfg, &cfg.output_dir)?;
        }
        Command::Sweep { common, axis, values } => sweep(&load(&common)?, axis, &values)?,
        Command::Preset { name, common, dump, variant } => preset(&name, &common, dump, variant.as_deref())?,
        Command::Verify { seed } => {
            let checks = verify::all(seed)?;
            for c in &checks {
                println!("{}", c.line());
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(Failure::Property);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Property) => ExitCode::from(2),
    }
}
