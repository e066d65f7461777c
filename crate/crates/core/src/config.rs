//! Experiment configuration: flat `section.key = value` text.
//!
//! Every key has a default, so an empty file is a complete configuration.
//! `dump` writes every key in canonical order and `parse(dump(c)) == c`.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{KeyDistribution, SimParams};
use crate::policy::{MergePolicy, PolicyConfig, PolicyFamily, Selection};
use crate::scheduler::{ConstraintScope, SchedulerConfig, SchedulerKind, WriteInteraction};
use crate::workload::{ArrivalKind, ArrivalProcess};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalSpecKind {
    Closed,
    OpenConstant,
    OpenBursty,
}

/// Arrival settings as written in a config file. Keys for other kinds are
/// kept so that switching `arrivals.kind` needs no other edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSpec {
    pub kind: ArrivalSpecKind,
    pub clients: usize,
    pub rate: f64,
    pub base_rate: f64,
    pub base_duration: f64,
    pub burst_rate: f64,
    pub burst_duration: f64,
    pub duration: f64,
}

impl Default for ArrivalSpec {
    fn default() -> Self {
        Self {
            kind: ArrivalSpecKind::Closed,
            clients: 1,
            rate: 1000.0,
            base_rate: 2000.0,
            base_duration: 1500.0,
            burst_rate: 8000.0,
            burst_duration: 300.0,
            duration: 7200.0,
        }
    }
}

impl ArrivalSpec {
    pub fn process(&self) -> ArrivalProcess {
        let kind = match self.kind {
            ArrivalSpecKind::Closed => ArrivalKind::Closed { clients: self.clients },
            ArrivalSpecKind::OpenConstant => ArrivalKind::OpenConstant { rate: self.rate },
            ArrivalSpecKind::OpenBursty => ArrivalKind::OpenBursty {
                base_rate: self.base_rate,
                base_duration: self.base_duration,
                burst_rate: self.burst_rate,
                burst_duration: self.burst_duration,
            },
        };
        ArrivalProcess { kind, duration: self.duration }
    }
}

/// Initial tree of the running phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunningStart {
    /// Continue from the testing phase's final tree.
    TestingSnapshot,
    /// Start from a freshly preloaded tree.
    Preload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub test_duration: f64,
    pub warmup: f64,
    pub run_duration: f64,
    pub utilization: f64,
    pub window: f64,
    pub running_start: RunningStart,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            test_duration: 7200.0,
            warmup: 1200.0,
            run_duration: 7200.0,
            utilization: 0.95,
            window: 30.0,
            running_start: RunningStart::Preload,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_duration > 0.0 && self.run_duration > 0.0) {
            return Err(invalid("harness durations must be > 0"));
        }
        if !(self.warmup >= 0.0 && self.warmup < self.test_duration) {
            return Err(invalid("harness.warmup must be in [0, harness.test_duration)"));
        }
        if !(self.utilization > 0.0 && self.utilization < 1.0) {
            return Err(invalid("harness.utilization must be in (0, 1)"));
        }
        if !(self.window > 0.0) {
            return Err(invalid("harness.window must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sim: SimParams,
    pub policy: PolicyConfig,
    pub scheduler: SchedulerConfig,
    pub arrivals: ArrivalSpec,
    pub harness: HarnessConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimParams::default(),
            policy: PolicyConfig::default(),
            scheduler: SchedulerConfig::default(),
            arrivals: ArrivalSpec::default(),
            harness: HarnessConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.policy.validate()?;
        self.scheduler.validate()?;
        self.arrivals.process().validate()?;
        self.harness.validate()?;
        if self.policy.family == PolicyFamily::PartitionedLeveling
            && !matches!(self.sim.key_distribution, KeyDistribution::Uniform)
        {
            return Err(invalid("zipf keys are not supported with partitioned_leveling"));
        }
        if self.scheduler.kind == SchedulerKind::Blsm {
            let levels = MergePolicy::new(&self.policy, &self.sim).levels;
            if self.policy.family != PolicyFamily::Leveling || levels != 2 {
                return Err(invalid("scheduler.kind = blsm requires leveling with two disk levels"));
            }
        }
        Ok(())
    }

    /// Apply one `key = value` assignment and re-validate.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        self.apply_overrides(&[assignment])
    }

    /// Apply assignments in order, then validate the result once.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        for assignment in assignments {
            let assignment = assignment.as_ref();
            let (key, value) = assignment
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: 0, msg: format!("expected key=value, got `{assignment}`") })?;
            set_key(self, key.trim(), value.trim()).map_err(|msg| Error::Parse { line: 0, msg })?;
        }
        self.validate()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }
}

struct Key {
    name: &'static str,
    get: fn(&ExperimentConfig) -> String,
    set: fn(&mut ExperimentConfig, &str) -> std::result::Result<(), String>,
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid number `{v}`"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

/// Byte count with an optional binary suffix (`64MB`, `1GiB`, `512K`).
pub fn parse_bytes(v: &str) -> std::result::Result<u64, String> {
    let s = v.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (digits, suffix) = s.split_at(split);
    let base: u64 = digits.parse().map_err(|_| format!("invalid size `{v}`"))?;
    let mult: u64 = match suffix.trim().to_ascii_uppercase().as_str() {
        "" | "B" => 1,
        "K" | "KB" | "KIB" => 1 << 10,
        "M" | "MB" | "MIB" => 1 << 20,
        "G" | "GB" | "GIB" => 1 << 30,
        "T" | "TB" | "TIB" => 1 << 40,
        _ => return Err(format!("unknown size suffix in `{v}`")),
    };
    base.checked_mul(mult).ok_or_else(|| format!("size `{v}` overflows"))
}

fn auto<T: std::str::FromStr>(v: &str) -> std::result::Result<Option<T>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn show_auto<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |x| x.to_string())
}

fn key_distribution(v: &str) -> std::result::Result<KeyDistribution, String> {
    if v == "uniform" {
        return Ok(KeyDistribution::Uniform);
    }
    let s = v
        .strip_prefix("zipf(")
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| format!("expected uniform or zipf(<exponent>), got `{v}`"))?;
    Ok(KeyDistribution::Zipf(num(s.trim())?))
}

fn show_key_distribution(d: &KeyDistribution) -> String {
    match d {
        KeyDistribution::Uniform => "uniform".into(),
        KeyDistribution::Zipf(s) => format!("zipf({s})"),
    }
}

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(str::to_string)).unwrap_or_default()
}

fn enum_parse<T: for<'de> Deserialize<'de>>(v: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(v.to_string())).map_err(|_| format!("unknown value `{v}`"))
}

const KEYS: &[Key] = &[
    Key { name: "seed", get: |c| c.seed.to_string(), set: |c, v| Ok(c.seed = num(v)?) },
    Key {
        name: "output_dir",
        get: |c| c.output_dir.display().to_string(),
        set: |c, v| Ok(c.output_dir = PathBuf::from(v)),
    },
    Key { name: "sim.entry_size", get: |c| c.sim.entry_size.to_string(), set: |c, v| Ok(c.sim.entry_size = parse_bytes(v)?) },
    Key {
        name: "sim.mem_component_size",
        get: |c| c.sim.mem_component_size.to_string(),
        set: |c, v| Ok(c.sim.mem_component_size = num(v)?),
    },
    Key {
        name: "sim.mem_component_count",
        get: |c| c.sim.mem_component_count.to_string(),
        set: |c, v| Ok(c.sim.mem_component_count = num(v)?),
    },
    Key { name: "sim.bandwidth", get: |c| c.sim.bandwidth.to_string(), set: |c, v| Ok(c.sim.bandwidth = num(v)?) },
    Key { name: "sim.keyspace", get: |c| c.sim.keyspace.to_string(), set: |c, v| Ok(c.sim.keyspace = num(v)?) },
    Key {
        name: "sim.key_distribution",
        get: |c| show_key_distribution(&c.sim.key_distribution),
        set: |c, v| Ok(c.sim.key_distribution = key_distribution(v)?),
    },
    Key { name: "sim.dataset_size", get: |c| c.sim.dataset_size.to_string(), set: |c, v| Ok(c.sim.dataset_size = num(v)?) },
    Key {
        name: "sim.force_interval_bytes",
        get: |c| c.sim.force_interval_bytes.to_string(),
        set: |c, v| Ok(c.sim.force_interval_bytes = parse_bytes(v)?),
    },
    Key {
        name: "policy.family",
        get: |c| c.policy.family.name().to_string(),
        set: |c, v| Ok(c.policy.family = PolicyFamily::parse(v).ok_or_else(|| format!("unknown policy family `{v}`"))?),
    },
    Key { name: "policy.size_ratio", get: |c| c.policy.size_ratio.to_string(), set: |c, v| Ok(c.policy.size_ratio = num(v)?) },
    Key { name: "policy.levels", get: |c| show_auto(&c.policy.levels), set: |c, v| Ok(c.policy.levels = auto(v)?) },
    Key {
        name: "policy.st_ratio",
        get: |c| c.policy.size_tiered.ratio.to_string(),
        set: |c, v| Ok(c.policy.size_tiered.ratio = num(v)?),
    },
    Key {
        name: "policy.st_min_merge",
        get: |c| c.policy.size_tiered.min_merge.to_string(),
        set: |c, v| Ok(c.policy.size_tiered.min_merge = num(v)?),
    },
    Key {
        name: "policy.st_max_merge",
        get: |c| c.policy.size_tiered.max_merge.to_string(),
        set: |c, v| Ok(c.policy.size_tiered.max_merge = num(v)?),
    },
    Key {
        name: "policy.level1_base",
        get: |c| c.policy.partitioned.level1_base.to_string(),
        set: |c, v| Ok(c.policy.partitioned.level1_base = parse_bytes(v)?),
    },
    Key {
        name: "policy.file_max",
        get: |c| c.policy.partitioned.file_max.to_string(),
        set: |c, v| Ok(c.policy.partitioned.file_max = parse_bytes(v)?),
    },
    Key {
        name: "policy.l0_min_merge",
        get: |c| c.policy.partitioned.l0_min_merge.to_string(),
        set: |c, v| Ok(c.policy.partitioned.l0_min_merge = num(v)?),
    },
    Key {
        name: "policy.selection",
        get: |c| enum_name(&c.policy.partitioned.selection),
        set: |c, v| Ok(c.policy.partitioned.selection = enum_parse::<Selection>(v)?),
    },
    Key {
        name: "policy.dynamic_level_size",
        get: |c| c.policy.dynamic_level_size.to_string(),
        set: |c, v| Ok(c.policy.dynamic_level_size = flag(v)?),
    },
    Key {
        name: "policy.testing_mode",
        get: |c| c.policy.testing_mode.to_string(),
        set: |c, v| Ok(c.policy.testing_mode = flag(v)?),
    },
    Key {
        name: "scheduler.kind",
        get: |c| c.scheduler.kind.name().to_string(),
        set: |c, v| Ok(c.scheduler.kind = SchedulerKind::parse(v).ok_or_else(|| format!("unknown scheduler `{v}`"))?),
    },
    Key {
        name: "scheduler.constraint",
        get: |c| enum_name(&c.scheduler.constraint),
        set: |c, v| Ok(c.scheduler.constraint = enum_parse::<ConstraintScope>(v)?),
    },
    Key {
        name: "scheduler.max_components",
        get: |c| show_auto(&c.scheduler.max_components),
        set: |c, v| Ok(c.scheduler.max_components = auto(v)?),
    },
    Key { name: "scheduler.l0_stop", get: |c| c.scheduler.l0_stop.to_string(), set: |c, v| Ok(c.scheduler.l0_stop = num(v)?) },
    Key {
        name: "scheduler.write_limit",
        get: |c| match c.scheduler.write_interaction {
            WriteInteraction::AsFastAsPossible => "none".to_string(),
            WriteInteraction::RateLimit(r) => r.to_string(),
        },
        set: |c, v| {
            c.scheduler.write_interaction = if v == "none" {
                WriteInteraction::AsFastAsPossible
            } else {
                WriteInteraction::RateLimit(num(v)?)
            };
            Ok(())
        },
    },
    Key {
        name: "scheduler.flush_priority",
        get: |c| c.scheduler.flush_priority.to_string(),
        set: |c, v| Ok(c.scheduler.flush_priority = flag(v)?),
    },
    Key {
        name: "arrivals.kind",
        get: |c| enum_name(&c.arrivals.kind),
        set: |c, v| Ok(c.arrivals.kind = enum_parse::<ArrivalSpecKind>(v)?),
    },
    Key { name: "arrivals.clients", get: |c| c.arrivals.clients.to_string(), set: |c, v| Ok(c.arrivals.clients = num(v)?) },
    Key { name: "arrivals.rate", get: |c| c.arrivals.rate.to_string(), set: |c, v| Ok(c.arrivals.rate = num(v)?) },
    Key { name: "arrivals.base_rate", get: |c| c.arrivals.base_rate.to_string(), set: |c, v| Ok(c.arrivals.base_rate = num(v)?) },
    Key {
        name: "arrivals.base_duration",
        get: |c| c.arrivals.base_duration.to_string(),
        set: |c, v| Ok(c.arrivals.base_duration = num(v)?),
    },
    Key { name: "arrivals.burst_rate", get: |c| c.arrivals.burst_rate.to_string(), set: |c, v| Ok(c.arrivals.burst_rate = num(v)?) },
    Key {
        name: "arrivals.burst_duration",
        get: |c| c.arrivals.burst_duration.to_string(),
        set: |c, v| Ok(c.arrivals.burst_duration = num(v)?),
    },
    Key { name: "arrivals.duration", get: |c| c.arrivals.duration.to_string(), set: |c, v| Ok(c.arrivals.duration = num(v)?) },
    Key {
        name: "harness.test_duration",
        get: |c| c.harness.test_duration.to_string(),
        set: |c, v| Ok(c.harness.test_duration = num(v)?),
    },
    Key { name: "harness.warmup", get: |c| c.harness.warmup.to_string(), set: |c, v| Ok(c.harness.warmup = num(v)?) },
    Key {
        name: "harness.run_duration",
        get: |c| c.harness.run_duration.to_string(),
        set: |c, v| Ok(c.harness.run_duration = num(v)?),
    },
    Key {
        name: "harness.utilization",
        get: |c| c.harness.utilization.to_string(),
        set: |c, v| Ok(c.harness.utilization = num(v)?),
    },
    Key { name: "harness.window", get: |c| c.harness.window.to_string(), set: |c, v| Ok(c.harness.window = num(v)?) },
    Key {
        name: "harness.running_start",
        get: |c| enum_name(&c.harness.running_start),
        set: |c, v| Ok(c.harness.running_start = enum_parse::<RunningStart>(v)?),
    },
];

/// Names of every configuration key in canonical order.
pub fn key_names() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|k| k.name)
}

fn set_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let k = KEYS.iter().find(|k| k.name == key).ok_or_else(|| format!("unknown key `{key}`"))?;
    (k.set)(cfg, value).map_err(|e| format!("{key}: {e}"))
}

/// Parse a configuration, filling defaults and validating the result.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got `{content}`") })?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Parse { line, msg: format!("duplicate key `{key}`") });
        }
        set_key(&mut cfg, key, value.trim()).map_err(|msg| Error::Parse { line, msg })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical text: every key, one per line, in a fixed order.
pub fn dump(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut section = "";
    for k in KEYS {
        let s = k.name.split_once('.').map_or("", |(s, _)| s);
        if s != section && !out.is_empty() {
            out.push('\n');
        }
        section = s;
        let _ = writeln!(out, "{} = {}", k.name, (k.get)(cfg));
    }
    out
}
