//! Named experiment configurations at reference scale.

use crate::config::{ArrivalSpec, ArrivalSpecKind, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::{MIB, KIB};
use crate::policy::{PolicyConfig, PolicyFamily};
use crate::scheduler::{ConstraintScope, SchedulerConfig, SchedulerKind, WriteInteraction};

pub const PRESET_NAMES: &[&str] = &[
    "tiering_base",
    "leveling_base",
    "size_ratio_sweep",
    "constraint_local_vs_global",
    "burst_limit_vs_nolimit",
    "size_tiered_unfixed",
    "size_tiered_fixed",
    "leveldb_unfixed",
    "leveldb_fixed",
    "leveldb_partition_size_sweep",
    "blsm_base",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub variants: Vec<(String, ExperimentConfig)>,
}

impl Preset {
    pub fn variant(&self, label: &str) -> Option<&ExperimentConfig> {
        self.variants.iter().find(|(l, _)| l == label).map(|(_, c)| c)
    }
}

const SCHEDULERS: [SchedulerKind; 3] = [SchedulerKind::Fair, SchedulerKind::Greedy, SchedulerKind::SingleThreaded];

fn base(family: PolicyFamily, size_ratio: u32) -> ExperimentConfig {
    ExperimentConfig {
        policy: PolicyConfig { family, size_ratio, ..Default::default() },
        ..Default::default()
    }
}

fn with_scheduler(mut cfg: ExperimentConfig, kind: SchedulerKind) -> ExperimentConfig {
    cfg.scheduler.kind = kind;
    cfg
}

fn per_scheduler(cfg: &ExperimentConfig, kinds: &[SchedulerKind]) -> Vec<(String, ExperimentConfig)> {
    kinds.iter().map(|&k| (k.name().to_string(), with_scheduler(cfg.clone(), k))).collect()
}

fn tiering() -> ExperimentConfig {
    base(PolicyFamily::Tiering, 3)
}

fn leveling() -> ExperimentConfig {
    base(PolicyFamily::Leveling, 10)
}

fn partitioned(testing_mode: bool) -> ExperimentConfig {
    let mut cfg = base(PolicyFamily::PartitionedLeveling, 10);
    cfg.policy.testing_mode = testing_mode;
    cfg.scheduler.kind = SchedulerKind::SingleThreaded;
    cfg
}

fn size_tiered(testing_mode: bool) -> ExperimentConfig {
    let mut cfg = base(PolicyFamily::SizeTiered, 10);
    cfg.policy.testing_mode = testing_mode;
    cfg
}

pub fn preset(name: &str) -> Result<Preset> {
    let variants = match name {
        "tiering_base" => per_scheduler(&tiering(), &SCHEDULERS),
        "leveling_base" => per_scheduler(&leveling(), &SCHEDULERS),
        "size_ratio_sweep" => {
            let mut v = Vec::new();
            for t in 2..=10 {
                for (family, label) in [(PolicyFamily::Tiering, "tiering"), (PolicyFamily::Leveling, "leveling")] {
                    let mut cfg = base(family, t);
                    cfg.policy.dynamic_level_size = family == PolicyFamily::Leveling;
                    for k in [SchedulerKind::Fair, SchedulerKind::Greedy] {
                        v.push((format!("{label}_t{t}_{}", k.name()), with_scheduler(cfg.clone(), k)));
                    }
                }
            }
            v
        }
        "constraint_local_vs_global" => {
            let mut v = Vec::new();
            for (cfg, label) in [(leveling(), "leveling"), (tiering(), "tiering")] {
                for scope in [ConstraintScope::Global, ConstraintScope::Local] {
                    for k in [SchedulerKind::Fair, SchedulerKind::Greedy] {
                        let mut c = with_scheduler(cfg.clone(), k);
                        c.scheduler.constraint = scope;
                        let scope_name = if scope == ConstraintScope::Global { "global" } else { "local" };
                        v.push((format!("{label}_{scope_name}_{}", k.name()), c));
                    }
                }
            }
            v
        }
        "burst_limit_vs_nolimit" => {
            let mut cfg = with_scheduler(leveling(), SchedulerKind::Greedy);
            cfg.arrivals = ArrivalSpec {
                kind: ArrivalSpecKind::OpenBursty,
                base_rate: 2000.0,
                base_duration: 1500.0,
                burst_rate: 8000.0,
                burst_duration: 300.0,
                duration: 7200.0,
                ..ArrivalSpec::default()
            };
            let mut limited = cfg.clone();
            limited.scheduler.write_interaction = WriteInteraction::RateLimit(4000.0);
            vec![("no_limit".into(), cfg), ("limit".into(), limited)]
        }
        "size_tiered_unfixed" => per_scheduler(&size_tiered(false), &[SchedulerKind::Fair, SchedulerKind::Greedy]),
        "size_tiered_fixed" => per_scheduler(&size_tiered(true), &[SchedulerKind::Fair, SchedulerKind::Greedy]),
        "leveldb_unfixed" => vec![("single_threaded".into(), partitioned(false))],
        "leveldb_fixed" => vec![("single_threaded".into(), partitioned(true))],
        "leveldb_partition_size_sweep" => {
            let mut v = Vec::new();
            let mut size = 8 * MIB;
            while size <= 32 * KIB * MIB {
                let mut cfg = partitioned(true);
                cfg.policy.partitioned.file_max = size;
                v.push((format!("file_max_{}mb", size / MIB), cfg));
                size *= 2;
            }
            v
        }
        "blsm_base" => {
            let mut cfg = leveling();
            cfg.sim.mem_component_size = (KIB * MIB / cfg.sim.entry_size) as f64;
            cfg.scheduler = SchedulerConfig { kind: SchedulerKind::Blsm, ..Default::default() };
            cfg.arrivals.clients = 8;
            vec![("blsm".into(), cfg)]
        }
        _ => return Err(Error::UnknownPreset(name.to_string())),
    };
    Ok(Preset { name: name.to_string(), variants })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{dump, parse};
    use crate::policy::MergePolicy;

    #[test]
    fn every_preset_validates_and_round_trips() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            assert!(!p.variants.is_empty(), "{name}");
            for (label, cfg) in &p.variants {
                cfg.validate().unwrap_or_else(|e| panic!("{name}/{label}: {e}"));
                let text = dump(cfg);
                assert_eq!(&parse(&text).unwrap(), cfg, "{name}/{label}");
            }
        }
        assert!(matches!(preset("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn leveling_base_shape() {
        let cfg = preset("leveling_base").unwrap().variants[0].1.clone();
        assert_eq!(cfg.policy.size_ratio, 10);
        assert_eq!(cfg.sim.mem_component_size, 131_072.0);
        assert_eq!(cfg.sim.bandwidth, 102_400.0);
        let policy = MergePolicy::new(&cfg.policy, &cfg.sim);
        assert_eq!(policy.levels, 3);
        let limit = crate::scheduler::ComponentLimit::resolve(&cfg.scheduler, &policy);
        assert_eq!(limit, crate::scheduler::ComponentLimit::Global(6));
    }

    #[test]
    fn partition_sweep_doubles_from_8mb_to_32gb() {
        let p = preset("leveldb_partition_size_sweep").unwrap();
        let sizes: Vec<u64> = p.variants.iter().map(|(_, c)| c.policy.partitioned.file_max).collect();
        assert_eq!(sizes.first(), Some(&(8 * MIB)));
        assert_eq!(sizes.last(), Some(&(32 * 1024 * MIB)));
        assert_eq!(sizes.len(), 13);
        assert!(sizes.windows(2).all(|w| w[1] == 2 * w[0]));
    }

    #[test]
    fn burst_variants() {
        let p = preset("burst_limit_vs_nolimit").unwrap();
        assert_eq!(p.variants.len(), 2);
        let limit = p.variant("limit").unwrap();
        assert_eq!(limit.scheduler.write_interaction, WriteInteraction::RateLimit(4000.0));
        let proc_ = limit.arrivals.process();
        assert_eq!(proc_.schedule().unwrap().rate_at(1600.0), 8000.0);
    }
}
