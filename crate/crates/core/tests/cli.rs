use std::fs;
use std::path::Path;
use std::process::Command;

use stallsim::config::parse;
use stallsim::presets::preset;

const SMALL: &[&str] = &[
    "--set",
    "sim.entry_size=1",
    "--set",
    "sim.mem_component_size=1000",
    "--set",
    "sim.bandwidth=10000",
    "--set",
    "sim.keyspace=100000",
    "--set",
    "sim.dataset_size=100000",
    "--set",
    "policy.family=tiering",
    "--set",
    "policy.size_ratio=3",
    "--set",
    "harness.test_duration=600",
    "--set",
    "harness.warmup=100",
    "--set",
    "harness.run_duration=600",
];

fn stallsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stallsim"))
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn two_phase_outputs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let status = stallsim().arg("two-phase").args(SMALL).arg("--output-dir").arg(dir).status().unwrap();
        assert!(status.success());
    }
    let files = listing(&a);
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(names, ["components.csv", "running.json", "stalls.csv", "testing.json", "throughput.csv"]);
    assert_eq!(files, listing(&b));
}

#[test]
fn rho_sweep_writes_one_directory_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let status = stallsim()
        .args(["sweep", "--axis", "rho", "--values", "0.5,0.9"])
        .args(SMALL)
        .arg("--output-dir")
        .arg(tmp.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(tmp.path().join("testing.json").is_file());
    assert!(tmp.path().join("rho_0.5/running.json").is_file());
    assert!(tmp.path().join("rho_0.9/running.json").is_file());
}

#[test]
fn invalid_configuration_exits_with_one() {
    let out = stallsim().args(["simulate", "--set", "policy.size_ratio=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let out = stallsim().args(["simulate", "--set", "no.such.key=3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = stallsim().args(["preset", "nope", "--dump"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn preset_dump_parses_back() {
    let out = stallsim().args(["preset", "leveling_base", "--dump", "--variant", "greedy"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let expected = preset("leveling_base").unwrap().variant("greedy").unwrap().clone();
    assert_eq!(parse(&text).unwrap(), expected);
}
