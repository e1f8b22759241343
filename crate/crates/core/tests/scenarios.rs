use std::fs;
use std::path::PathBuf;

use moe_offload_core::config::{
    load_scenario, HardwareProfile, KvCacheConfig, ModelConfig, Scenario,
};
use moe_offload_core::scheduler::run_schedule;
use moe_offload_core::sim::simulate_run;
use moe_offload_core::workload::{write_trace, LengthDistribution, WorkloadSpec};
use moe_offload_core::{stage1, Error};

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn shipped_scenarios_load_and_round_trip() {
    let dir = scenario_dir();
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let text = fs::read_to_string(&path).unwrap();
        let s = load_scenario(&text, Some(&dir), 0)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = load_scenario(&s.to_toml_string(), Some(&dir), 0).unwrap();
        assert_eq!(
            s.model.derived(),
            again.model.derived(),
            "{}",
            path.display()
        );
        assert_eq!(s.kv_cache, again.kv_cache);
        assert_eq!(s.workload, again.workload);
        assert!(stage1::report(&s).is_ok());
        seen += 1;
    }
    assert!(seen >= 3);
}

#[test]
fn trace_file_workload_resolves_relative_to_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let wl = LengthDistribution::aime(200, 4).sample().unwrap();
    write_trace(fs::File::create(dir.path().join("aime.csv")).unwrap(), &wl).unwrap();
    let text = r#"
[hardware]
preset = "a40-testbed"

[model]
preset = "mixtral-8x7b"

[kv_cache]
capacity_gb = 20
block_size = 16

[workload]
trace = "aime.csv"
"#;
    let s = load_scenario(text, Some(dir.path()), 0).unwrap();
    assert_eq!(s.workload, wl);
    let missing = load_scenario(text, Some(&scenario_dir()), 0);
    assert!(missing.is_err());
}

#[test]
fn heterogeneous_run_conserves_tokens() {
    let m = ModelConfig::mixtral_8x7b();
    let wl = LengthDistribution::mtbench(128, 3000, 9).sample().unwrap();
    let want_gen: u64 = wl.sequences.iter().map(|s| s.gen_len).sum();
    let want_prompt: u64 = wl.sequences.iter().map(|s| s.prompt_len).sum();
    let s = Scenario::new(
        HardwareProfile::a40_testbed(),
        m,
        KvCacheConfig::from_bytes(15e9, &m, 16).unwrap(),
        wl,
    )
    .unwrap();
    let tr = simulate_run(&s, 1).unwrap();
    assert_eq!(tr.summary.generated_tokens, want_gen);
    // re-prefill after preemption adds work, it never removes any
    assert!(tr.summary.prompt_tokens >= want_prompt);
    assert!(tr.summary.preemptions > 0);
    let plans = run_schedule(
        &s.workload,
        s.kv_cache.num_blocks,
        16,
        tr.summary.n_real,
        s.options.max_iterations,
    )
    .unwrap();
    assert_eq!(plans.iterations(), tr.summary.iterations);
    assert_eq!(plans.total_preemptions(), tr.summary.preemptions);
}

#[test]
fn oversized_sequence_is_infeasible() {
    let m = ModelConfig::mixtral_8x7b();
    let s = Scenario::new(
        HardwareProfile::a40_testbed(),
        m,
        KvCacheConfig::new(256, 16).unwrap(),
        WorkloadSpec::uniform(200, 100, 4),
    )
    .unwrap();
    assert!(matches!(simulate_run(&s, 0), Err(Error::Infeasible(_))));
}
