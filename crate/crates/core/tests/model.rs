mod common;

use std::process::Command;

use common::{calibration_path, model_sweep_checks};
use mcomm::model::{
    hit_rates, load_calibration, model_rows, parse_calibration, simulate, theoretical_max, ModelConfig, ModelError,
};
use proptest::prelude::*;

#[test]
fn calibrated_bus_limit_matches_the_hand_count() {
    let cal = load_calibration(calibration_path()).unwrap();
    // 12 memory operations to send and 11 to receive, 69 ns each.
    let oracle = 1e9 / ((12.0 + 11.0) * 69.0);
    let max = theoretical_max(&cal.config(1, 0.0)).unwrap();
    assert!((max - oracle).abs() < 1e-6, "{max} vs {oracle}");
    assert!((max - 630_000.0).abs() <= 6_300.0);
    // The bus limit ignores the core count.
    assert_eq!(theoretical_max(&cal.config(4, 0.0)).unwrap(), max);
    assert_eq!(theoretical_max(&cal.config(1, 1.0)), Err(ModelError::Degenerate));
}

#[test]
fn hit_rate_sweep_has_the_expected_shape() {
    let reached = model_sweep_checks(20, 50_000.0, 7).unwrap();
    assert!(reached > 0.3 && reached < 0.95, "{reached}");
}

#[test]
fn seeded_runs_are_bit_reproducible() {
    let cal = load_calibration(calibration_path()).unwrap();
    let rows = |seed| model_rows(&cal, &[1, 2], &[0.0, 0.5, 0.9], 20_000.0, seed).unwrap();
    let a = rows(11);
    assert_eq!(a, rows(11));
    assert_ne!(a, rows(12));
    assert!(a.iter().all(|r| r.stand_in_calibration));
}

#[test]
fn calibration_files_are_strict() {
    let ok = "mem_access_ns = 50.0\nops_send = 1.0\nops_recv = 1.0\ncache_hit_ns = 1.0\ntarget_rate = 1e6\n";
    assert_eq!(parse_calibration(ok).unwrap().mem_access_ns, 50.0);
    assert!(parse_calibration(&format!("{ok}cores = 2\n")).is_err());
    assert!(parse_calibration("mem_access_ns = 50.0\n").is_err());
    assert!(matches!(load_calibration("/no/such/file.toml"), Err(ModelError::Calibration { .. })));
    assert!(hit_rates(0.5, 0.5, 4).is_err());
    assert!(hit_rates(0.0, 1.0, 1).is_err());
    assert_eq!(hit_rates(0.0, 1.0, 5).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
}

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 0.0f64..0.95, 10.0f64..100.0, 1.0f64..20.0, 0.0f64..10.0, 1e5f64..3e6).prop_map(
        |(cores, h, mem, ops, hit, rate)| ModelConfig {
            cores,
            cache_hit_rate: h,
            mem_access_ns: mem,
            ops_send: ops,
            ops_recv: ops,
            target_rate: rate,
            cache_hit_ns: hit,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn model_invariants(cfg in small_config(), seed in any::<u64>()) {
        let r = simulate(&cfg, cfg.horizon_for(10_000.0), seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.bus_utilization));
        prop_assert!((0.0..=100.0).contains(&r.achieved_throughput_pct));
        prop_assert!(r.achieved_rate <= theoretical_max(&cfg).unwrap() * 1.01);
        prop_assert!(r.mean_sojourn_ns + 1e-9 >= cfg.bus_ns() + cfg.hit_ns());
        if !r.unstable {
            prop_assert!(r.little_error < 0.05, "{}", r.little_error);
        }
    }
}

#[test]
fn cli_sweeps_to_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let csv_out = dir.path().join("m.csv");
    let model = || {
        let mut c = Command::new(env!("CARGO_BIN_EXE_model"));
        c.arg("--calibration").arg(calibration_path());
        c
    };
    let status = model()
        .args(["--cores", "1,2", "--sweep", "0:0.9:4", "--completions", "10000", "--seed", "3", "--out"])
        .arg(&csv_out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&csv_out).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(reader.headers().unwrap().len(), 11);
    assert_eq!(reader.records().count(), 8);

    let json_out = dir.path().join("m.json");
    let status = model()
        .args(["--hit-rate", "0.5", "--target", "1e6", "--completions", "10000", "--format", "json", "--out"])
        .arg(&json_out)
        .status()
        .unwrap();
    assert!(status.success());
    let rows: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&json_out).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["target_rate"], 1e6);

    let bad = model().args(["--sweep", "0.9:0.1:3", "--out"]).arg(&json_out).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let both = model().args(["--sweep", "0:1:3", "--hit-rate", "0.5", "--out"]).arg(&json_out).output().unwrap();
    assert_eq!(both.status.code(), Some(2));
}
