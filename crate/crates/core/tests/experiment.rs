use std::fs;

use tidac_core::experiment::{parse_config, run_calibrate, run_contours, ExperimentConfig};
use tidac_core::spectral::{DacConfig, SPUR_FLOOR_DBC};
use tidac_core::Error;

fn quick(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_for(DacConfig::new(50e9, 10).unwrap());
    cfg.capture.fft_size = 2048;
    cfg.seeds = vec![0, 1, 2];
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn calibrate_meets_the_default_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.seeds = (0..10).collect();
    let report = run_calibrate(&cfg).unwrap();
    assert!(report.passed, "{:?}", report.checks);
    assert!(report.post_cal_spur_dbc.mean <= -50.0);
    for run in &report.runs {
        assert!(run.pre_cal_spur_dbc > -35.0);
        assert_eq!(run.measurement_count, 151);
        assert!(dir.path().join(format!("trace_seed{}.csv", run.seed)).exists());
    }
    let json = fs::read_to_string(dir.path().join("calibrate_report.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(value["config_hash"].as_str().unwrap(), cfg.hash().unwrap());
    assert_eq!(value["seeds"].as_array().unwrap().len(), 10);
}

#[test]
fn ideal_plant_stays_at_the_floor() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.dac.resolution_bits = 40;
    cfg.plant.gain_a = 1.0;
    cfg.plant.alpha = 0.0;
    cfg.plant.skew_a_ts = 0.0;
    cfg.capture.noise_floor_dbc = f64::NEG_INFINITY;
    let report = run_calibrate(&cfg).unwrap();
    for run in &report.runs {
        assert_eq!(run.post_cal_spur_dbc, SPUR_FLOOR_DBC);
        assert_eq!(run.best_state, [128; 6]);
        assert_eq!(run.measurement_count, 1 + cfg.anneal.k_inner * run.outer_iterations);
    }
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_calibrate(&quick(a.path())).unwrap();
    run_calibrate(&quick(b.path())).unwrap();
    for name in ["calibrate_report.json", "trace_seed0.csv", "trace_seed2.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn contour_files_have_the_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_contours(&quick(dir.path())).unwrap();
    assert!(report.passed);
    for c in &report.curves {
        let text = fs::read_to_string(dir.path().join(&c.file)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("gain_error_pct,duty_error_pct"));
        assert_eq!(lines.count(), c.points.len());
    }
}

#[test]
fn config_file_round_trips_and_reports_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    let path = dir.path().join("experiment.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    assert_eq!(parse_config(&path).unwrap(), cfg);

    let text = cfg.to_toml().unwrap().replace("gamma = 0.8", "gamma = 1.2").replace("count = 12", "count = 0");
    fs::write(&path, text).unwrap();
    match parse_config(&path) {
        Err(Error::Validation(v)) => {
            assert!(v.iter().any(|m| m.starts_with("anneal")), "{v:?}");
            assert!(v.iter().any(|m| m.starts_with("sweep")), "{v:?}");
        }
        other => panic!("{other:?}"),
    }

    fs::write(&path, "[dac]\nsample_rate_hz = \"fast\"\n").unwrap();
    let msg = parse_config(&path).unwrap_err().to_string();
    assert!(msg.contains("experiment.toml") && msg.contains("line 2"), "{msg}");
}

#[test]
fn uncalibratable_plant_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.plant.gain_a = 1.3;
    match cfg.validate() {
        Err(Error::Validation(v)) => assert!(v.iter().any(|m| m.starts_with("plant")), "{v:?}"),
        other => panic!("{other:?}"),
    }
}
