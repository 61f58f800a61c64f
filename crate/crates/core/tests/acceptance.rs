//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tidac_core::anneal::{anneal, metropolis_accept, temperature_schedule, AnnealParams};
use tidac_core::experiment::{calibrate_once, run_contours, run_sweep, AnnealSection, ExperimentConfig};
use tidac_core::meter::{CaptureConfig, SpurMeter};
use tidac_core::plant::{PlantModel, RegisterFile, RegisterMap, RegisterRole, TrimSteps};
use tidac_core::spectral::{analytic_spur_dbc, DacConfig, ImpairmentState, ToneSpec, DEFAULT_K_RANGE};

type Outcome = Result<String, String>;

fn precise_dac() -> DacConfig {
    DacConfig::new(50e9, 40).unwrap()
}

fn ideal_plant(dac: DacConfig) -> PlantModel {
    PlantModel::unchecked(dac, ImpairmentState::ideal(), TrimSteps::default(), RegisterMap::default()).unwrap()
}

fn cancellation() -> Outcome {
    let dac = precise_dac();
    let mut worst = f64::NEG_INFINITY;
    for ratio in [0.02, 0.11, 0.23, 0.31, 0.4, 0.47] {
        let tone = ToneSpec::new(ratio * dac.sample_rate_hz, 1.0);
        let analytic = analytic_spur_dbc(&dac, &ImpairmentState::ideal(), &tone, DEFAULT_K_RANGE).map_err(|e| e.to_string())?;
        let mut meter = SpurMeter::new(ideal_plant(dac), tone, CaptureConfig::default().noiseless(), 0).unwrap();
        let measured = meter.measure_impairment(&ImpairmentState::ideal()).unwrap().spur_dbc;
        worst = worst.max(analytic).max(measured);
    }
    let msg = format!("worst spur {worst:.1} dBc over 6 tones (bound -180)");
    if worst <= -180.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn oracle_equivalence() -> Outcome {
    let dac = precise_dac();
    let fs = dac.sample_rate_hz;
    let ts = dac.sample_period();
    let capture = CaptureConfig::default().noiseless();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut compared, mut worst) = (0usize, 0.0f64);
    let mut case = 0;
    while compared < 240 {
        case += 1;
        let ratio = rng.gen_range(0.01..0.49);
        if (ratio - 0.25f64).abs() < 0.005 {
            continue;
        }
        let imp = ImpairmentState {
            alpha: rng.gen_range(-0.05..0.05),
            gain_a: 1.0 + rng.gen_range(-0.05..0.05),
            gain_b: 1.0 + rng.gen_range(-0.05..0.05),
            skew_a_s: rng.gen_range(-0.1..0.1) * ts,
            skew_b_s: rng.gen_range(-0.1..0.1) * ts,
        };
        let mut meter = SpurMeter::new(ideal_plant(dac), ToneSpec::new(ratio * fs, 1.0), capture, 0).unwrap();
        let tone = *meter.tone();
        let analytic = analytic_spur_dbc(&dac, &imp, &tone, DEFAULT_K_RANGE).map_err(|e| e.to_string())?;
        let measured = meter.measure_impairment(&imp).map_err(|e| e.to_string())?.spur_dbc;
        if analytic > -100.0 {
            compared += 1;
            worst = worst.max((analytic - measured).abs());
        }
    }
    let msg = format!("{compared} of {case} cases above -100 dBc, worst |analytic - FFT| {worst:.2e} dB");
    if worst <= 0.1 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn contours(out: &std::path::Path) -> Outcome {
    let mut cfg = ExperimentConfig::default_for(DacConfig::new(50e9, 10).unwrap());
    cfg.output_dir = out.to_path_buf();
    let report = run_contours(&cfg).map_err(|e| e.to_string())?;
    let worst = report.curves.iter().map(|c| c.max_deviation_db).fold(0.0, f64::max);
    let c20 = report
        .curves
        .iter()
        .find(|c| (c.f_out_hz - 20e9).abs() < 1.0)
        .ok_or("no 20 GHz curve")?;

    // Dense sweep of the plane at 20 GHz: extent of the passing region.
    let dac = precise_dac();
    let tone = ToneSpec::new(20e9, 1.0);
    let (mut g_ext, mut d_ext) = (0.0f64, 0.0f64);
    let steps = 400;
    for i in 0..=steps {
        let g = 2.0 * i as f64 / steps as f64;
        for j in 0..=steps {
            let d = 0.5 * j as f64 / steps as f64;
            let imp = ImpairmentState::from_errors(g / 100.0, d / 100.0);
            if analytic_spur_dbc(&dac, &imp, &tone, DEFAULT_K_RANGE).unwrap() <= -50.0 {
                g_ext = g_ext.max(g);
                d_ext = d_ext.max(d);
            }
        }
    }
    let cell = (2.0 / steps as f64, 0.5 / steps as f64);
    let agrees = (c20.max_gain_error_pct - g_ext).abs() <= cell.0 && (c20.max_duty_error_pct - d_ext).abs() <= cell.1;
    let msg = format!(
        "{} curves, worst deviation {worst:.1e} dB; 20 GHz region gain < {:.3}%, duty < {:.3}% (dense sweep {g_ext:.3}%, {d_ext:.4}%)",
        report.curves.len(),
        c20.max_gain_error_pct,
        c20.max_duty_error_pct
    );
    if worst <= 0.1 && agrees && c20.max_gain_error_pct < 1.0 && c20.max_duty_error_pct < 0.3 && report.nested {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn toy_plant() -> Outcome {
    let dac = precise_dac();
    let map = RegisterMap::uniform(4).with_active(&[RegisterRole::CurrentA, RegisterRole::DutyCoarse]);
    let base = ImpairmentState { alpha: 0.0071, gain_a: 1.0113, gain_b: 1.0, skew_a_s: 0.0, skew_b_s: 0.0 };
    let steps = TrimSteps { current_gain: 2.5e-3, duty_coarse: 2e-3, ..TrimSteps::default() };
    let plant = PlantModel::unchecked(dac, base, steps, map.clone()).unwrap();
    let tone = ToneSpec::new(20e9, 1.0);
    let capture = CaptureConfig { fft_size: 2048, ..CaptureConfig::default().noiseless() };

    let mut meter = SpurMeter::new(plant.clone(), tone, capture, 0).unwrap();
    let (ia, id) = (map.address_of(RegisterRole::CurrentA), map.address_of(RegisterRole::DutyCoarse));
    let mut best = (f64::INFINITY, plant.reset_file());
    for a in 0..16 {
        for d in 0..16 {
            let file = plant.reset_file().write(&map, ia, a).unwrap().write(&map, id, d).unwrap();
            let spur = meter.measure(&file).unwrap().spur_dbc;
            if spur < best.0 {
                best = (spur, file);
            }
        }
    }

    // No measurement budget here, so the slower warm-up rule applies:
    // median uphill step accepted with probability 0.8, T_min = T_max / 100.
    let mut slow = AnnealSection::default();
    slow.warm_up.acceptance = 0.8;
    slow.warm_up.t_min_ratio = 0.01;
    let hits = |section: &AnnealSection| -> Result<usize, String> {
        let mut hits = 0;
        for seed in 0..100 {
            let (run, _) = calibrate_once(&plant, &tone, &capture, section, seed).map_err(|e| e.to_string())?;
            if run.best_state == best.1.codes() {
                hits += 1;
            }
        }
        Ok(hits)
    };
    let (found, found_fast) = (hits(&slow)?, hits(&AnnealSection::default())?);
    let msg = format!(
        "global optimum {} ({:.1} dBc) reached in {found}/100 seeds ({found_fast}/100 with the default short schedule)",
        best.1, best.0
    );
    if found >= 95 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn sweep(out: &std::path::Path) -> (Outcome, Outcome) {
    let mut cfg = ExperimentConfig::default_for(DacConfig::new(50e9, 10).unwrap());
    cfg.output_dir = out.to_path_buf();
    let report = match run_sweep(&cfg) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Err("sweep failed".into())),
    };
    let ratio = report.sa_mean_measurements / 160.0;
    let msg5 = format!(
        "{:.0}% of {} seeds pass at all {} tones, mean {:.0} measurements",
        100.0 * report.seeds_passing_all,
        report.seeds.len(),
        report.rows.len(),
        report.sa_mean_measurements
    );
    let five = if report.seeds_passing_all >= 0.95 && (0.5..=2.0).contains(&ratio) { Ok(msg5) } else { Err(msg5) };
    let msg6 = format!(
        "SA <= grid at every top-quartile tone in {:.0}% of seeds, {:.0} vs {:.0} measurements",
        100.0 * report.sa_beats_grid_top_quartile,
        report.sa_mean_measurements,
        report.grid_measurements
    );
    let six = if report.sa_beats_grid_top_quartile >= 0.8 && report.sa_mean_measurements < report.grid_measurements {
        Ok(msg6)
    } else {
        Err(msg6)
    };
    (five, six)
}

fn acceptance_law() -> Outcome {
    let trials = 10_000;
    let beta = 50.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_sigma = 0.0f64;
    for (delta, temperature) in [(0.01, 1.0), (0.02, 0.5), (0.005, 0.1), (0.1, 2.0)] {
        let p = (-beta * delta / temperature).exp();
        let hits = (0..trials).filter(|_| metropolis_accept(delta, temperature, beta, rng.gen::<f64>())).count();
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        worst_sigma = worst_sigma.max((hits as f64 / trials as f64 - p).abs() / sigma);
    }
    let msg = format!("4 (dE, T) pairs x 1e4 trials, worst deviation {worst_sigma:.2} sigma");
    if worst_sigma <= 3.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn schedule() -> Outcome {
    let temps = temperature_schedule(1.0, 0.01, 0.8);
    let direct = (0..).take_while(|n| 0.8f64.powi(*n) > 0.01).count();
    let map = RegisterMap::default();
    let params = AnnealParams { t_max: 1.0, t_min: 0.01, k_inner: 2, ..AnnealParams::default() };
    let mut flat = |_: &RegisterFile| -> tidac_core::Result<f64> { Ok(0.0) };
    let r = anneal(&mut flat, &map, &RegisterFile::reset(&map), &params).map_err(|e| e.to_string())?;
    let msg = format!(
        "schedule {} temperatures, direct count {direct}, annealer {} outer iterations, {} measurements",
        temps.len(),
        r.outer_iterations,
        r.measurement_count
    );
    if temps.len() == 21 && direct == 21 && r.outer_iterations == 21 && r.measurement_count == 1 + 2 * 21 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    let mut report = |n: usize, name: &str, started: Instant, o: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match o {
            Ok(m) => println!("PASS {n}. {name}: {m} [{secs:.1}s]"),
            Err(m) => {
                failed += 1;
                println!("FAIL {n}. {name}: {m} [{secs:.1}s]")
            }
        }
    };
    let t = Instant::now();
    report(1, "cancellation identity", t, cancellation());
    let t = Instant::now();
    report(2, "oracle equivalence", t, oracle_equivalence());
    let t = Instant::now();
    report(3, "contour self-consistency", t, contours(&dir.path().join("contours")));
    let t = Instant::now();
    report(4, "toy-plant global optimum", t, toy_plant());
    let t = Instant::now();
    let (five, six) = sweep(&dir.path().join("sweep"));
    report(5, "full calibration sweep", t, five);
    report(6, "SA vs grid search", t, six);
    let t = Instant::now();
    report(7, "acceptance-probability law", t, acceptance_law());
    let t = Instant::now();
    report(8, "schedule arithmetic", t, schedule());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
