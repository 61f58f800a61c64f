use approx::assert_relative_eq;
use tidac_core::meter::{measure_cost, snap_coherent, CaptureConfig, SpurMeter, Window};
use tidac_core::plant::{PlantModel, RegisterMap, TrimSteps};
use tidac_core::spectral::{analytic_spur_dbc, DacConfig, ImpairmentState, ToneSpec, DEFAULT_K_RANGE};
use tidac_core::waveform::{synthesize_waveform, Synthesizer};

fn dac(bits: u32) -> DacConfig {
    DacConfig::new(50e9, bits).unwrap()
}

fn flat_plant(cfg: DacConfig) -> PlantModel {
    PlantModel::unchecked(cfg, ImpairmentState::ideal(), TrimSteps::default(), RegisterMap::default()).unwrap()
}

/// Gain error whose analytic spur is `target` dBc at `tone`.
fn gain_error_for(cfg: &DacConfig, tone: &ToneSpec, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 0.2);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let s = analytic_spur_dbc(cfg, &ImpairmentState::from_errors(mid, 0.0), tone, DEFAULT_K_RANGE).unwrap();
        if s > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn snapping_example() {
    let cfg = dac(10);
    let capture = CaptureConfig { fft_size: 4096, oversample: 4, ..CaptureConfig::default() };
    assert_eq!(capture.capture_rate(&cfg), 200e9);
    let tone = snap_coherent(&ToneSpec::new(20e9, 1.0), &capture, &cfg);
    let bin = capture.bin_width(&cfg);
    assert_eq!(tone.freq_hz / bin, 410.0);
    assert!((tone.freq_hz - 20.0195e9).abs() < 1e5);
    let image_bins = tone.image_freq(&cfg) / bin;
    assert_eq!(image_bins, image_bins.round());
}

#[test]
fn coherent_tone_has_no_leakage() {
    let cfg = dac(40);
    let capture = CaptureConfig::default().noiseless();
    let tone = snap_coherent(&ToneSpec::new(13e9, 1.0), &capture, &cfg);
    let mut synth = Synthesizer::new(capture.fft_size, capture.oversample).unwrap();
    let spec = synth.render_spectrum(&cfg, &ImpairmentState::ideal(), &tone).unwrap();
    let k = (tone.freq_hz / capture.bin_width(&cfg)).round() as usize;
    let carrier = spec[k].norm_sqr();
    for adj in [k - 2, k - 1, k + 1, k + 2] {
        let dbc = 10.0 * (spec[adj].norm_sqr() / carrier).log10();
        assert!(dbc < -200.0, "bin {adj}: {dbc} dBc");
    }
}

#[test]
fn parseval_holds_for_the_capture() {
    let cfg = dac(10);
    let n = 8192;
    let imp = ImpairmentState { alpha: 0.02, gain_a: 1.03, gain_b: 0.99, skew_a_s: 1e-12, skew_b_s: 0.0 };
    let capture = CaptureConfig::default();
    let tone = snap_coherent(&ToneSpec::new(9e9, 0.8), &capture, &cfg);
    let mut synth = Synthesizer::new(n, 8).unwrap();
    let freq_power: f64 = synth.render_spectrum(&cfg, &imp, &tone).unwrap().iter().map(|c| c.norm_sqr()).sum();
    let wave = synthesize_waveform(&cfg, &imp, &tone, n, 8).unwrap();
    let time_power: f64 = wave.iter().map(|x| x * x).sum();
    assert_relative_eq!(time_power, freq_power / n as f64, max_relative = 1e-9);
}

#[test]
fn capture_start_offset_does_not_change_cost() {
    let cfg = dac(10);
    let capture = CaptureConfig::default().noiseless();
    let mut meter = SpurMeter::new(flat_plant(cfg), ToneSpec::new(21e9, 1.0), capture, 0).unwrap();
    let tone = *meter.tone();
    let imp = ImpairmentState { alpha: 0.004, gain_a: 1.01, ..ImpairmentState::ideal() };
    let wave = synthesize_waveform(&cfg, &imp, &tone, capture.fft_size, capture.oversample).unwrap();
    let (image, carrier) = meter.analyze(&wave).unwrap();
    for shift in [1, 7, 100, 4095] {
        let mut rotated = wave.clone();
        rotated.rotate_left(shift);
        let (i2, c2) = meter.analyze(&rotated).unwrap();
        assert_relative_eq!(image, i2, max_relative = 1e-9);
        assert_relative_eq!(carrier, c2, max_relative = 1e-9);
    }
}

#[test]
fn noise_at_minus_80_keeps_a_minus_50_spur_within_half_a_db() {
    let cfg = dac(10);
    let capture = CaptureConfig { noise_floor_dbc: Some(-80.0), ..CaptureConfig::default() };
    let tone = snap_coherent(&ToneSpec::new(20e9, 1.0), &capture, &cfg);
    let imp = ImpairmentState::from_errors(gain_error_for(&cfg, &tone, -50.0), 0.0);
    let spurs: Vec<f64> = (0..100)
        .map(|seed| {
            let mut m = SpurMeter::new(flat_plant(cfg), tone, capture, seed).unwrap();
            m.measure_impairment(&imp).unwrap().spur_dbc
        })
        .collect();
    let mean = spurs.iter().sum::<f64>() / 100.0;
    let std = (spurs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
    assert!(std < 0.5, "std {std} dB");
    assert!((mean + 50.0).abs() < 0.5, "mean {mean}");
}

#[test]
fn noiseless_measurement_is_a_pure_function() {
    let cfg = dac(10);
    let plant = PlantModel::default_for(cfg).unwrap();
    let capture = CaptureConfig::default().noiseless();
    let file = plant.reset_file();
    let tone = ToneSpec::new(12e9, 1.0);
    let a = measure_cost(&plant, &file, &tone, &capture, 1).unwrap();
    let b = measure_cost(&plant, &file, &tone, &capture, 99).unwrap();
    assert_eq!(a.image_power, b.image_power);
    assert_eq!(a.carrier_power, b.carrier_power);
}

#[test]
fn seeded_noise_is_reproducible() {
    let cfg = dac(10);
    let plant = PlantModel::default_for(cfg).unwrap();
    let capture = CaptureConfig::default();
    let run = |seed| {
        let mut m = SpurMeter::new(plant.clone(), ToneSpec::new(12e9, 1.0), capture, seed).unwrap();
        (0..5).map(|_| m.measure(&plant.reset_file()).unwrap().spur_dbc).collect::<Vec<_>>()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn windowed_non_coherent_capture_tracks_the_spur() {
    let cfg = dac(10);
    let capture = CaptureConfig {
        coherent: false,
        window: Window::BlackmanHarris,
        ..CaptureConfig::default().noiseless()
    };
    let tone = ToneSpec::new(17.3e9, 1.0);
    let mut m = SpurMeter::new(flat_plant(cfg), tone, capture, 0).unwrap();
    for target in [-30.0, -40.0] {
        let imp = ImpairmentState::from_errors(gain_error_for(&cfg, &tone, target), 0.0);
        let s = m.measure_impairment(&imp).unwrap().spur_dbc;
        assert!((s - target).abs() < 0.5, "{target}: {s}");
    }
}

#[test]
fn calibrated_registers_reach_the_quantization_floor() {
    let cfg = dac(10);
    let plant = PlantModel::default_for(cfg).unwrap();
    let capture = CaptureConfig::default().noiseless();
    let tone = ToneSpec::new(20e9, 1.0);
    let reset = measure_cost(&plant, &plant.reset_file(), &tone, &capture, 0).unwrap().spur_dbc;
    let (file, _) = plant.calibration_check().unwrap();
    let tuned = measure_cost(&plant, &file, &tone, &capture, 0).unwrap().spur_dbc;
    assert!(reset > -35.0 && tuned < -60.0, "{reset} -> {tuned}");
}
