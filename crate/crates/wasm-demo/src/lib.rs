//! Browser bindings: spectrum view, spur level curves and a calibration trace.

use tidac_core::experiment::{calibrate_once, AnnealSection};
use tidac_core::meter::{snap_coherent, CaptureConfig};
use tidac_core::plant::PlantModel;
use tidac_core::spectral::{
    analytic_spur_dbc, level_curve, ContourGrid, DacConfig, ImpairmentState, ToneSpec, DEFAULT_K_RANGE,
};
use tidac_core::waveform::Synthesizer;
use wasm_bindgen::prelude::*;

const SAMPLE_RATE_HZ: f64 = 50e9;

fn dac(bits: u32) -> Result<DacConfig, JsError> {
    DacConfig::new(SAMPLE_RATE_HZ, bits).map_err(err)
}

fn err(e: tidac_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn impairment(gain_error_pct: f64, duty_error_pct: f64) -> ImpairmentState {
    ImpairmentState::from_errors(gain_error_pct / 100.0, duty_error_pct / 100.0)
}

/// Output spectrum in dBc over `[0, f_s/2]` followed by the snapped tone
/// frequency in GHz.
#[wasm_bindgen]
pub fn spectrum_dbc(gain_error_pct: f64, duty_error_pct: f64, f_out_ghz: f64, bits: u32) -> Result<Vec<f64>, JsError> {
    let cfg = dac(bits)?;
    let capture = CaptureConfig { fft_size: 4096, ..CaptureConfig::default().noiseless() };
    let tone = snap_coherent(&ToneSpec::new(f_out_ghz * 1e9, 1.0), &capture, &cfg);
    let mut synth = Synthesizer::new(capture.fft_size, capture.oversample).map_err(err)?;
    let spec = synth.render_spectrum(&cfg, &impairment(gain_error_pct, duty_error_pct), &tone).map_err(err)?;
    let bins = capture.fft_size / (2 * capture.oversample);
    let power: Vec<f64> = spec[..=bins].iter().map(|c| c.norm_sqr()).collect();
    let carrier = power.iter().copied().fold(0.0, f64::max).max(1e-300);
    let mut out: Vec<f64> = power.iter().map(|p| 10.0 * (p.max(1e-30) / carrier).log10()).collect();
    out.push(tone.freq_hz / 1e9);
    Ok(out)
}

/// Closed-form image level in dBc.
#[wasm_bindgen]
pub fn analytic_spur(gain_error_pct: f64, duty_error_pct: f64, f_out_ghz: f64) -> Result<f64, JsError> {
    let cfg = dac(40)?;
    let tone = ToneSpec::new(f_out_ghz * 1e9, 1.0);
    analytic_spur_dbc(&cfg, &impairment(gain_error_pct, duty_error_pct), &tone, DEFAULT_K_RANGE).map_err(err)
}

/// Level curve as interleaved `(gain_error_pct, duty_error_pct)` pairs.
#[wasm_bindgen]
pub fn contour(f_out_ghz: f64, threshold_dbc: f64) -> Result<Vec<f64>, JsError> {
    let cfg = dac(40)?;
    let tone = ToneSpec::new(f_out_ghz * 1e9, 1.0);
    let points = level_curve(&cfg, &tone, threshold_dbc, &ContourGrid::default()).map_err(err)?;
    Ok(points.iter().flat_map(|p| [p.gain_error_pct, p.duty_error_pct]).collect())
}

/// Anneals the default plant and returns the best measured spur after every
/// measurement, followed by the noiseless pre- and post-calibration spur.
#[wasm_bindgen]
pub fn calibrate(f_out_ghz: f64, seed: u32, noise_floor_dbc: f64) -> Result<Vec<f64>, JsError> {
    let plant = PlantModel::default_for(dac(10)?).map_err(err)?;
    let capture = CaptureConfig {
        fft_size: 2048,
        noise_floor_dbc: (noise_floor_dbc > f64::NEG_INFINITY).then_some(noise_floor_dbc),
        ..CaptureConfig::default()
    };
    let tone = ToneSpec::new(f_out_ghz * 1e9, 1.0);
    let (run, result) =
        calibrate_once(&plant, &tone, &capture, &AnnealSection::default(), seed as u64).map_err(err)?;
    let mut out: Vec<f64> = result.cost_trace.iter().map(|e| e.best_spur_dbc.unwrap_or(f64::NAN)).collect();
    out.push(run.pre_cal_spur_dbc);
    out.push(run.post_cal_spur_dbc);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_has_carrier_at_zero_dbc() {
        let s = spectrum_dbc(2.0, 1.0, 20.0, 10).unwrap();
        let max = s[..s.len() - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(max.abs() < 1e-9);
    }

    #[test]
    fn contour_is_pairs() {
        let c = contour(20.0, -50.0).unwrap();
        assert!(!c.is_empty() && c.len().is_multiple_of(2));
    }

    #[test]
    fn calibrate_improves_spur() {
        let t = calibrate(20.0, 1, -90.0).unwrap();
        let post = t[t.len() - 1];
        let pre = t[t.len() - 2];
        assert!(post < pre - 20.0, "{pre} -> {post}");
    }
}
