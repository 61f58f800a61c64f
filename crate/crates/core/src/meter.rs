//! Closed-loop spur measurement: capture the DAC output, FFT it, and read the
//! power in the interleave-image bin.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::plant::{PlantModel, RegisterFile};
use crate::spectral::{DacConfig, ImpairmentState, ToneSpec, SPUR_FLOOR_DBC};
use crate::waveform::Synthesizer;

/// Bins summed around each tone in non-coherent mode.
const NONCOHERENT_HALF_SPAN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    Rectangular,
    BlackmanHarris,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::BlackmanHarris => {
                let (a0, a1, a2, a3) = (0.35875, 0.48829, 0.14128, 0.01168);
                (0..n)
                    .map(|i| {
                        let x = 2.0 * PI * i as f64 / n as f64;
                        a0 - a1 * x.cos() + a2 * (2.0 * x).cos() - a3 * (3.0 * x).cos()
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureConfig {
    pub fft_size: usize,
    /// Capture rate as a multiple of `f_s`.
    pub oversample: usize,
    pub coherent: bool,
    pub window: Window,
    /// Additive per-bin measurement noise relative to the carrier; `None` is noiseless.
    pub noise_floor_dbc: Option<f64>,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            fft_size: 8192,
            oversample: 8,
            coherent: true,
            window: Window::Rectangular,
            noise_floor_dbc: Some(-90.0),
        }
    }
}

impl CaptureConfig {
    pub fn noiseless(self) -> Self {
        Self { noise_floor_dbc: None, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 1024 || !self.fft_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "fft_size must be a power of two >= 1024, got {}",
                self.fft_size
            )));
        }
        if self.oversample < 4 {
            return Err(Error::InvalidConfig(format!("oversample must be >= 4, got {}", self.oversample)));
        }
        if !self.fft_size.is_multiple_of(2 * self.oversample) {
            return Err(Error::InvalidConfig(format!(
                "fft_size {} must be a multiple of 2 x oversample",
                self.fft_size
            )));
        }
        if let Some(nf) = self.noise_floor_dbc {
            if !(nf.is_finite() && nf < 0.0) {
                return Err(Error::InvalidConfig(format!("noise_floor_dbc must be negative, got {nf}")));
            }
        }
        Ok(())
    }

    pub fn capture_rate(&self, dac: &DacConfig) -> f64 {
        dac.sample_rate_hz * self.oversample as f64
    }

    pub fn bin_width(&self, dac: &DacConfig) -> f64 {
        self.capture_rate(dac) / self.fft_size as f64
    }
}

/// Moves the tone onto the nearest capture bin whose image `f_s/2 - f_out`
/// also lands on a bin, avoiding DC, Nyquist, and `f_s/4`.
pub fn snap_coherent(tone: &ToneSpec, cfg: &CaptureConfig, dac: &DacConfig) -> ToneSpec {
    let bin = cfg.bin_width(dac);
    // f_s/2 sits on bin fft_size / (2 * oversample), so any integer carrier bin
    // gives an integer image bin.
    let half_rate_bin = (cfg.fft_size / (2 * cfg.oversample)) as i64;
    let quarter_bin = half_rate_bin / 2;
    let mut m = (tone.freq_hz / bin).round() as i64;
    m = m.clamp(1, half_rate_bin - 1);
    if half_rate_bin % 2 == 0 && m == quarter_bin {
        m = if tone.freq_hz / bin < quarter_bin as f64 { m - 1 } else { m + 1 };
    }
    ToneSpec { freq_hz: m as f64 * bin, amplitude: tone.amplitude }
}

/// Unit of the optimizer cost derived from a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostScale {
    /// Image-bin power, linear.
    Linear,
    /// Image-bin power in dB.
    Decibel,
}

/// Image power below this is reported at the floor.
const MIN_POWER: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpurMeasurement {
    pub image_power: f64,
    pub carrier_power: f64,
    pub spur_dbc: f64,
    pub tone: ToneSpec,
    pub measurement_index: usize,
}

impl SpurMeasurement {
    fn new(image_power: f64, carrier_power: f64, tone: ToneSpec, measurement_index: usize) -> Self {
        let spur_dbc = spur_dbc(image_power, carrier_power);
        Self { image_power, carrier_power, spur_dbc, tone, measurement_index }
    }

    pub fn cost(&self, scale: CostScale) -> f64 {
        match scale {
            CostScale::Linear => self.image_power,
            CostScale::Decibel => 10.0 * self.image_power.max(MIN_POWER).log10(),
        }
    }
}

pub fn spur_dbc(image_power: f64, carrier_power: f64) -> f64 {
    if !(image_power > 0.0 && carrier_power > 0.0) {
        return SPUR_FLOOR_DBC;
    }
    (10.0 * (image_power / carrier_power).log10()).max(SPUR_FLOOR_DBC)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeterTraceRow {
    pub index: usize,
    pub f_out_hz: f64,
    pub spur_dbc: f64,
    pub cost_linear: f64,
}

/// One measurement session: plant, tone, capture settings, noise stream and
/// a running measurement counter.
pub struct SpurMeter {
    plant: PlantModel,
    tone: ToneSpec,
    capture: CaptureConfig,
    synth: Synthesizer,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    window_power: f64,
    rng: ChaCha8Rng,
    count: usize,
    wave: Vec<f64>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
    trace: Option<Vec<MeterTraceRow>>,
}

impl SpurMeter {
    pub fn new(plant: PlantModel, tone: ToneSpec, capture: CaptureConfig, seed: u64) -> Result<Self> {
        capture.validate()?;
        let tone = if capture.coherent { snap_coherent(&tone, &capture, &plant.dac) } else { tone };
        tone.validate(&plant.dac)?;
        let synth = Synthesizer::new(capture.fft_size, capture.oversample)?;
        let fft = FftPlanner::new().plan_fft_forward(capture.fft_size);
        let window = capture.window.coefficients(capture.fft_size);
        let window_power = window.iter().map(|w| w * w).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            scratch: vec![Complex64::default(); fft.get_inplace_scratch_len()],
            buf: vec![Complex64::default(); capture.fft_size],
            wave: Vec::with_capacity(capture.fft_size),
            plant,
            tone,
            capture,
            synth,
            fft,
            window,
            window_power,
            rng,
            count: 0,
            trace: None,
        })
    }

    /// The tone actually generated (snapped when coherent).
    pub fn tone(&self) -> &ToneSpec {
        &self.tone
    }

    pub fn plant(&self) -> &PlantModel {
        &self.plant
    }

    pub fn capture(&self) -> &CaptureConfig {
        &self.capture
    }

    /// Number of measurements taken in this session.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[MeterTraceRow] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in self.trace() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Measures the image spur with the plant programmed to `file`.
    pub fn measure(&mut self, file: &RegisterFile) -> Result<SpurMeasurement> {
        let imp = self.plant.impairments(file);
        self.measure_impairment(&imp)
    }

    /// Measures the image spur of an explicit impairment state.
    pub fn measure_impairment(&mut self, imp: &ImpairmentState) -> Result<SpurMeasurement> {
        let mut wave = std::mem::take(&mut self.wave);
        let rendered = self.synth.render(&self.plant.dac, imp, &self.tone, &mut wave);
        let result = rendered.and_then(|_| self.analyze(&wave));
        self.wave = wave;
        let (image, carrier) = result?;
        let m = SpurMeasurement::new(image, carrier, self.tone, self.count);
        self.count += 1;
        if let Some(trace) = &mut self.trace {
            trace.push(MeterTraceRow {
                index: m.measurement_index,
                f_out_hz: self.tone.freq_hz,
                spur_dbc: m.spur_dbc,
                cost_linear: m.image_power,
            });
        }
        Ok(m)
    }

    /// Window, FFT and read (image, carrier) power from a captured record.
    /// Noise, when enabled, is drawn from the session stream.
    pub fn analyze(&mut self, wave: &[f64]) -> Result<(f64, f64)> {
        let n = self.capture.fft_size;
        if wave.len() != n {
            return Err(Error::InvalidConfig(format!("record has {} samples, expected {n}", wave.len())));
        }
        for ((b, x), w) in self.buf.iter_mut().zip(wave).zip(&self.window) {
            *b = Complex64::new(x * w, 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);

        let norm = 2.0 / (n as f64 * self.window_power);
        let bin = self.capture.bin_width(&self.plant.dac);
        let carrier_bin = (self.tone.freq_hz / bin).round() as usize;
        let image_bin = (self.tone.image_freq(&self.plant.dac) / bin).round() as usize;
        let span = if self.capture.coherent { 0 } else { NONCOHERENT_HALF_SPAN };

        if let Some(nf) = self.capture.noise_floor_dbc {
            let reference = band_power(&self.buf, carrier_bin, span, norm);
            let sigma = (reference * 10f64.powf(nf / 10.0) / norm / 2.0).sqrt();
            for b in self.buf.iter_mut().take(n / 2 + 1) {
                let re: f64 = StandardNormal.sample(&mut self.rng);
                let im: f64 = StandardNormal.sample(&mut self.rng);
                *b += Complex64::new(re, im) * sigma;
            }
        }
        Ok((band_power(&self.buf, image_bin, span, norm), band_power(&self.buf, carrier_bin, span, norm)))
    }
}

fn band_power(spectrum: &[Complex64], center: usize, span: usize, norm: f64) -> f64 {
    let lo = center.saturating_sub(span);
    let hi = (center + span).min(spectrum.len() / 2);
    spectrum[lo..=hi].iter().map(|c| c.norm_sqr()).sum::<f64>() * norm
}

/// One-shot measurement in a fresh session.
pub fn measure_cost(
    plant: &PlantModel,
    file: &RegisterFile,
    tone: &ToneSpec,
    capture: &CaptureConfig,
    seed: u64,
) -> Result<SpurMeasurement> {
    SpurMeter::new(plant.clone(), *tone, *capture, seed)?.measure(file)
}
