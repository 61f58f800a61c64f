//! Time-domain synthesis of the interleaved RZ pulse trains.
//!
//! Two views are provided. [`pulse_segments`] gives the exact piecewise-constant
//! output `y(t)`; [`Synthesizer`] renders what an ideally band-limited sampler
//! running at `oversample × f_s` captures from that output. Pulse edges fall
//! between capture instants whenever `α` or a skew is not a multiple of the
//! capture period, so point-sampling the piecewise waveform would move the
//! edges onto the capture grid and alias the pulse harmonics onto the image
//! bin. The band-limited capture keeps sub-sample timing exact.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spectral::{sinc, DacConfig, ImpairmentState, ToneSpec};

/// Mid-tread quantizer, round half away from zero, clamped to the code range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    lsb: f64,
    min_code: i64,
    max_code: i64,
}

impl Quantizer {
    pub fn new(cfg: &DacConfig) -> Self {
        let half = 1i64 << (cfg.resolution_bits - 1);
        Self { lsb: cfg.full_scale / half as f64, min_code: -half, max_code: half - 1 }
    }

    pub fn lsb(&self) -> f64 {
        self.lsb
    }

    pub fn code(&self, x: f64) -> i64 {
        ((x / self.lsb).round() as i64).clamp(self.min_code, self.max_code)
    }

    pub fn quantize(&self, x: f64) -> f64 {
        self.code(x) as f64 * self.lsb
    }
}

/// Ideal (unquantized) tone value at time `t`.
pub fn tone_value(cfg: &DacConfig, tone: &ToneSpec, t: f64) -> f64 {
    tone.amplitude * cfg.full_scale * (2.0 * PI * tone.freq_hz * t).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubDacId {
    A,
    B,
}

/// One RZ pulse: constant `level` on `[start_s, end_s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseSegment {
    pub sub_dac: SubDacId,
    pub start_s: f64,
    pub end_s: f64,
    pub level: f64,
}

/// Pulses for `frames` sub-DAC periods (`2T_s` each), A first at `t = 0`.
pub fn pulse_segments(
    cfg: &DacConfig,
    imp: &ImpairmentState,
    tone: &ToneSpec,
    frames: usize,
) -> Result<Vec<PulseSegment>> {
    imp.validate(cfg)?;
    let (wa, wb) = imp.pulse_widths(cfg)?;
    let ts = cfg.sample_period();
    let q = Quantizer::new(cfg);
    let mut out = Vec::with_capacity(2 * frames);
    for n in 0..frames {
        let ta = 2.0 * n as f64 * ts;
        let start = ta + imp.skew_a_s;
        out.push(PulseSegment {
            sub_dac: SubDacId::A,
            start_s: start,
            end_s: start + wa,
            level: imp.gain_a * q.quantize(tone_value(cfg, tone, ta)),
        });
        let tb = (2.0 * n as f64 + 1.0 + 2.0 * imp.alpha) * ts;
        let start = tb + imp.skew_b_s;
        out.push(PulseSegment {
            sub_dac: SubDacId::B,
            start_s: start,
            end_s: start + wb,
            level: imp.gain_b * q.quantize(tone_value(cfg, tone, tb)),
        });
    }
    Ok(out)
}

/// Output at `t`: overlapping pulses sum, gaps are zero.
pub fn evaluate_segments(segments: &[PulseSegment], t: f64) -> f64 {
    segments.iter().filter(|s| s.start_s <= t && t < s.end_s).map(|s| s.level).sum()
}

/// Point samples of the piecewise output on the capture grid, one record of
/// `n_samples` at `oversample × f_s`, with pulses wrapped periodically.
pub fn sample_pulse_train(
    cfg: &DacConfig,
    imp: &ImpairmentState,
    tone: &ToneSpec,
    n_samples: usize,
    oversample: usize,
) -> Result<Vec<f64>> {
    check_record(n_samples, oversample)?;
    let frames = n_samples / (2 * oversample);
    let t_cap = cfg.sample_period() / oversample as f64;
    let period = n_samples as f64 * t_cap;
    let mut y = vec![0.0; n_samples];
    for seg in pulse_segments(cfg, imp, tone, frames)? {
        let first = (seg.start_s / t_cap).ceil() as i64;
        let mut m = first;
        while (m as f64) * t_cap < seg.end_s {
            let t = m as f64 * t_cap;
            if t >= seg.start_s {
                y[m.rem_euclid(n_samples as i64) as usize] += seg.level;
            }
            m += 1;
        }
        debug_assert!(seg.end_s - seg.start_s < period);
    }
    Ok(y)
}

fn check_record(n_samples: usize, oversample: usize) -> Result<()> {
    if oversample < 4 {
        return Err(Error::InvalidConfig(format!("oversample must be at least 4, got {oversample}")));
    }
    if n_samples < 2 || !n_samples.is_multiple_of(2 * oversample) {
        return Err(Error::InvalidConfig(format!(
            "record length {n_samples} must be a positive multiple of 2 x oversample = {}",
            2 * oversample
        )));
    }
    Ok(())
}

/// Band-limited capture renderer with cached FFT plans.
pub struct Synthesizer {
    n: usize,
    oversample: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    packed: Vec<Complex64>,
    spectrum: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Synthesizer {
    pub fn new(n_samples: usize, oversample: usize) -> Result<Self> {
        check_record(n_samples, oversample)?;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n_samples);
        let inv = planner.plan_fft_inverse(n_samples);
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Ok(Self {
            n: n_samples,
            oversample,
            fwd,
            inv,
            packed: vec![Complex64::default(); n_samples],
            spectrum: vec![Complex64::default(); n_samples],
            scratch: vec![Complex64::default(); scratch_len],
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn oversample(&self) -> usize {
        self.oversample
    }

    pub fn capture_rate(&self, cfg: &DacConfig) -> f64 {
        cfg.sample_rate_hz * self.oversample as f64
    }

    /// DFT of the band-limited capture (unnormalized, bin `k` at `k·f_cap/N`).
    pub fn render_spectrum(
        &mut self,
        cfg: &DacConfig,
        imp: &ImpairmentState,
        tone: &ToneSpec,
    ) -> Result<&[Complex64]> {
        imp.validate(cfg)?;
        let (wa, wb) = imp.pulse_widths(cfg)?;
        let f_cap = self.capture_rate(cfg);
        if !(tone.freq_hz.is_finite() && tone.freq_hz > 0.0 && tone.freq_hz < f_cap / 2.0) {
            return Err(Error::InvalidConfig(format!(
                "tone {} Hz not representable at capture rate {f_cap} Hz",
                tone.freq_hz
            )));
        }
        let n = self.n;
        let ts = cfg.sample_period();
        let t_cap = ts / self.oversample as f64;
        let frames = n / (2 * self.oversample);
        let q = Quantizer::new(cfg);

        // A's codes on the real rail, B's on the imaginary rail, each placed at
        // its nominal launch index; fractional delays go into the kernels.
        self.packed.fill(Complex64::default());
        for i in 0..frames {
            let ta = 2.0 * i as f64 * ts;
            let tb = (2.0 * i as f64 + 1.0 + 2.0 * imp.alpha) * ts;
            self.packed[2 * i * self.oversample].re = q.quantize(tone_value(cfg, tone, ta));
            self.packed[(2 * i + 1) * self.oversample].im = q.quantize(tone_value(cfg, tone, tb));
        }
        self.fwd.process_with_scratch(&mut self.packed, &mut self.scratch);

        let delay_a = imp.skew_a_s;
        let delay_b = 2.0 * imp.alpha * ts + imp.skew_b_s;
        for k in 0..n {
            if 2 * k == n {
                self.spectrum[k] = Complex64::default();
                continue;
            }
            let z = self.packed[k];
            let zc = self.packed[(n - k) % n].conj();
            let da = (z + zc) * 0.5;
            let db = (z - zc) * Complex64::new(0.0, -0.5);
            let f = if 2 * k < n { k as f64 } else { k as f64 - n as f64 } * f_cap / n as f64;
            let ha = pulse_kernel(f, imp.gain_a, wa, delay_a) / t_cap;
            let hb = pulse_kernel(f, imp.gain_b, wb, delay_b) / t_cap;
            self.spectrum[k] = da * ha + db * hb;
        }
        Ok(&self.spectrum)
    }

    /// Band-limited capture samples.
    pub fn render(
        &mut self,
        cfg: &DacConfig,
        imp: &ImpairmentState,
        tone: &ToneSpec,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        self.render_spectrum(cfg, imp, tone)?;
        self.packed.copy_from_slice(&self.spectrum);
        self.inv.process_with_scratch(&mut self.packed, &mut self.scratch);
        let scale = 1.0 / self.n as f64;
        out.clear();
        out.extend(self.packed.iter().map(|c| c.re * scale));
        Ok(())
    }
}

/// Fourier transform of a pulse of height `gain` on `[delay, delay + width)`.
fn pulse_kernel(f: f64, gain: f64, width: f64, delay: f64) -> Complex64 {
    let phase = -PI * f * width - 2.0 * PI * f * delay;
    Complex64::from_polar(gain * width * sinc(f * width), phase)
}

/// Capture of `n_samples` points at `oversample × f_s` through an ideal
/// band-limiting front end.
pub fn synthesize_waveform(
    cfg: &DacConfig,
    imp: &ImpairmentState,
    tone: &ToneSpec,
    n_samples: usize,
    oversample: usize,
) -> Result<Vec<f64>> {
    let mut synth = Synthesizer::new(n_samples, oversample)?;
    let mut out = Vec::with_capacity(n_samples);
    synth.render(cfg, imp, tone, &mut out)?;
    Ok(out)
}
