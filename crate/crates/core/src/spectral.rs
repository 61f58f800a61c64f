//! Closed-form line spectrum of a twofold current-steering TIDAC.
//!
//! Each sub-DAC emits return-to-zero pulses: sub-DAC A launches at `2nT_s`
//! with width `T_s(1+2α)`, sub-DAC B launches at `(2n+1+2α)T_s` with width
//! `T_s(1-2α)` and holds the input sampled at its own launch instant. A
//! per-sub-DAC skew delays that sub-DAC's whole pulse train without moving
//! its sampling instants.
//!
//! The input is a single tone, so `X(f)` is a pair of impulses at `±f_out`.
//! Every spectrum function returns the *coefficient* of the output impulse at
//! `f` (zero when no replica lands there), which makes all values exact.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Replica half-range used when none is given.
pub const DEFAULT_K_RANGE: u32 = 8;

/// Reported spur level for an exactly cancelled image.
pub const SPUR_FLOOR_DBC: f64 = -200.0;

/// Image-to-carrier magnitude ratio below which the floor is reported.
const CANCELLATION_RATIO: f64 = 1e-15;

/// Relative tolerance (in units of `f_s`) for deciding that a replica lands on `f`.
const LINE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DacConfig {
    /// Aggregate sample rate `f_s`.
    pub sample_rate_hz: f64,
    pub resolution_bits: u32,
    #[serde(default = "default_full_scale")]
    pub full_scale: f64,
}

fn default_full_scale() -> f64 {
    1.0
}

impl DacConfig {
    pub fn new(sample_rate_hz: f64, resolution_bits: u32) -> Result<Self> {
        let cfg = Self { sample_rate_hz, resolution_bits, full_scale: 1.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sample_rate_hz must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if !(1..=52).contains(&self.resolution_bits) {
            return Err(Error::InvalidConfig(format!(
                "resolution_bits must be in 1..=52, got {}",
                self.resolution_bits
            )));
        }
        if !(self.full_scale.is_finite() && self.full_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "full_scale must be positive, got {}",
                self.full_scale
            )));
        }
        Ok(())
    }

    /// Aggregate sample period `T_s`.
    pub fn sample_period(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn sub_dac_rate(&self) -> f64 {
        self.sample_rate_hz / 2.0
    }
}

/// Physical error vector of the converter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentState {
    /// Fractional duty-cycle timing offset; 0 is a 50% duty cycle.
    pub alpha: f64,
    pub gain_a: f64,
    pub gain_b: f64,
    pub skew_a_s: f64,
    pub skew_b_s: f64,
}

impl Default for ImpairmentState {
    fn default() -> Self {
        Self::ideal()
    }
}

impl ImpairmentState {
    pub fn ideal() -> Self {
        Self { alpha: 0.0, gain_a: 1.0, gain_b: 1.0, skew_a_s: 0.0, skew_b_s: 0.0 }
    }

    /// Impairment with sub-DAC B as the unit-gain reference.
    pub fn from_errors(gain_error: f64, alpha: f64) -> Self {
        Self { alpha, gain_a: 1.0 + gain_error, ..Self::ideal() }
    }

    pub fn validate(&self, cfg: &DacConfig) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [-1, 1]", self.alpha)));
        }
        for (name, g) in [("gain_a", self.gain_a), ("gain_b", self.gain_b)] {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {g}")));
            }
        }
        let ts = cfg.sample_period();
        for (name, s) in [("skew_a_s", self.skew_a_s), ("skew_b_s", self.skew_b_s)] {
            if !(s.is_finite() && s.abs() < ts) {
                return Err(Error::InvalidConfig(format!(
                    "{name} = {s:e} s must satisfy |skew| < T_s = {ts:e} s"
                )));
            }
        }
        Ok(())
    }

    /// The same converter with the sub-DAC labels exchanged.
    pub fn relabeled(&self) -> Self {
        Self {
            alpha: -self.alpha,
            gain_a: self.gain_b,
            gain_b: self.gain_a,
            skew_a_s: self.skew_b_s,
            skew_b_s: self.skew_a_s,
        }
    }

    pub fn gain_error_pct(&self) -> f64 {
        100.0 * (self.gain_a - self.gain_b).abs() / self.gain_b
    }

    pub fn duty_error_pct(&self) -> f64 {
        100.0 * self.alpha.abs()
    }

    /// Pulse widths of sub-DAC A and B in seconds; errors if either is non-positive.
    pub fn pulse_widths(&self, cfg: &DacConfig) -> Result<(f64, f64)> {
        let ts = cfg.sample_period();
        let wa = ts * (1.0 + 2.0 * self.alpha);
        let wb = ts * (1.0 - 2.0 * self.alpha);
        if wa <= 0.0 || wb <= 0.0 {
            return Err(Error::DegeneratePulse(format!(
                "alpha = {} gives pulse widths {wa:e} s / {wb:e} s",
                self.alpha
            )));
        }
        Ok((wa, wb))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneSpec {
    pub freq_hz: f64,
    /// Fraction of digital full scale.
    pub amplitude: f64,
}

impl ToneSpec {
    pub fn new(freq_hz: f64, amplitude: f64) -> Self {
        Self { freq_hz, amplitude }
    }

    pub fn validate(&self, cfg: &DacConfig) -> Result<()> {
        let nyq = cfg.sample_rate_hz / 2.0;
        if !(self.freq_hz.is_finite() && self.freq_hz > 0.0 && self.freq_hz < nyq) {
            return Err(Error::InvalidConfig(format!(
                "tone {} Hz outside the first Nyquist zone (0, {nyq})",
                self.freq_hz
            )));
        }
        if (self.freq_hz - cfg.sample_rate_hz / 4.0).abs() <= LINE_TOL * cfg.sample_rate_hz {
            return Err(Error::InvalidConfig(format!(
                "tone {} Hz sits at f_s/4: the interleave image coincides with the carrier",
                self.freq_hz
            )));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "amplitude {} outside (0, 1]",
                self.amplitude
            )));
        }
        Ok(())
    }

    /// Interleave image location `f_s/2 - f_out`.
    pub fn image_freq(&self, cfg: &DacConfig) -> f64 {
        cfg.sample_rate_hz / 2.0 - self.freq_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumSample {
    pub freq_hz: f64,
    pub value: Complex64,
}

impl SpectrumSample {
    pub fn magnitude(&self) -> f64 {
        self.value.norm()
    }
}

/// `sin(πx)/(πx)` with its limit at zero.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

#[derive(Clone, Copy)]
enum SubDac {
    A,
    B,
}

fn check_inputs(cfg: &DacConfig, imp: &ImpairmentState, f: f64, k_range: u32) -> Result<()> {
    if !f.is_finite() {
        return Err(Error::NonFiniteFrequency(f));
    }
    if k_range == 0 {
        return Err(Error::InvalidConfig("k_range must be at least 1".into()));
    }
    imp.validate(cfg)?;
    imp.pulse_widths(cfg)?;
    Ok(())
}

fn sub_dac_coefficient(
    which: SubDac,
    cfg: &DacConfig,
    imp: &ImpairmentState,
    tone: &ToneSpec,
    f: f64,
    k_range: u32,
) -> Result<SpectrumSample> {
    check_inputs(cfg, imp, f, k_range)?;
    let fs = cfg.sample_rate_hz;
    let ts = cfg.sample_period();
    let (width_factor, gain, skew) = match which {
        SubDac::A => (1.0 + 2.0 * imp.alpha, imp.gain_a, imp.skew_a_s),
        SubDac::B => (1.0 - 2.0 * imp.alpha, imp.gain_b, imp.skew_b_s),
    };

    // Sum of X(f - k f_s/2) over replicas, with B's sampling-offset phase.
    let line = tone.amplitude * cfg.full_scale / 2.0;
    let k = k_range as i64;
    let mut replicas = Complex64::new(0.0, 0.0);
    for ki in -k..=k {
        let shifted = f - ki as f64 * fs / 2.0;
        for sign in [1.0, -1.0] {
            if (shifted - sign * tone.freq_hz).abs() <= LINE_TOL * fs {
                let phase = match which {
                    SubDac::A => Complex64::new(1.0, 0.0),
                    SubDac::B => Complex64::from_polar(1.0, -PI * ki as f64 * (1.0 + 2.0 * imp.alpha)),
                };
                replicas += phase * line;
            }
        }
    }
    if replicas == Complex64::new(0.0, 0.0) {
        return Ok(SpectrumSample { freq_hz: f, value: replicas });
    }

    let envelope = gain / 2.0 * width_factor * sinc(f * ts * width_factor);
    let delay = Complex64::from_polar(1.0, -PI * f * ts * width_factor - 2.0 * PI * f * skew);
    Ok(SpectrumSample { freq_hz: f, value: envelope * delay * replicas })
}

/// Line coefficient of sub-DAC A's output at `f`.
pub fn spectrum_sub_a(
    cfg: &DacConfig,
    imp: &ImpairmentState,
    tone: &ToneSpec,
    f: f64,
    k_range: u32,
) -> Result<SpectrumSample> {
    sub_dac_coefficient(SubDac::A, cfg, imp, tone, f, k_range)
}

/// Line coefficient of sub-DAC B's output at `f`.
pub fn spectrum_sub_b(
    cfg: &DacConfig,
    imp: &ImpairmentState,
    tone: &ToneSpec,
    f: f64,
    k_range: u32,
) -> Result<SpectrumSample> {
    sub_dac_coefficient(SubDac::B, cfg, imp, tone, f, k_range)
}

/// Replica phase factor `e^{-jπk(1+2α)}` applied to sub-DAC B's k-th replica.
pub fn sub_b_replica_phase(alpha: f64, k: i64) -> Complex64 {
    Complex64::from_polar(1.0, -PI * k as f64 * (1.0 + 2.0 * alpha))
}

pub fn output_spectrum(
    cfg: &DacConfig,
    imp: &ImpairmentState,
    tone: &ToneSpec,
    f: f64,
    k_range: u32,
) -> Result<SpectrumSample> {
    let a = spectrum_sub_a(cfg, imp, tone, f, k_range)?;
    let b = spectrum_sub_b(cfg, imp, tone, f, k_range)?;
    Ok(SpectrumSample { freq_hz: f, value: a.value + b.value })
}

/// Image-to-carrier ratio in dBc from the closed-form spectrum.
pub fn analytic_spur_dbc(
    cfg: &DacConfig,
    imp: &ImpairmentState,
    tone: &ToneSpec,
    k_range: u32,
) -> Result<f64> {
    analytic_spur_dbc_with_floor(cfg, imp, tone, k_range, SPUR_FLOOR_DBC)
}

pub fn analytic_spur_dbc_with_floor(
    cfg: &DacConfig,
    imp: &ImpairmentState,
    tone: &ToneSpec,
    k_range: u32,
    floor_dbc: f64,
) -> Result<f64> {
    tone.validate(cfg)?;
    let carrier = output_spectrum(cfg, imp, tone, tone.freq_hz, k_range)?.magnitude();
    if !(carrier > 0.0) {
        return Err(Error::ZeroCarrier);
    }
    let image = output_spectrum(cfg, imp, tone, tone.image_freq(cfg), k_range)?.magnitude();
    let ratio = image / carrier;
    if ratio < CANCELLATION_RATIO {
        return Ok(floor_dbc);
    }
    Ok((20.0 * ratio.log10()).max(floor_dbc))
}

/// Sampling of the (gain error, duty error) plane for [`level_curve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContourGrid {
    /// Number of duty-error rows, including the zero row.
    pub rows: usize,
    pub max_gain_error_pct: f64,
    pub max_duty_error_pct: f64,
    /// Coarse scan steps per row before bisection.
    #[serde(default = "default_scan_steps")]
    pub scan_steps: usize,
}

fn default_scan_steps() -> usize {
    64
}

impl Default for ContourGrid {
    fn default() -> Self {
        Self { rows: 40, max_gain_error_pct: 5.0, max_duty_error_pct: 2.0, scan_steps: 64 }
    }
}

/// One point on a level curve, both coordinates in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourPoint {
    pub gain_error_pct: f64,
    pub duty_error_pct: f64,
}

impl ContourPoint {
    pub fn impairment(&self) -> ImpairmentState {
        ImpairmentState::from_errors(self.gain_error_pct / 100.0, self.duty_error_pct / 100.0)
    }
}

/// Boundary of the region where the analytic spur stays below `threshold_dbc`,
/// traced in the positive (gain error, duty error) quadrant with zero skew.
///
/// The duty-axis crossing at zero gain error is found first; duty rows below
/// it are then scanned for the first upward crossing in gain error and refined
/// by bisection.
pub fn level_curve(
    cfg: &DacConfig,
    tone: &ToneSpec,
    threshold_dbc: f64,
    grid: &ContourGrid,
) -> Result<Vec<ContourPoint>> {
    if threshold_dbc <= SPUR_FLOOR_DBC {
        return Err(Error::ThresholdBelowFloor { threshold: threshold_dbc, floor: SPUR_FLOOR_DBC });
    }
    if threshold_dbc >= 0.0 {
        return Err(Error::InvalidConfig(format!("threshold {threshold_dbc} dBc must be negative")));
    }
    if grid.rows < 2 || grid.scan_steps < 2 {
        return Err(Error::InvalidConfig("contour grid needs at least 2 rows and 2 scan steps".into()));
    }
    if !(grid.max_duty_error_pct > 0.0 && grid.max_duty_error_pct < 50.0 && grid.max_gain_error_pct > 0.0) {
        return Err(Error::InvalidConfig("contour grid extents must be positive, duty < 50%".into()));
    }
    tone.validate(cfg)?;

    let excess = |gain_pct: f64, duty_pct: f64| -> Result<f64> {
        let imp = ImpairmentState::from_errors(gain_pct / 100.0, duty_pct / 100.0);
        Ok(analytic_spur_dbc(cfg, &imp, tone, DEFAULT_K_RANGE)? - threshold_dbc)
    };

    let top = first_crossing(|d| excess(0.0, d), 0.0, grid.max_duty_error_pct, grid.scan_steps)?;
    let span = top.unwrap_or(grid.max_duty_error_pct);
    let mut points = Vec::with_capacity(grid.rows + 1);
    for row in 0..grid.rows {
        // Rows bunch up near the top, where the curve turns fastest.
        let duty = span * (0.5 * PI * row as f64 / grid.rows as f64).sin();
        if let Some(gain) = first_crossing(|g| excess(g, duty), 0.0, grid.max_gain_error_pct, grid.scan_steps)? {
            points.push(ContourPoint { gain_error_pct: gain, duty_error_pct: duty });
        }
    }
    if let Some(duty) = top {
        points.push(ContourPoint { gain_error_pct: 0.0, duty_error_pct: duty });
    }
    points.sort_by(|a, b| a.duty_error_pct.total_cmp(&b.duty_error_pct));
    Ok(points)
}

/// First root of `f` on `[lo, hi]` where it turns from non-positive to positive.
fn first_crossing<F>(f: F, lo: f64, hi: f64, steps: usize) -> Result<Option<f64>>
where
    F: Fn(f64) -> Result<f64>,
{
    let mut x0 = lo;
    if f(lo)? > 0.0 {
        return Ok(None);
    }
    for i in 1..=steps {
        let x1 = lo + (hi - lo) * i as f64 / steps as f64;
        let y1 = f(x1)?;
        if y1 > 0.0 {
            let (mut a, mut b) = (x0, x1);
            for _ in 0..80 {
                let mid = 0.5 * (a + b);
                if f(mid)? > 0.0 {
                    b = mid;
                } else {
                    a = mid;
                }
                if b - a <= 1e-12 * hi.max(1.0) {
                    break;
                }
            }
            return Ok(Some(0.5 * (a + b)));
        }
        x0 = x1;
    }
    Ok(None)
}
