//! Batch experiments: calibration runs, Nyquist sweeps against the grid
//! baseline, and analytic level-curve export.
//!
//! Every command is a pure function of the [`ExperimentConfig`] and its seed
//! list. Output files are written once, at the end, through a temporary file
//! and a rename.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

use crate::anneal::{
    anneal, default_grid_axes, grid_search, warm_up, AnnealParams, AnnealResult, GridAxis, MeterObjective,
    NeighborWindow, WarmUp,
};
use crate::error::{Error, Result};
use crate::meter::{snap_coherent, CaptureConfig, CostScale, SpurMeter};
use crate::plant::{PlantModel, RegisterMap, RegisterRole, TrimSteps};
use crate::spectral::{
    analytic_spur_dbc, level_curve, ContourGrid, ContourPoint, DacConfig, ImpairmentState, ToneSpec,
    DEFAULT_K_RANGE, SPUR_FLOOR_DBC,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dac: DacConfig,
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub capture: CaptureSection,
    #[serde(default)]
    pub anneal: AnnealSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub contours: ContourSection,
    #[serde(default)]
    pub thresholds: Thresholds,
}

fn default_seeds() -> Vec<u64> {
    (0..20).collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Uncalibrated chip and trim steps. Skews are fractions of `T_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub gain_a: f64,
    pub gain_b: f64,
    pub alpha: f64,
    pub skew_a_ts: f64,
    pub skew_b_ts: f64,
    pub register_width_bits: u32,
    pub steps: TrimSteps,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self {
            gain_a: 1.02,
            gain_b: 1.0,
            alpha: 0.01,
            skew_a_ts: 0.05,
            skew_b_ts: 0.0,
            register_width_bits: 8,
            steps: TrimSteps::default(),
        }
    }
}

impl PlantSection {
    pub fn base_impairment(&self, dac: &DacConfig) -> ImpairmentState {
        let ts = dac.sample_period();
        ImpairmentState {
            alpha: self.alpha,
            gain_a: self.gain_a,
            gain_b: self.gain_b,
            skew_a_s: self.skew_a_ts * ts,
            skew_b_s: self.skew_b_ts * ts,
        }
    }

    pub fn build(&self, dac: &DacConfig) -> Result<PlantModel> {
        if !(1..=16).contains(&self.register_width_bits) {
            return Err(Error::InvalidConfig(format!(
                "plant.register_width_bits must be in 1..=16, got {}",
                self.register_width_bits
            )));
        }
        PlantModel::new(
            *dac,
            self.base_impairment(dac),
            self.steps,
            RegisterMap::uniform(self.register_width_bits),
        )
    }
}

/// File form of [`CaptureConfig`]; `noise_floor_dbc = -inf` turns noise off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureSection {
    pub fft_size: usize,
    pub oversample: usize,
    pub coherent: bool,
    pub window: crate::meter::Window,
    pub noise_floor_dbc: f64,
}

impl Default for CaptureSection {
    fn default() -> Self {
        CaptureConfig::default().into()
    }
}

impl From<CaptureConfig> for CaptureSection {
    fn from(c: CaptureConfig) -> Self {
        Self {
            fft_size: c.fft_size,
            oversample: c.oversample,
            coherent: c.coherent,
            window: c.window,
            noise_floor_dbc: c.noise_floor_dbc.unwrap_or(f64::NEG_INFINITY),
        }
    }
}

impl From<CaptureSection> for CaptureConfig {
    fn from(c: CaptureSection) -> Self {
        Self {
            fft_size: c.fft_size,
            oversample: c.oversample,
            coherent: c.coherent,
            window: c.window,
            noise_floor_dbc: (c.noise_floor_dbc > f64::NEG_INFINITY).then_some(c.noise_floor_dbc),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSection {
    pub gamma: f64,
    pub beta: f64,
    pub k_inner: usize,
    pub neighbor_window: NeighborWindow,
    pub remeasure_current: bool,
    pub cost_scale: CostScale,
    /// Fixed start temperature; when absent it comes from the warm-up probe.
    pub t_max: Option<f64>,
    pub t_min: Option<f64>,
    pub warm_up: WarmUp,
    /// Stop once the measured spur reaches this level (off when absent).
    pub target_spur_dbc: Option<f64>,
}

impl Default for AnnealSection {
    fn default() -> Self {
        let p = AnnealParams::default();
        Self {
            gamma: p.gamma,
            beta: p.beta,
            k_inner: p.k_inner,
            neighbor_window: p.neighbor_window,
            remeasure_current: p.remeasure_current,
            cost_scale: CostScale::Decibel,
            t_max: None,
            t_min: None,
            warm_up: WarmUp::default(),
            target_spur_dbc: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Explicit tone list; when empty, `count` log-spaced tones between
    /// `start_ratio` and `stop_ratio` of `f_s` are used.
    pub f_out_hz: Vec<f64>,
    pub start_ratio: f64,
    pub stop_ratio: f64,
    pub count: usize,
    /// Tone for `calibrate`; defaults to `0.4 f_s`.
    pub calibrate_f_out_hz: Option<f64>,
    pub amplitude: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            f_out_hz: Vec::new(),
            start_ratio: 0.02,
            stop_ratio: 0.48,
            count: 12,
            calibrate_f_out_hz: None,
            amplitude: 1.0,
        }
    }
}

impl SweepSection {
    pub fn frequencies(&self, dac: &DacConfig) -> Vec<f64> {
        if !self.f_out_hz.is_empty() {
            return self.f_out_hz.clone();
        }
        let fs = dac.sample_rate_hz;
        if self.count == 1 {
            return vec![self.start_ratio * fs];
        }
        let ratio = self.stop_ratio / self.start_ratio;
        (0..self.count)
            .map(|i| self.start_ratio * ratio.powf(i as f64 / (self.count - 1) as f64) * fs)
            .collect()
    }

    pub fn calibrate_frequency(&self, dac: &DacConfig) -> f64 {
        self.calibrate_f_out_hz.unwrap_or(0.4 * dac.sample_rate_hz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxisSpec {
    pub role: RegisterRole,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub budget: usize,
    pub axes: Vec<GridAxisSpec>,
}

impl Default for GridSection {
    fn default() -> Self {
        use RegisterRole::*;
        Self {
            budget: 280,
            axes: [(CurrentA, 5), (CurrentB, 4), (DutyCoarse, 7), (PhaseA, 2)]
                .iter()
                .map(|(role, count)| GridAxisSpec { role: *role, count: *count })
                .collect(),
        }
    }
}

impl GridSection {
    pub fn axes(&self, map: &RegisterMap) -> Result<Vec<GridAxis>> {
        if self.axes.is_empty() {
            return default_grid_axes(map);
        }
        self.axes.iter().map(|a| GridAxis::spanning(map, map.address_of(a.role), a.count)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContourSection {
    pub threshold_dbc: f64,
    /// Tones to trace; when empty, `0.1, 0.2, 0.3, 0.4 × f_s`.
    pub f_out_hz: Vec<f64>,
    pub grid: ContourGrid,
}

impl Default for ContourSection {
    fn default() -> Self {
        Self { threshold_dbc: -50.0, f_out_hz: Vec::new(), grid: ContourGrid::default() }
    }
}

impl ContourSection {
    pub fn frequencies(&self, dac: &DacConfig) -> Vec<f64> {
        if self.f_out_hz.is_empty() {
            [0.1, 0.2, 0.3, 0.4].iter().map(|r| r * dac.sample_rate_hz).collect()
        } else {
            self.f_out_hz.clone()
        }
    }
}

/// Pass criteria that set the CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub max_post_cal_spur_dbc: f64,
    /// Fraction of seeds that must pass at every swept tone.
    pub min_pass_fraction: f64,
    /// Fraction of seeds where SA is no worse than grid search at every
    /// top-quartile tone.
    pub min_sa_beats_grid_fraction: f64,
    /// Allowed ratio between the mean SA measurement count and `reference_measurements`.
    pub measurement_count_factor: f64,
    pub reference_measurements: f64,
    pub contour_tolerance_db: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            max_post_cal_spur_dbc: -50.0,
            min_pass_fraction: 0.95,
            min_sa_beats_grid_fraction: 0.8,
            measurement_count_factor: 2.0,
            reference_measurements: 160.0,
            contour_tolerance_db: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn default_for(dac: DacConfig) -> Self {
        Self {
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            dac,
            plant: PlantSection::default(),
            capture: CaptureSection::default(),
            anneal: AnnealSection::default(),
            sweep: SweepSection::default(),
            grid: GridSection::default(),
            contours: ContourSection::default(),
            thresholds: Thresholds::default(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical TOML form, ignoring the output location.
    pub fn hash(&self) -> Result<String> {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let digest = Sha256::digest(canon.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn capture_config(&self) -> CaptureConfig {
        self.capture.into()
    }

    /// Collects every violation rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                errs.push(format!("{field}: {e}"));
            }
        };
        let dac_ok = self.dac.validate();
        let dac_valid = dac_ok.is_ok();
        check("dac", dac_ok);
        check("capture", self.capture_config().validate());
        if self.seeds.is_empty() {
            check("seeds", Err(Error::InvalidConfig("at least one seed is required".into())));
        }
        let a = &self.anneal;
        let temps = AnnealParams {
            t_max: a.t_max.unwrap_or(1.0),
            t_min: a.t_min.unwrap_or(a.t_max.unwrap_or(1.0) * a.warm_up.t_min_ratio),
            gamma: a.gamma,
            beta: a.beta,
            k_inner: a.k_inner,
            ..AnnealParams::default()
        };
        check("anneal", temps.validate());
        if !(a.warm_up.acceptance > 0.0 && a.warm_up.acceptance < 1.0) {
            check("anneal.warm_up.acceptance", Err(Error::InvalidConfig("must lie in (0, 1)".into())));
        }
        if !(a.warm_up.t_min_ratio > 0.0 && a.warm_up.t_min_ratio < 1.0) {
            check("anneal.warm_up.t_min_ratio", Err(Error::InvalidConfig("must lie in (0, 1)".into())));
        }
        let s = &self.sweep;
        if s.f_out_hz.is_empty() && !(s.count >= 1 && s.start_ratio > 0.0 && s.stop_ratio < 0.5 && s.start_ratio <= s.stop_ratio) {
            check(
                "sweep",
                Err(Error::InvalidConfig("need count >= 1 and 0 < start_ratio <= stop_ratio < 0.5".into())),
            );
        }
        if dac_valid {
            for f in s.frequencies(&self.dac).into_iter().chain([s.calibrate_frequency(&self.dac)]) {
                check("sweep", ToneSpec::new(f, s.amplitude).validate(&self.dac));
            }
            for f in self.contours.frequencies(&self.dac) {
                check("contours", ToneSpec::new(f, 1.0).validate(&self.dac));
            }
            match self.plant.build(&self.dac) {
                Ok(plant) => {
                    match self.grid.axes(&plant.registers) {
                        Ok(axes) => {
                            let points: usize = axes.iter().map(|a| a.count as usize).product();
                            if points > self.grid.budget {
                                check("grid", Err(Error::BudgetExceeded { points, budget: self.grid.budget }));
                            }
                            let mut roles: Vec<_> = self.grid.axes.iter().map(|a| a.role).collect();
                            roles.sort_by_key(|r| r.name());
                            roles.dedup();
                            if roles.len() != self.grid.axes.len() {
                                check("grid.axes", Err(Error::InvalidConfig("duplicate register role".into())));
                            }
                        }
                        Err(e) => check("grid", Err(e)),
                    }
                }
                Err(e) => check("plant", Err(e)),
            }
        }
        if !(self.contours.threshold_dbc < 0.0 && self.contours.threshold_dbc > SPUR_FLOOR_DBC) {
            check(
                "contours.threshold_dbc",
                Err(Error::InvalidConfig(format!("must lie in ({SPUR_FLOOR_DBC}, 0)"))),
            );
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Reads and validates a TOML experiment file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    ExperimentConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Outcome of one calibration run, verified without measurement noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRun {
    pub seed: u64,
    pub f_out_hz: f64,
    pub pre_cal_spur_dbc: f64,
    pub post_cal_spur_dbc: f64,
    /// Best spur seen during the search (includes measurement noise).
    pub best_measured_spur_dbc: f64,
    pub measurement_count: usize,
    pub warmup_measurements: usize,
    pub converged_at: usize,
    pub outer_iterations: usize,
    pub accepted_uphill: usize,
    pub t_max: f64,
    pub t_min: f64,
    pub best_state: [u32; 6],
}

/// Noiseless FFT spur of a register file.
fn verify_spur(plant: &PlantModel, tone: &ToneSpec, capture: &CaptureConfig, file: &crate::plant::RegisterFile) -> Result<f64> {
    let mut meter = SpurMeter::new(plant.clone(), *tone, capture.noiseless(), 0)?;
    Ok(meter.measure(file)?.spur_dbc)
}

/// Warm-up, anneal from the reset registers, and noiseless verification.
pub fn calibrate_once(
    plant: &PlantModel,
    tone: &ToneSpec,
    capture: &CaptureConfig,
    section: &AnnealSection,
    seed: u64,
) -> Result<(CalibrationRun, AnnealResult)> {
    let mut meter = SpurMeter::new(plant.clone(), *tone, *capture, seed)?;
    let tone = *meter.tone();
    let start = plant.reset_file();
    let (t_max, t_min, warmup_measurements) = match section.t_max {
        Some(t_max) => (t_max, section.t_min.unwrap_or(t_max * section.warm_up.t_min_ratio), 0),
        None => {
            let mut obj = MeterObjective::new(&mut meter, section.cost_scale);
            let w = warm_up(&mut obj, &plant.registers, &start, section.beta, section.neighbor_window, &section.warm_up, seed)?;
            (w.t_max, section.t_min.unwrap_or(w.t_min), w.measurements)
        }
    };
    let target_cost = match (section.target_spur_dbc, section.cost_scale) {
        (Some(dbc), CostScale::Decibel) => {
            let carrier = meter.measure(&start)?.carrier_power;
            Some(dbc + 10.0 * carrier.log10())
        }
        (Some(dbc), CostScale::Linear) => {
            let carrier = meter.measure(&start)?.carrier_power;
            Some(carrier * 10f64.powf(dbc / 10.0))
        }
        (None, _) => None,
    };
    let params = AnnealParams {
        t_max,
        t_min,
        gamma: section.gamma,
        beta: section.beta,
        k_inner: section.k_inner,
        seed,
        neighbor_window: section.neighbor_window,
        remeasure_current: section.remeasure_current,
        target_cost,
    };
    let mut obj = MeterObjective::new(&mut meter, section.cost_scale);
    let result = anneal(&mut obj, &plant.registers, &start, &params)?;
    let run = CalibrationRun {
        seed,
        f_out_hz: tone.freq_hz,
        pre_cal_spur_dbc: verify_spur(plant, &tone, capture, &start)?,
        post_cal_spur_dbc: verify_spur(plant, &tone, capture, &result.best_state)?,
        best_measured_spur_dbc: result.best_spur_dbc.unwrap_or(f64::NAN),
        measurement_count: result.measurement_count,
        warmup_measurements,
        converged_at: result.converged_at,
        outer_iterations: result.outer_iterations,
        accepted_uphill: result.accepted_uphill,
        t_max,
        t_min,
        best_state: result.best_state.codes(),
    };
    Ok((run, result))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRun {
    pub seed: u64,
    pub f_out_hz: f64,
    pub post_cal_spur_dbc: f64,
    pub measurement_count: usize,
    pub best_state: [u32; 6],
}

pub fn grid_once(
    plant: &PlantModel,
    tone: &ToneSpec,
    capture: &CaptureConfig,
    grid: &GridSection,
    scale: CostScale,
    seed: u64,
) -> Result<GridRun> {
    let mut meter = SpurMeter::new(plant.clone(), *tone, *capture, seed)?;
    let tone = *meter.tone();
    let axes = grid.axes(&plant.registers)?;
    let mut obj = MeterObjective::new(&mut meter, scale);
    let r = grid_search(&mut obj, &plant.registers, &plant.reset_file(), &axes, grid.budget)?;
    Ok(GridRun {
        seed,
        f_out_hz: tone.freq_hz,
        post_cal_spur_dbc: verify_spur(plant, &tone, capture, &r.best_state)?,
        measurement_count: r.measurement_count,
        best_state: r.best_state.codes(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdCheck {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl ThresholdCheck {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, passed: value <= limit }
    }

    fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, passed: value >= limit }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrateReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub f_out_hz: f64,
    pub runs: Vec<CalibrationRun>,
    pub post_cal_spur_dbc: Stats,
    pub measurement_count: Stats,
    pub checks: Vec<ThresholdCheck>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub f_out_hz: f64,
    pub pre_cal_spur_dbc: f64,
    pub sa_mean_spur_dbc: f64,
    pub sa_worst_spur_dbc: f64,
    pub sa_pass_fraction: f64,
    pub sa_mean_measurements: f64,
    pub grid_mean_spur_dbc: f64,
    pub grid_worst_spur_dbc: f64,
    pub grid_measurements: f64,
    pub sa_beats_grid_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    /// Fraction of seeds whose post-SA spur passes at every tone.
    pub seeds_passing_all: f64,
    /// Fraction of seeds where SA is no worse than grid at every top-quartile tone.
    pub sa_beats_grid_top_quartile: f64,
    pub sa_mean_measurements: f64,
    pub grid_measurements: f64,
    pub sa_runs: Vec<Vec<CalibrationRun>>,
    pub grid_runs: Vec<Vec<GridRun>>,
    pub checks: Vec<ThresholdCheck>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContourCurve {
    pub f_out_hz: f64,
    pub file: String,
    pub points: Vec<ContourPoint>,
    pub max_gain_error_pct: f64,
    pub max_duty_error_pct: f64,
    /// Largest |spur - threshold| over the emitted points.
    pub max_deviation_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContoursReport {
    pub config_hash: String,
    pub threshold_dbc: f64,
    pub curves: Vec<ContourCurve>,
    /// Each higher-frequency curve lies inside every lower-frequency one.
    pub nested: bool,
    pub checks: Vec<ThresholdCheck>,
    pub passed: bool,
}

#[cfg(feature = "parallel")]
fn map_jobs<T, R, F>(jobs: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    jobs.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_jobs<T, R, F>(jobs: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    jobs.iter().map(f).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Anneals once per seed at the calibration tone.
pub fn run_calibrate(cfg: &ExperimentConfig) -> Result<CalibrateReport> {
    cfg.validate()?;
    let plant = cfg.plant.build(&cfg.dac)?;
    let capture = cfg.capture_config();
    let tone = ToneSpec::new(cfg.sweep.calibrate_frequency(&cfg.dac), cfg.sweep.amplitude);
    let outcomes = map_jobs(&cfg.seeds, |seed| calibrate_once(&plant, &tone, &capture, &cfg.anneal, *seed));
    let mut runs = Vec::with_capacity(outcomes.len());
    let mut traces = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let (run, result) = o?;
        runs.push(run);
        traces.push(result);
    }

    let spurs: Vec<f64> = runs.iter().map(|r| r.post_cal_spur_dbc).collect();
    let counts: Vec<f64> = runs.iter().map(|r| r.measurement_count as f64).collect();
    let post = Stats::of(&spurs);
    let count = Stats::of(&counts);
    let t = &cfg.thresholds;
    let checks = vec![
        ThresholdCheck::at_most("mean_post_cal_spur_dbc", post.mean, t.max_post_cal_spur_dbc),
        ThresholdCheck::at_least(
            "pass_fraction",
            spurs.iter().filter(|s| **s <= t.max_post_cal_spur_dbc).count() as f64 / spurs.len() as f64,
            t.min_pass_fraction,
        ),
    ];
    let report = CalibrateReport {
        config_hash: cfg.hash()?,
        seeds: cfg.seeds.clone(),
        f_out_hz: runs.first().map(|r| r.f_out_hz).unwrap_or(tone.freq_hz),
        passed: checks.iter().all(|c| c.passed),
        runs,
        post_cal_spur_dbc: post,
        measurement_count: count,
        checks,
    };

    let dir = &cfg.output_dir;
    for (run, trace) in report.runs.iter().zip(&traces) {
        let path = dir.join(format!("trace_seed{}.csv", run.seed));
        let tmp = path.with_extension("tmp");
        fs::create_dir_all(dir)?;
        trace.write_trace_csv(&tmp)?;
        fs::rename(&tmp, &path)?;
    }
    write_json(&dir.join("calibrate_report.json"), &report)?;
    Ok(report)
}

/// Pre-calibration, SA and grid-search spur at every sweep tone and seed.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let plant = cfg.plant.build(&cfg.dac)?;
    let capture = cfg.capture_config();
    let freqs = cfg.sweep.frequencies(&cfg.dac);
    if freqs.is_empty() {
        return Err(Error::InvalidConfig("sweep list is empty".into()));
    }
    let jobs: Vec<(usize, u64)> =
        (0..freqs.len()).flat_map(|i| cfg.seeds.iter().map(move |s| (i, *s))).collect();
    let outcomes = map_jobs(&jobs, |(i, seed)| -> Result<(CalibrationRun, GridRun)> {
        let tone = ToneSpec::new(freqs[*i], cfg.sweep.amplitude);
        let (sa, _) = calibrate_once(&plant, &tone, &capture, &cfg.anneal, *seed)?;
        let grid = grid_once(&plant, &tone, &capture, &cfg.grid, cfg.anneal.cost_scale, *seed)?;
        Ok((sa, grid))
    });

    let n_seeds = cfg.seeds.len();
    let mut sa_runs: Vec<Vec<CalibrationRun>> = vec![Vec::with_capacity(n_seeds); freqs.len()];
    let mut grid_runs: Vec<Vec<GridRun>> = vec![Vec::with_capacity(n_seeds); freqs.len()];
    for ((i, _), o) in jobs.iter().zip(outcomes) {
        let (sa, grid) = o?;
        sa_runs[*i].push(sa);
        grid_runs[*i].push(grid);
    }

    let limit = cfg.thresholds.max_post_cal_spur_dbc;
    let rows: Vec<SweepRow> = sa_runs
        .iter()
        .zip(&grid_runs)
        .map(|(sa, grid)| {
            let sa_spur: Vec<f64> = sa.iter().map(|r| r.post_cal_spur_dbc).collect();
            let grid_spur: Vec<f64> = grid.iter().map(|r| r.post_cal_spur_dbc).collect();
            let s = Stats::of(&sa_spur);
            let g = Stats::of(&grid_spur);
            SweepRow {
                f_out_hz: sa[0].f_out_hz,
                pre_cal_spur_dbc: sa[0].pre_cal_spur_dbc,
                sa_mean_spur_dbc: s.mean,
                sa_worst_spur_dbc: s.max,
                sa_pass_fraction: sa_spur.iter().filter(|v| **v <= limit).count() as f64 / n_seeds as f64,
                sa_mean_measurements: Stats::of(&sa.iter().map(|r| r.measurement_count as f64).collect::<Vec<_>>()).mean,
                grid_mean_spur_dbc: g.mean,
                grid_worst_spur_dbc: g.max,
                grid_measurements: Stats::of(&grid.iter().map(|r| r.measurement_count as f64).collect::<Vec<_>>()).mean,
                sa_beats_grid_fraction: sa_spur.iter().zip(&grid_spur).filter(|(a, b)| a <= b).count() as f64
                    / n_seeds as f64,
            }
        })
        .collect();

    // Top quartile by frequency (at least one tone).
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|a, b| sa_runs[*a][0].f_out_hz.total_cmp(&sa_runs[*b][0].f_out_hz));
    let top: Vec<usize> = order[freqs.len() - freqs.len().div_ceil(4)..].to_vec();

    let seeds_passing_all = (0..n_seeds)
        .filter(|s| sa_runs.iter().all(|runs| runs[*s].post_cal_spur_dbc <= limit))
        .count() as f64
        / n_seeds as f64;
    let sa_beats_grid_top_quartile = (0..n_seeds)
        .filter(|s| top.iter().all(|i| sa_runs[*i][*s].post_cal_spur_dbc <= grid_runs[*i][*s].post_cal_spur_dbc))
        .count() as f64
        / n_seeds as f64;
    let sa_mean_measurements = rows.iter().map(|r| r.sa_mean_measurements).sum::<f64>() / rows.len() as f64;
    let grid_measurements = rows.iter().map(|r| r.grid_measurements).sum::<f64>() / rows.len() as f64;

    let t = &cfg.thresholds;
    let checks = vec![
        ThresholdCheck::at_least("seeds_passing_all_tones", seeds_passing_all, t.min_pass_fraction),
        ThresholdCheck::at_least("sa_beats_grid_top_quartile", sa_beats_grid_top_quartile, t.min_sa_beats_grid_fraction),
        ThresholdCheck::at_most(
            "sa_count_ratio_to_reference",
            (sa_mean_measurements / t.reference_measurements).max(t.reference_measurements / sa_mean_measurements),
            t.measurement_count_factor,
        ),
        ThresholdCheck::at_most("sa_minus_grid_measurements", sa_mean_measurements - grid_measurements, -1.0),
    ];
    let report = SweepReport {
        config_hash: cfg.hash()?,
        seeds: cfg.seeds.clone(),
        passed: checks.iter().all(|c| c.passed),
        rows,
        seeds_passing_all,
        sa_beats_grid_top_quartile,
        sa_mean_measurements,
        grid_measurements,
        sa_runs,
        grid_runs,
        checks,
    };
    write_atomic(&cfg.output_dir.join("sweep.csv"), &csv_bytes(&report.rows)?)?;
    write_json(&cfg.output_dir.join("sweep_report.json"), &report)?;
    Ok(report)
}

/// Whether every point of `curve` lies strictly inside the below-threshold
/// region of `tone`.
pub fn curve_inside(dac: &DacConfig, curve: &[ContourPoint], tone: &ToneSpec, threshold_dbc: f64) -> Result<bool> {
    for p in curve {
        if analytic_spur_dbc(dac, &p.impairment(), tone, DEFAULT_K_RANGE)? >= threshold_dbc {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Traces the threshold level curve for every contour tone.
pub fn run_contours(cfg: &ExperimentConfig) -> Result<ContoursReport> {
    cfg.validate()?;
    let c = &cfg.contours;
    let mut freqs = c.frequencies(&cfg.dac);
    freqs.sort_by(f64::total_cmp);
    let curves = map_jobs(&freqs, |f| -> Result<(ContourCurve, Vec<u8>)> {
        let tone = ToneSpec::new(*f, 1.0);
        let points = level_curve(&cfg.dac, &tone, c.threshold_dbc, &c.grid)?;
        let mut deviation: f64 = 0.0;
        for p in &points {
            let spur = analytic_spur_dbc(&cfg.dac, &p.impairment(), &tone, DEFAULT_K_RANGE)?;
            deviation = deviation.max((spur - c.threshold_dbc).abs());
        }
        let curve = ContourCurve {
            f_out_hz: *f,
            file: format!("contour_{:.4}GHz.csv", f / 1e9),
            max_gain_error_pct: points.iter().map(|p| p.gain_error_pct).fold(0.0, f64::max),
            max_duty_error_pct: points.iter().map(|p| p.duty_error_pct).fold(0.0, f64::max),
            max_deviation_db: deviation,
            points,
        };
        let bytes = csv_bytes(&curve.points)?;
        Ok((curve, bytes))
    });
    let mut out = Vec::with_capacity(curves.len());
    let mut files = Vec::with_capacity(curves.len());
    for r in curves {
        let (curve, bytes) = r?;
        files.push((curve.file.clone(), bytes));
        out.push(curve);
    }
    let mut nested = true;
    for w in out.windows(2) {
        nested &= curve_inside(&cfg.dac, &w[1].points, &ToneSpec::new(w[0].f_out_hz, 1.0), c.threshold_dbc)?;
    }
    let worst = out.iter().map(|c| c.max_deviation_db).fold(0.0, f64::max);
    let checks = vec![
        ThresholdCheck::at_most("contour_max_deviation_db", worst, cfg.thresholds.contour_tolerance_db),
        ThresholdCheck::at_least("contours_nested", if nested { 1.0 } else { 0.0 }, 1.0),
    ];
    let report = ContoursReport {
        config_hash: cfg.hash()?,
        threshold_dbc: c.threshold_dbc,
        passed: checks.iter().all(|c| c.passed),
        curves: out,
        nested,
        checks,
    };
    for (name, bytes) in files {
        write_atomic(&cfg.output_dir.join(name), &bytes)?;
    }
    write_json(&cfg.output_dir.join("contours_report.json"), &report)?;
    Ok(report)
}

/// Snapped tone that a sweep entry will actually use.
pub fn effective_tone(cfg: &ExperimentConfig, f_out_hz: f64) -> ToneSpec {
    let tone = ToneSpec::new(f_out_hz, cfg.sweep.amplitude);
    let capture = cfg.capture_config();
    if capture.coherent {
        snap_coherent(&tone, &capture, &cfg.dac)
    } else {
        tone
    }
}
