//! Simulated-annealing search over the register state space, plus the
//! stride-lattice grid search it is compared against.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::path::Path;

use crate::error::{Error, Result};
use crate::meter::{CostScale, SpurMeter};
use crate::plant::{RegisterFile, RegisterMap, NUM_REGISTERS};

/// One cost-function evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub cost: f64,
    /// Spur relative to the carrier, when the objective knows it.
    pub spur_dbc: Option<f64>,
}

impl Evaluation {
    pub fn cost_only(cost: f64) -> Self {
        Self { cost, spur_dbc: None }
    }
}

/// The cost function `C(s)` being minimized.
pub trait Objective {
    fn evaluate(&mut self, state: &RegisterFile) -> Result<Evaluation>;
}

impl<F> Objective for F
where
    F: FnMut(&RegisterFile) -> Result<f64>,
{
    fn evaluate(&mut self, state: &RegisterFile) -> Result<Evaluation> {
        self(state).map(Evaluation::cost_only)
    }
}

/// A spur-meter session seen as a cost function.
pub struct MeterObjective<'a> {
    pub meter: &'a mut SpurMeter,
    pub scale: CostScale,
}

impl<'a> MeterObjective<'a> {
    pub fn new(meter: &'a mut SpurMeter, scale: CostScale) -> Self {
        Self { meter, scale }
    }
}

impl Objective for MeterObjective<'_> {
    fn evaluate(&mut self, state: &RegisterFile) -> Result<Evaluation> {
        let m = self.meter.measure(state)?;
        Ok(Evaluation { cost: m.cost(self.scale), spur_dbc: Some(m.spur_dbc) })
    }
}

/// Half-width of the neighbor draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborWindow {
    /// Uniform over `[code - w, code + w]` clipped to the register range.
    Lsb(u32),
    /// Uniform over the whole register range.
    FullRange,
}

impl Default for NeighborWindow {
    fn default() -> Self {
        NeighborWindow::Lsb(32)
    }
}

impl Serialize for NeighborWindow {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NeighborWindow::Lsb(w) => s.serialize_u32(*w),
            NeighborWindow::FullRange => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for NeighborWindow {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Lsb(u32),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Lsb(0) => Err(serde::de::Error::custom("neighbor window must be at least 1 LSB")),
            Repr::Lsb(w) => Ok(NeighborWindow::Lsb(w)),
            Repr::Name(n) if n == "full" || n == "full_range" => Ok(NeighborWindow::FullRange),
            Repr::Name(n) => Err(serde::de::Error::custom(format!(
                "neighbor window must be a positive integer or \"full\", got {n:?}"
            ))),
        }
    }
}

/// Random neighbor: pick one unlocked register uniformly, redraw its code
/// uniformly within the window. The new code may equal the old one.
pub fn neighbor<R: Rng + ?Sized>(
    state: &RegisterFile,
    map: &RegisterMap,
    window: NeighborWindow,
    rng: &mut R,
) -> RegisterFile {
    let active = map.active_addresses();
    if active.is_empty() {
        return *state;
    }
    let address = active[rng.gen_range(0..active.len())];
    let max = map.specs()[address].max_code();
    let code = state.codes()[address];
    let (lo, hi) = match window {
        NeighborWindow::FullRange => (0, max),
        NeighborWindow::Lsb(w) => (code.saturating_sub(w), code.saturating_add(w).min(max)),
    };
    let mut codes = state.codes();
    codes[address] = rng.gen_range(lo..=hi);
    RegisterFile::from_codes(map, codes).expect("neighbor code within register range")
}

/// Metropolis rule: downhill always, uphill when `u < exp(-β ΔE / T)`.
pub fn metropolis_accept(delta: f64, temperature: f64, beta: f64, u: f64) -> bool {
    delta <= 0.0 || u < (-beta * delta / temperature).exp()
}

/// Temperatures `T_max γ^n` strictly above `T_min`.
pub fn temperature_schedule(t_max: f64, t_min: f64, gamma: f64) -> Vec<f64> {
    let mut temps = Vec::new();
    let mut n = 0;
    loop {
        let t = t_max * gamma.powi(n);
        if !(t > t_min) {
            return temps;
        }
        temps.push(t);
        n += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealParams {
    pub t_max: f64,
    pub t_min: f64,
    pub gamma: f64,
    pub beta: f64,
    /// Proposals per temperature (`K`).
    pub k_inner: usize,
    pub seed: u64,
    pub neighbor_window: NeighborWindow,
    /// Re-measure the current state before every comparison instead of
    /// reusing its cached cost.
    #[serde(default)]
    pub remeasure_current: bool,
    /// Stop as soon as the best cost reaches this value.
    #[serde(default)]
    pub target_cost: Option<f64>,
}

impl Default for AnnealParams {
    fn default() -> Self {
        Self {
            t_max: 1.0,
            t_min: 1.0 / 3.0,
            gamma: 0.8,
            beta: 50.0,
            k_inner: 30,
            seed: 0,
            neighbor_window: NeighborWindow::default(),
            remeasure_current: false,
            target_cost: None,
        }
    }
}

impl AnnealParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_max.is_finite() && self.t_min > 0.0 && self.t_min < self.t_max) {
            return Err(Error::InvalidConfig(format!(
                "temperatures must satisfy 0 < t_min < t_max, got {} / {}",
                self.t_min, self.t_max
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        if self.k_inner == 0 {
            return Err(Error::InvalidConfig("k_inner must be at least 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Vec<f64> {
        temperature_schedule(self.t_max, self.t_min, self.gamma)
    }

    /// Measurements a full run takes with cached current cost.
    pub fn budget(&self) -> usize {
        1 + self.k_inner * self.schedule().len()
    }
}

/// Data-driven start temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmUp {
    /// Neighbor pairs probed from the start state.
    pub probes: usize,
    /// Acceptance probability of the median uphill probe at `T_max`.
    pub acceptance: f64,
    /// `T_min = T_max * t_min_ratio`.
    pub t_min_ratio: f64,
}

impl Default for WarmUp {
    fn default() -> Self {
        Self { probes: 20, acceptance: 0.5, t_min_ratio: 1.0 / 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WarmUpOutcome {
    pub t_max: f64,
    pub t_min: f64,
    pub median_uphill: f64,
    pub measurements: usize,
}

/// Probes `probes` random neighbors of `start` and sets `T_max` so the median
/// uphill cost step is accepted with probability `acceptance`.
pub fn warm_up<O: Objective + ?Sized>(
    objective: &mut O,
    map: &RegisterMap,
    start: &RegisterFile,
    beta: f64,
    window: NeighborWindow,
    cfg: &WarmUp,
    seed: u64,
) -> Result<WarmUpOutcome> {
    if !(cfg.acceptance > 0.0 && cfg.acceptance < 1.0 && cfg.t_min_ratio > 0.0 && cfg.t_min_ratio < 1.0) {
        return Err(Error::InvalidConfig("warm-up acceptance and t_min_ratio must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let base = objective.evaluate(start)?.cost;
    let mut uphill = Vec::with_capacity(cfg.probes);
    for _ in 0..cfg.probes {
        let s = neighbor(start, map, window, &mut rng);
        let d = objective.evaluate(&s)?.cost - base;
        if d > 0.0 {
            uphill.push(d);
        }
    }
    uphill.sort_by(f64::total_cmp);
    let median = if uphill.is_empty() {
        1.0
    } else if uphill.len() % 2 == 1 {
        uphill[uphill.len() / 2]
    } else {
        0.5 * (uphill[uphill.len() / 2 - 1] + uphill[uphill.len() / 2])
    };
    let t_max = -beta * median / cfg.acceptance.ln();
    Ok(WarmUpOutcome { t_max, t_min: t_max * cfg.t_min_ratio, median_uphill: median, measurements: cfg.probes + 1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub measurement_index: usize,
    pub temperature: f64,
    pub state: RegisterFile,
    pub cost: f64,
    pub spur_dbc: Option<f64>,
    pub accepted: bool,
    pub best_cost: f64,
    pub best_spur_dbc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnealResult {
    pub best_state: RegisterFile,
    pub best_cost: f64,
    pub best_spur_dbc: Option<f64>,
    pub cost_trace: Vec<TraceEntry>,
    pub measurement_count: usize,
    pub accepted_uphill: usize,
    pub outer_iterations: usize,
    /// Measurement index at which the best state was first evaluated.
    pub converged_at: usize,
}

impl AnnealResult {
    fn start(state: RegisterFile, eval: Evaluation, temperature: f64) -> Self {
        Self {
            best_state: state,
            best_cost: eval.cost,
            best_spur_dbc: eval.spur_dbc,
            cost_trace: vec![TraceEntry {
                measurement_index: 0,
                temperature,
                state,
                cost: eval.cost,
                spur_dbc: eval.spur_dbc,
                accepted: true,
                best_cost: eval.cost,
                best_spur_dbc: eval.spur_dbc,
            }],
            measurement_count: 1,
            accepted_uphill: 0,
            outer_iterations: 0,
            converged_at: 0,
        }
    }

    fn record(&mut self, state: RegisterFile, eval: Evaluation, temperature: f64, accepted: bool) {
        self.cost_trace.push(TraceEntry {
            measurement_index: self.measurement_count,
            temperature,
            state,
            cost: eval.cost,
            spur_dbc: eval.spur_dbc,
            accepted,
            best_cost: self.best_cost,
            best_spur_dbc: self.best_spur_dbc,
        });
        self.measurement_count += 1;
    }

    fn improve(&mut self, state: RegisterFile, eval: Evaluation) {
        self.best_state = state;
        self.best_cost = eval.cost;
        self.best_spur_dbc = eval.spur_dbc;
        self.converged_at = self.measurement_count;
    }

    /// `measurement_index, temperature, proposed_cost_dbc, accepted, best_cost_dbc`.
    /// The dB columns carry the spur in dBc when known, otherwise the raw cost.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["measurement_index", "temperature", "proposed_cost_dbc", "accepted", "best_cost_dbc"])?;
        for e in &self.cost_trace {
            w.write_record([
                e.measurement_index.to_string(),
                format!("{:e}", e.temperature),
                format!("{:.4}", e.spur_dbc.unwrap_or(e.cost)),
                e.accepted.to_string(),
                format!("{:.4}", e.best_spur_dbc.unwrap_or(e.best_cost)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the annealer from `start`. A failed measurement aborts the run and
/// returns [`Error::Aborted`] carrying the partial result.
pub fn anneal<O: Objective + ?Sized>(
    objective: &mut O,
    map: &RegisterMap,
    start: &RegisterFile,
    params: &AnnealParams,
) -> Result<AnnealResult> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let schedule = params.schedule();

    let first = objective.evaluate(start)?;
    let mut result = AnnealResult::start(*start, first, params.t_max);
    let mut current = *start;
    let mut current_cost = first.cost;

    let abort = |result: AnnealResult, source: Error| Error::Aborted {
        partial: Box::new(result),
        source: Box::new(source),
    };
    let reached = |r: &AnnealResult| params.target_cost.is_some_and(|t| r.best_cost <= t);

    'outer: for &temperature in &schedule {
        result.outer_iterations += 1;
        for _ in 0..params.k_inner {
            if reached(&result) {
                break 'outer;
            }
            let proposal = neighbor(&current, map, params.neighbor_window, &mut rng);
            if params.remeasure_current {
                match objective.evaluate(&current) {
                    Ok(e) => {
                        current_cost = e.cost;
                        result.record(current, e, temperature, true);
                    }
                    Err(e) => return Err(abort(result, e)),
                }
            }
            let eval = match objective.evaluate(&proposal) {
                Ok(e) => e,
                Err(e) => return Err(abort(result, e)),
            };
            let delta = eval.cost - current_cost;
            let accepted = if delta <= 0.0 {
                current = proposal;
                current_cost = eval.cost;
                if current_cost < result.best_cost {
                    result.improve(current, eval);
                }
                true
            } else if metropolis_accept(delta, temperature, params.beta, rng.gen::<f64>()) {
                current = proposal;
                current_cost = eval.cost;
                result.accepted_uphill += 1;
                true
            } else {
                false
            };
            result.record(proposal, eval, temperature, accepted);
        }
    }
    Ok(result)
}

/// Evenly spaced codes along one register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridAxis {
    pub address: usize,
    pub start: u32,
    pub stride: u32,
    pub count: u32,
}

impl GridAxis {
    /// `count` cell-centred codes spanning the whole register.
    pub fn spanning(map: &RegisterMap, address: usize, count: u32) -> Result<Self> {
        let spec = map.spec(address)?;
        let range = spec.max_code() + 1;
        if count == 0 || count > range {
            return Err(Error::InvalidConfig(format!("axis count {count} outside 1..={range}")));
        }
        let stride = range / count;
        let start = (range - stride * (count - 1)) / 2;
        Ok(Self { address, start, stride: stride.max(1), count })
    }

    pub fn codes(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.count).map(move |i| self.start + i * self.stride)
    }
}

/// Default 280-point lattice over current_a, current_b, duty_coarse and phase_a.
pub fn default_grid_axes(map: &RegisterMap) -> Result<Vec<GridAxis>> {
    use crate::plant::RegisterRole::*;
    [(CurrentA, 5), (CurrentB, 4), (DutyCoarse, 7), (PhaseA, 2)]
        .iter()
        .map(|(role, count)| GridAxis::spanning(map, map.address_of(*role), *count))
        .collect()
}

/// Exhaustive evaluation of the lattice spanned by `axes` (other registers
/// keep their codes from `base`). Errors before measuring anything when the
/// lattice exceeds `budget`.
pub fn grid_search<O: Objective + ?Sized>(
    objective: &mut O,
    map: &RegisterMap,
    base: &RegisterFile,
    axes: &[GridAxis],
    budget: usize,
) -> Result<AnnealResult> {
    let points: usize = axes.iter().map(|a| a.count as usize).product();
    if points > budget {
        return Err(Error::BudgetExceeded { points, budget });
    }
    let mut seen = [false; NUM_REGISTERS];
    for a in axes {
        let spec = map.spec(a.address)?;
        if seen[a.address] {
            return Err(Error::InvalidConfig(format!("register {} appears on two grid axes", a.address)));
        }
        seen[a.address] = true;
        if a.count == 0 || a.codes().any(|c| c > spec.max_code()) {
            return Err(Error::InvalidConfig(format!("grid axis on register {} leaves its range", a.address)));
        }
    }

    let mut result: Option<AnnealResult> = None;
    let mut index = vec![0u32; axes.len()];
    for _ in 0..points {
        let mut codes = base.codes();
        for (axis, i) in axes.iter().zip(&index) {
            codes[axis.address] = axis.start + i * axis.stride;
        }
        let state = RegisterFile::from_codes(map, codes)?;
        let eval = objective.evaluate(&state)?;
        match &mut result {
            None => result = Some(AnnealResult::start(state, eval, 0.0)),
            Some(r) => {
                let better = eval.cost < r.best_cost;
                if better {
                    r.improve(state, eval);
                }
                r.record(state, eval, 0.0, better);
            }
        }
        for (i, axis) in index.iter_mut().zip(axes) {
            *i += 1;
            if *i < axis.count {
                break;
            }
            *i = 0;
        }
    }
    match result {
        Some(r) => Ok(r),
        None => {
            let eval = objective.evaluate(base)?;
            Ok(AnnealResult::start(*base, eval, 0.0))
        }
    }
}
