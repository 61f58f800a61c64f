//! Emulated digital control surface of the converter.
//!
//! Six registers trim the three physical error sources: per-sub-DAC output
//! current (gain), a coarse and a fine duty-cycle trim, and a per-sub-DAC
//! phase trim. Codes map affinely onto an [`ImpairmentState`] around the
//! uncalibrated base impairment, with midscale meaning "no trim".

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::spectral::{analytic_spur_dbc, DacConfig, ImpairmentState, ToneSpec, DEFAULT_K_RANGE};

pub const NUM_REGISTERS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegisterRole {
    CurrentA,
    CurrentB,
    DutyCoarse,
    DutyFine,
    PhaseA,
    PhaseB,
}

impl RegisterRole {
    pub const ALL: [RegisterRole; NUM_REGISTERS] = [
        RegisterRole::CurrentA,
        RegisterRole::CurrentB,
        RegisterRole::DutyCoarse,
        RegisterRole::DutyFine,
        RegisterRole::PhaseA,
        RegisterRole::PhaseB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegisterRole::CurrentA => "current_a",
            RegisterRole::CurrentB => "current_b",
            RegisterRole::DutyCoarse => "duty_coarse",
            RegisterRole::DutyFine => "duty_fine",
            RegisterRole::PhaseA => "phase_a",
            RegisterRole::PhaseB => "phase_b",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterSpec {
    pub address: usize,
    pub name: String,
    pub width_bits: u32,
    pub reset_value: u32,
    pub role: RegisterRole,
    /// Locked registers keep their reset value; the optimizer never proposes them.
    #[serde(default)]
    pub locked: bool,
}

impl RegisterSpec {
    pub fn new(role: RegisterRole, width_bits: u32) -> Self {
        let address = RegisterRole::ALL.iter().position(|r| *r == role).unwrap();
        Self {
            address,
            name: role.name().to_string(),
            width_bits,
            reset_value: 1 << (width_bits - 1),
            role,
            locked: false,
        }
    }

    pub fn max_code(&self) -> u32 {
        ((1u64 << self.width_bits) - 1) as u32
    }

    /// The "no trim" code.
    pub fn midscale(&self) -> u32 {
        1 << (self.width_bits - 1)
    }
}

/// Address-ordered register specifications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RegisterSpec>", into = "Vec<RegisterSpec>")]
pub struct RegisterMap {
    specs: Vec<RegisterSpec>,
}

impl TryFrom<Vec<RegisterSpec>> for RegisterMap {
    type Error = Error;

    fn try_from(specs: Vec<RegisterSpec>) -> Result<Self> {
        Self::new(specs)
    }
}

impl From<RegisterMap> for Vec<RegisterSpec> {
    fn from(map: RegisterMap) -> Self {
        map.specs
    }
}

impl Default for RegisterMap {
    fn default() -> Self {
        Self::uniform(8)
    }
}

impl RegisterMap {
    pub fn new(mut specs: Vec<RegisterSpec>) -> Result<Self> {
        if specs.len() != NUM_REGISTERS {
            return Err(Error::InvalidConfig(format!(
                "expected {NUM_REGISTERS} registers, got {}",
                specs.len()
            )));
        }
        specs.sort_by_key(|s| s.address);
        for (i, s) in specs.iter().enumerate() {
            if s.address != i {
                return Err(Error::InvalidConfig(format!(
                    "register addresses must be exactly 0..{NUM_REGISTERS}, found {}",
                    s.address
                )));
            }
            if !(1..=16).contains(&s.width_bits) {
                return Err(Error::InvalidConfig(format!(
                    "register {} width {} outside 1..=16",
                    s.name, s.width_bits
                )));
            }
            if s.reset_value > s.max_code() {
                return Err(Error::InvalidConfig(format!(
                    "register {} reset value {} exceeds {}",
                    s.name,
                    s.reset_value,
                    s.max_code()
                )));
            }
        }
        for role in RegisterRole::ALL {
            if specs.iter().filter(|s| s.role == role).count() != 1 {
                return Err(Error::InvalidConfig(format!("role {} must appear exactly once", role.name())));
            }
        }
        Ok(Self { specs })
    }

    /// Six registers of the same width, in canonical role order.
    pub fn uniform(width_bits: u32) -> Self {
        Self { specs: RegisterRole::ALL.iter().map(|r| RegisterSpec::new(*r, width_bits)).collect() }
    }

    /// Same map with every register except `active` locked at reset.
    pub fn with_active(mut self, active: &[RegisterRole]) -> Self {
        for s in &mut self.specs {
            s.locked = !active.contains(&s.role);
        }
        self
    }

    pub fn spec(&self, address: usize) -> Result<&RegisterSpec> {
        self.specs.get(address).ok_or(Error::BadAddress(address))
    }

    pub fn specs(&self) -> &[RegisterSpec] {
        &self.specs
    }

    pub fn address_of(&self, role: RegisterRole) -> usize {
        self.specs.iter().position(|s| s.role == role).expect("validated map has every role")
    }

    pub fn active_addresses(&self) -> Vec<usize> {
        self.specs.iter().filter(|s| !s.locked).map(|s| s.address).collect()
    }

    /// Number of register files reachable by changing unlocked registers.
    pub fn state_space_size(&self) -> f64 {
        self.specs.iter().filter(|s| !s.locked).map(|s| (s.max_code() as f64) + 1.0).product()
    }
}

/// The state vector: one code per register, indexed by address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegisterFile {
    values: [u32; NUM_REGISTERS],
}

impl RegisterFile {
    pub fn reset(map: &RegisterMap) -> Self {
        let mut values = [0; NUM_REGISTERS];
        for s in map.specs() {
            values[s.address] = s.reset_value;
        }
        Self { values }
    }

    pub fn from_codes(map: &RegisterMap, codes: [u32; NUM_REGISTERS]) -> Result<Self> {
        for (address, code) in codes.iter().enumerate() {
            check_code(map, address, *code)?;
        }
        Ok(Self { values: codes })
    }

    pub fn get(&self, address: usize) -> Result<u32> {
        self.values.get(address).copied().ok_or(Error::BadAddress(address))
    }

    pub fn codes(&self) -> [u32; NUM_REGISTERS] {
        self.values
    }

    /// Copy of this file with one register rewritten.
    pub fn write(&self, map: &RegisterMap, address: usize, code: u32) -> Result<Self> {
        check_code(map, address, code)?;
        let mut next = *self;
        next.values[address] = code;
        Ok(next)
    }

    /// Number of registers whose codes differ.
    pub fn hamming(&self, other: &RegisterFile) -> usize {
        self.values.iter().zip(other.values.iter()).filter(|(a, b)| a != b).count()
    }
}

impl fmt::Display for RegisterFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let codes: Vec<String> = self.values.iter().map(|v| v.to_string()).collect();
        write!(f, "[{}]", codes.join(", "))
    }
}

fn check_code(map: &RegisterMap, address: usize, code: u32) -> Result<()> {
    let spec = map.spec(address)?;
    if code > spec.max_code() {
        return Err(Error::CodeOutOfRange { address, code, max: spec.max_code() });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transaction {
    Write { address: usize, code: u32 },
    Read { address: usize, code: u32 },
}

impl fmt::Display for Transaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transaction::Write { address, code } => write!(f, "W {address} {code}"),
            Transaction::Read { address, code } => write!(f, "R {address} {code}"),
        }
    }
}

/// One register-transaction session against the device, with its trace.
#[derive(Debug, Clone)]
pub struct DeviceSession {
    map: RegisterMap,
    file: RegisterFile,
    log: Vec<Transaction>,
}

impl DeviceSession {
    pub fn new(map: RegisterMap) -> Self {
        let file = RegisterFile::reset(&map);
        Self { map, file, log: Vec::new() }
    }

    pub fn write_register(&mut self, address: usize, code: u32) -> Result<()> {
        self.file = self.file.write(&self.map, address, code)?;
        self.log.push(Transaction::Write { address, code });
        Ok(())
    }

    pub fn read_register(&mut self, address: usize) -> Result<u32> {
        let code = self.file.get(address)?;
        self.log.push(Transaction::Read { address, code });
        Ok(code)
    }

    /// Writes every register whose code differs from `target`.
    pub fn load(&mut self, target: &RegisterFile) -> Result<()> {
        for address in 0..NUM_REGISTERS {
            let code = target.get(address)?;
            if self.file.get(address)? != code {
                self.write_register(address, code)?;
            }
        }
        Ok(())
    }

    pub fn dump(&mut self) -> Result<[u32; NUM_REGISTERS]> {
        let mut out = [0; NUM_REGISTERS];
        for (address, slot) in out.iter_mut().enumerate() {
            *slot = self.read_register(address)?;
        }
        Ok(out)
    }

    pub fn file(&self) -> &RegisterFile {
        &self.file
    }

    pub fn map(&self) -> &RegisterMap {
        &self.map
    }

    pub fn log(&self) -> &[Transaction] {
        &self.log
    }

    pub fn writes(&self) -> usize {
        self.log.iter().filter(|t| matches!(t, Transaction::Write { .. })).count()
    }

    /// `W addr code` / `R addr code` lines.
    pub fn export_log(&self) -> String {
        self.log.iter().map(|t| format!("{t}\n")).collect()
    }
}

/// Physical effect of one LSB on each trim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrimSteps {
    /// Gain change per LSB of either current register.
    pub current_gain: f64,
    /// `α` change per LSB of the coarse duty register.
    pub duty_coarse: f64,
    /// `α` change per LSB of the fine duty register.
    pub duty_fine: f64,
    /// Skew change per LSB of either phase register, as a fraction of `T_s`.
    pub phase_ts: f64,
}

impl Default for TrimSteps {
    fn default() -> Self {
        Self { current_gain: 5e-4, duty_coarse: 2e-4, duty_fine: 2e-5, phase_ts: 1.0 / 2048.0 }
    }
}

const MIN_GAIN: f64 = 1e-3;
const MAX_ALPHA: f64 = 0.45;
const MAX_SKEW_TS: f64 = 0.95;

/// Register-to-impairment map of a virtual chip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    pub dac: DacConfig,
    /// Impairment of the uncalibrated chip (all trims at midscale).
    pub base: ImpairmentState,
    pub steps: TrimSteps,
    pub registers: RegisterMap,
}

/// Default uncalibrated chip: 2% gain error, 1% duty error, `T_s/20` skew on A.
pub fn default_base_impairment(dac: &DacConfig) -> ImpairmentState {
    ImpairmentState {
        alpha: 0.01,
        gain_a: 1.02,
        gain_b: 1.0,
        skew_a_s: dac.sample_period() / 20.0,
        skew_b_s: 0.0,
    }
}

/// Tones used to judge whether a register file calibrates the whole band.
pub fn probe_tones(dac: &DacConfig) -> Vec<ToneSpec> {
    [0.03, 0.11, 0.19, 0.31, 0.39, 0.47]
        .iter()
        .map(|r| ToneSpec::new(r * dac.sample_rate_hz, 1.0))
        .collect()
}

impl PlantModel {
    /// Builds a plant and checks that some register file brings the analytic
    /// spur to `-50 dBc` or better across the probe tones.
    pub fn new(dac: DacConfig, base: ImpairmentState, steps: TrimSteps, registers: RegisterMap) -> Result<Self> {
        let plant = Self::unchecked(dac, base, steps, registers)?;
        let (_, worst) = plant.calibration_check()?;
        if worst > -50.0 {
            return Err(Error::NotCalibratable { best_dbc: worst });
        }
        Ok(plant)
    }

    /// Builds a plant without the calibratability check.
    pub fn unchecked(dac: DacConfig, base: ImpairmentState, steps: TrimSteps, registers: RegisterMap) -> Result<Self> {
        dac.validate()?;
        base.validate(&dac)?;
        base.pulse_widths(&dac)?;
        for (name, v) in [
            ("current_gain", steps.current_gain),
            ("duty_coarse", steps.duty_coarse),
            ("duty_fine", steps.duty_fine),
            ("phase_ts", steps.phase_ts),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("trim step {name} must be positive, got {v}")));
            }
        }
        Ok(Self { dac, base, steps, registers })
    }

    pub fn default_for(dac: DacConfig) -> Result<Self> {
        Self::new(dac, default_base_impairment(&dac), TrimSteps::default(), RegisterMap::default())
    }

    pub fn reset_file(&self) -> RegisterFile {
        RegisterFile::reset(&self.registers)
    }

    fn offset(&self, file: &RegisterFile, role: RegisterRole) -> f64 {
        let address = self.registers.address_of(role);
        let spec = &self.registers.specs()[address];
        file.codes()[address] as f64 - spec.midscale() as f64
    }

    /// Affine map from codes to physical impairments, clamped to a renderable range.
    pub fn impairments(&self, file: &RegisterFile) -> ImpairmentState {
        let ts = self.dac.sample_period();
        let s = &self.steps;
        let raw = ImpairmentState {
            gain_a: self.base.gain_a + s.current_gain * self.offset(file, RegisterRole::CurrentA),
            gain_b: self.base.gain_b + s.current_gain * self.offset(file, RegisterRole::CurrentB),
            alpha: self.base.alpha
                + s.duty_coarse * self.offset(file, RegisterRole::DutyCoarse)
                + s.duty_fine * self.offset(file, RegisterRole::DutyFine),
            skew_a_s: self.base.skew_a_s + s.phase_ts * ts * self.offset(file, RegisterRole::PhaseA),
            skew_b_s: self.base.skew_b_s + s.phase_ts * ts * self.offset(file, RegisterRole::PhaseB),
        };
        let max_skew = MAX_SKEW_TS * ts;
        let clamped = ImpairmentState {
            gain_a: raw.gain_a.max(MIN_GAIN),
            gain_b: raw.gain_b.max(MIN_GAIN),
            alpha: raw.alpha.clamp(-MAX_ALPHA, MAX_ALPHA),
            skew_a_s: raw.skew_a_s.clamp(-max_skew, max_skew),
            skew_b_s: raw.skew_b_s.clamp(-max_skew, max_skew),
        };
        if clamped != raw {
            log::debug!("register file {file} clamped: {raw:?} -> {clamped:?}");
        }
        clamped
    }

    /// Register file nearest the zero-error solution of the affine map.
    pub fn inverse_registers(&self) -> RegisterFile {
        let map = &self.registers;
        let mut codes = self.reset_file().codes();
        let ts = self.dac.sample_period();

        let pair = |codes: &mut [u32; NUM_REGISTERS], a: RegisterRole, b: RegisterRole, diff: f64| {
            // Solve code_a - code_b = diff around midscale, respecting locks.
            let (ia, ib) = (map.address_of(a), map.address_of(b));
            let (sa, sb) = (&map.specs()[ia], &map.specs()[ib]);
            let r = diff.round() as i64;
            let (da, db) = match (sa.locked, sb.locked) {
                (false, false) => (r / 2, r / 2 - r),
                (false, true) => (r + codes[ib] as i64 - sb.midscale() as i64, 0),
                (true, false) => (0, codes[ia] as i64 - sa.midscale() as i64 - r),
                (true, true) => (0, 0),
            };
            if !sa.locked {
                codes[ia] = (sa.midscale() as i64 + da).clamp(0, sa.max_code() as i64) as u32;
            }
            if !sb.locked {
                codes[ib] = (sb.midscale() as i64 + db).clamp(0, sb.max_code() as i64) as u32;
            }
        };
        pair(
            &mut codes,
            RegisterRole::CurrentA,
            RegisterRole::CurrentB,
            (self.base.gain_b - self.base.gain_a) / self.steps.current_gain,
        );
        pair(
            &mut codes,
            RegisterRole::PhaseA,
            RegisterRole::PhaseB,
            (self.base.skew_b_s - self.base.skew_a_s) / (self.steps.phase_ts * ts),
        );

        let (ic, i_f) = (map.address_of(RegisterRole::DutyCoarse), map.address_of(RegisterRole::DutyFine));
        let (sc, sf) = (&map.specs()[ic], &map.specs()[i_f]);
        let mut residual = -self.base.alpha;
        if !sc.locked {
            let d = (residual / self.steps.duty_coarse).round() as i64;
            let code = (sc.midscale() as i64 + d).clamp(0, sc.max_code() as i64);
            codes[ic] = code as u32;
            residual -= self.steps.duty_coarse * (code - sc.midscale() as i64) as f64;
        }
        if !sf.locked {
            let d = (residual / self.steps.duty_fine).round() as i64;
            codes[i_f] = (sf.midscale() as i64 + d).clamp(0, sf.max_code() as i64) as u32;
        }
        RegisterFile { values: codes }
    }

    /// Worst analytic spur over the probe tones for one register file.
    pub fn worst_probe_spur(&self, file: &RegisterFile) -> Result<f64> {
        let imp = self.impairments(file);
        let mut worst = f64::NEG_INFINITY;
        for tone in probe_tones(&self.dac) {
            worst = worst.max(analytic_spur_dbc(&self.dac, &imp, &tone, DEFAULT_K_RANGE)?);
        }
        Ok(worst)
    }

    /// Coordinate descent (±1 LSB) from the rounded inverse; returns the best
    /// file found and its worst-case probe spur.
    pub fn calibration_check(&self) -> Result<(RegisterFile, f64)> {
        let mut best = self.inverse_registers();
        let mut best_spur = self.worst_probe_spur(&best)?;
        let active = self.registers.active_addresses();
        loop {
            let mut improved = false;
            for &address in &active {
                let max = self.registers.specs()[address].max_code();
                let code = best.values[address];
                for next in [code.checked_sub(1), code.checked_add(1).filter(|c| *c <= max)].into_iter().flatten() {
                    let candidate = best.write(&self.registers, address, next)?;
                    let spur = self.worst_probe_spur(&candidate)?;
                    if spur < best_spur {
                        best = candidate;
                        best_spur = spur;
                        improved = true;
                    }
                }
            }
            if !improved {
                return Ok((best, best_spur));
            }
        }
    }
}
