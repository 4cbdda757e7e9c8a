//! Per-phase energy model, battery pack and the derived power metrics.
//!
//! Two measured profiles are provided. `regulator` is the bench measurement
//! behind an LM2596 buck stage (every row satisfies E = V·I·t at 8.5 V);
//! `ideal` assumes a lossless converter to 5.25 V.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimDuration;

/// Acquisition-cycle phases, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhaseName {
    PhStabilize,
    PhPlusTb,
    AnalogReadA,
    DoStabilize,
    DoPlusLv,
    AnalogReadB,
    EcStabilize,
    AnalogReadC,
    LoRaTx,
    Standby,
}

impl PhaseName {
    pub const ORDER: [PhaseName; 10] = [
        PhaseName::PhStabilize,
        PhaseName::PhPlusTb,
        PhaseName::AnalogReadA,
        PhaseName::DoStabilize,
        PhaseName::DoPlusLv,
        PhaseName::AnalogReadB,
        PhaseName::EcStabilize,
        PhaseName::AnalogReadC,
        PhaseName::LoRaTx,
        PhaseName::Standby,
    ];

    pub fn is_read_window(self) -> bool {
        matches!(
            self,
            PhaseName::AnalogReadA | PhaseName::AnalogReadB | PhaseName::AnalogReadC
        )
    }
}

/// One row of a profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub name: PhaseName,
    pub duration: SimDuration,
    /// Whole-system draw in microamps.
    pub current_ua: u32,
}

impl Phase {
    pub fn current_ma(&self) -> f64 {
        self.current_ua as f64 / 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Regulator,
    Ideal,
}

impl FromStr for ProfileKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regulator" => Ok(ProfileKind::Regulator),
            "ideal" => Ok(ProfileKind::Ideal),
            other => Err(format!("unknown profile `{other}` (expected regulator|ideal)")),
        }
    }
}

impl fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileKind::Regulator => "regulator",
            ProfileKind::Ideal => "ideal",
        })
    }
}

/// The ten phases of one sampling period plus the supply voltage they run at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseProfile {
    pub phases: Vec<Phase>,
    pub supply_mv: u32,
}

const DURATIONS_MS: [u64; 10] = [
    80_000, 10_000, 5_120, 80_000, 10_000, 5_120, 20_000, 5_120, 2_000, 382_640,
];
const REGULATOR_UA: [u32; 10] = [
    18_200, 30_000, 39_000, 16_500, 26_100, 35_000, 24_700, 33_900, 41_800, 15_700,
];
const IDEAL_UA: [u32; 10] = [
    12_400, 26_500, 38_200, 10_200, 21_700, 33_200, 17_000, 28_000, 38_000, 9_300,
];

pub const REGULATOR_SUPPLY_MV: u32 = 8_500;
pub const IDEAL_SUPPLY_MV: u32 = 5_250;

impl PhaseProfile {
    fn build(currents: [u32; 10], supply_mv: u32) -> Self {
        let phases = PhaseName::ORDER
            .iter()
            .zip(DURATIONS_MS)
            .zip(currents)
            .map(|((&name, ms), current_ua)| Phase {
                name,
                duration: SimDuration::from_millis(ms),
                current_ua,
            })
            .collect();
        Self { phases, supply_mv }
    }

    pub fn regulator() -> Self {
        Self::build(REGULATOR_UA, REGULATOR_SUPPLY_MV)
    }

    pub fn ideal() -> Self {
        Self::build(IDEAL_UA, IDEAL_SUPPLY_MV)
    }

    pub fn of_kind(kind: ProfileKind) -> Self {
        match kind {
            ProfileKind::Regulator => Self::regulator(),
            ProfileKind::Ideal => Self::ideal(),
        }
    }

    pub fn supply_v(&self) -> f64 {
        self.supply_mv as f64 / 1000.0
    }

    pub fn phase(&self, name: PhaseName) -> &Phase {
        self.phases
            .iter()
            .find(|p| p.name == name)
            .expect("profiles carry every phase")
    }

    pub fn period(&self) -> SimDuration {
        self.phases.iter().map(|p| p.duration).sum()
    }

    /// Time from wake to the end of the radio transmission.
    pub fn active_duration(&self) -> SimDuration {
        self.phases
            .iter()
            .filter(|p| p.name != PhaseName::Standby)
            .map(|p| p.duration)
            .sum()
    }

    /// Same currents, with standby stretched or shrunk to fill `period`.
    pub fn with_period(&self, period: SimDuration) -> Option<Self> {
        let active = self.active_duration();
        if period <= active {
            return None;
        }
        let mut p = self.clone();
        for ph in &mut p.phases {
            if ph.name == PhaseName::Standby {
                ph.duration = SimDuration(period.0 - active.0);
            }
        }
        Some(p)
    }
}

/// Energy of one phase in joules, with current in mA and supply in V.
pub fn phase_energy(duration_s: f64, current_ma: f64, supply_v: f64) -> f64 {
    duration_s * current_ma * supply_v / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryPack {
    pub cell_capacity_mah: f64,
    pub cell_energy_wh: f64,
    pub nominal_cell_voltage: f64,
    pub series: u32,
    pub parallel: u32,
}

impl Default for BatteryPack {
    fn default() -> Self {
        Self {
            cell_capacity_mah: 3200.0,
            cell_energy_wh: 11.5,
            nominal_cell_voltage: 3.7,
            series: 2,
            parallel: 4,
        }
    }
}

impl BatteryPack {
    pub fn pack_capacity_mah(&self) -> f64 {
        self.parallel as f64 * self.cell_capacity_mah
    }

    pub fn pack_energy_wh(&self) -> f64 {
        (self.series * self.parallel) as f64 * self.cell_energy_wh
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// Pack capacity ÷ average current.
    Capacity,
    /// Pack energy ÷ average power.
    Energy,
}

impl FromStr for Basis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "capacity" => Ok(Basis::Capacity),
            "energy" => Ok(Basis::Energy),
            other => Err(format!("unknown basis `{other}` (expected capacity|energy)")),
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Capacity => "capacity",
            Basis::Energy => "energy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub idle_power_mw: f64,
    pub energy_per_sample_mwh: f64,
    pub avg_current_ma: f64,
    pub avg_power_mw: f64,
    pub discharge_h: f64,
    pub discharge_days: f64,
    pub basis: Basis,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnergyError {
    #[error("profile draws no current; discharge time is unbounded")]
    ZeroConsumption,
    #[error("profile has zero total duration")]
    EmptyProfile,
}

pub fn energy_report(
    profile: &PhaseProfile,
    pack: &BatteryPack,
    basis: Basis,
) -> Result<EnergyReport, EnergyError> {
    let period_s = profile.period().as_secs_f64();
    if period_s <= 0.0 {
        return Err(EnergyError::EmptyProfile);
    }
    let v = profile.supply_v();
    let charge_mas: f64 = profile
        .phases
        .iter()
        .map(|p| p.current_ma() * p.duration.as_secs_f64())
        .sum();
    let avg_current_ma = charge_mas / period_s;
    if avg_current_ma <= 0.0 {
        return Err(EnergyError::ZeroConsumption);
    }
    let energy_j: f64 = profile
        .phases
        .iter()
        .map(|p| phase_energy(p.duration.as_secs_f64(), p.current_ma(), v))
        .sum();
    let avg_power_mw = avg_current_ma * v;
    let discharge_h = match basis {
        Basis::Capacity => pack.pack_capacity_mah() / avg_current_ma,
        Basis::Energy => pack.pack_energy_wh() * 1000.0 / avg_power_mw,
    };
    Ok(EnergyReport {
        idle_power_mw: profile.phase(PhaseName::Standby).current_ma() * v,
        // J → mWh
        energy_per_sample_mwh: energy_j / 3.6,
        avg_current_ma,
        avg_power_mw,
        discharge_h,
        discharge_days: discharge_h / 24.0,
        basis,
    })
}

/// Accumulated consumption, kept in integer units so repeated cycles add
/// up without rounding drift: charge in µA·ms, energy in pJ (µA·ms·mV).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub charge_ua_ms: u128,
    pub energy_pj: u128,
}

impl EnergyLedger {
    pub fn record(&mut self, duration: SimDuration, current_ua: u32, supply_mv: u32) {
        let q = duration.0 as u128 * current_ua as u128;
        self.charge_ua_ms += q;
        self.energy_pj += q * supply_mv as u128;
    }

    pub fn charge_mas(&self) -> f64 {
        self.charge_ua_ms as f64 / 1e6
    }

    pub fn charge_mah(&self) -> f64 {
        self.charge_mas() / 3600.0
    }

    pub fn energy_j(&self) -> f64 {
        self.energy_pj as f64 / 1e12
    }

    pub fn plus(&self, other: &EnergyLedger) -> EnergyLedger {
        EnergyLedger {
            charge_ua_ms: self.charge_ua_ms + other.charge_ua_ms,
            energy_pj: self.energy_pj + other.energy_pj,
        }
    }
}

/// Latching-relay coil pulse: 10 mA for 1 ms per switch event.
pub const RELAY_PULSE_UA: u32 = 10_000;
pub const RELAY_PULSE: SimDuration = SimDuration::from_millis(1);
