//! Sensor registry, calibration and the averaged ADC read.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::environment::Environment;
use crate::time::{SimDuration, SimTime};

/// Samples averaged per sensor in one read window.
pub const SAMPLES_PER_READ: u32 = 256;

/// Read window length: 256 samples at 20 ms spacing.
pub const READ_WINDOW: SimDuration = SimDuration::from_millis(5_120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sensor {
    Ph,
    Ec,
    Turbidity,
    DissolvedOxygen,
    LiquidLevel,
    Temperature,
    /// Spare analog input on the relay board. Wired but never scheduled.
    J6,
}

impl Sensor {
    pub const MEASURED: [Sensor; 6] = [
        Sensor::Ph,
        Sensor::Ec,
        Sensor::Turbidity,
        Sensor::DissolvedOxygen,
        Sensor::LiquidLevel,
        Sensor::Temperature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sensor::Ph => "ph",
            Sensor::Ec => "ec",
            Sensor::Turbidity => "turbidity",
            Sensor::DissolvedOxygen => "dissolved_oxygen",
            Sensor::LiquidLevel => "liquid_level",
            Sensor::Temperature => "temperature",
            Sensor::J6 => "j6",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub gain: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("calibration gain must be finite and non-zero, got {gain}; offset {offset}")]
pub struct CalibrationError {
    pub gain: f64,
    pub offset: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Calibration {
    pub const IDENTITY: Calibration = Calibration {
        gain: 1.0,
        offset: 0.0,
    };

    pub fn new(gain: f64, offset: f64) -> Result<Self, CalibrationError> {
        if gain == 0.0 || !gain.is_finite() || !offset.is_finite() {
            return Err(CalibrationError { gain, offset });
        }
        Ok(Self { gain, offset })
    }

    pub fn apply(&self, raw: f64) -> f64 {
        self.gain * raw + self.offset
    }
}

/// Per-sensor calibration constants; missing entries are identity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationTable(pub BTreeMap<Sensor, Calibration>);

impl CalibrationTable {
    pub fn get(&self, sensor: Sensor) -> Calibration {
        self.0.get(&sensor).copied().unwrap_or_default()
    }

    pub fn set(&mut self, sensor: Sensor, cal: Calibration) {
        self.0.insert(sensor, cal);
    }
}

/// Averages 256 equally spaced samples over the window, then calibrates.
///
/// Sample `k` is taken at the centre of the `k`-th of 256 equal slots, so a
/// linear signal averages to its value at the window midpoint.
pub fn read_sensor<E: Environment + ?Sized>(
    sensor: Sensor,
    env: &mut E,
    calibration: Calibration,
    window_start: SimTime,
    window_len: SimDuration,
) -> f64 {
    let start = window_start.as_secs_f64();
    let slot = window_len.as_secs_f64() / SAMPLES_PER_READ as f64;
    let sum: f64 = (0..SAMPLES_PER_READ)
        .map(|k| env.sample(sensor, start + (k as f64 + 0.5) * slot))
        .sum();
    calibration.apply(sum / SAMPLES_PER_READ as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Signal<F: FnMut(f64) -> f64>(F);

    impl<F: FnMut(f64) -> f64> Environment for Signal<F> {
        fn truth(&mut self, _: Sensor, t: f64) -> f64 {
            (self.0)(t)
        }
        fn sample(&mut self, s: Sensor, t: f64) -> f64 {
            self.truth(s, t)
        }
    }

    #[test]
    fn constant_signal_reads_back() {
        let mut env = Signal(|_| 7.25);
        let v = read_sensor(
            Sensor::Ph,
            &mut env,
            Calibration::IDENTITY,
            SimTime(80_000),
            READ_WINDOW,
        );
        assert!((v - 7.25).abs() < 1e-12);
    }

    #[test]
    fn affine_calibration() {
        let mut env = Signal(|_| 3.0);
        let cal = Calibration::new(2.0, 1.0).unwrap();
        let v = read_sensor(Sensor::Ec, &mut env, cal, SimTime(0), READ_WINDOW);
        assert!((v - 7.0).abs() < 1e-12);
    }

    #[test]
    fn ramp_averages_to_window_midpoint() {
        let ramp = |t: f64| 2.0 + 0.5 * t;
        // brute-force the 256 sample instants independently
        let start = 90.0;
        let mut brute = 0.0;
        for k in 0..256 {
            brute += ramp(start + 0.01 + 0.02 * k as f64);
        }
        brute /= 256.0;
        let midpoint = ramp(start + 2.56);
        assert!((brute - midpoint).abs() < 1e-9);

        let mut env = Signal(ramp);
        let v = read_sensor(
            Sensor::Ph,
            &mut env,
            Calibration::IDENTITY,
            SimTime(90_000),
            READ_WINDOW,
        );
        assert!((v - midpoint).abs() < 1e-9);
    }

    #[test]
    fn takes_exactly_256_samples() {
        let mut count = 0;
        read_sensor(
            Sensor::Ph,
            &mut Signal(|_| {
                count += 1;
                0.0
            }),
            Calibration::IDENTITY,
            SimTime(0),
            READ_WINDOW,
        );
        assert_eq!(count, 256);
    }

    #[test]
    fn zero_gain_rejected() {
        assert!(Calibration::new(0.0, 1.0).is_err());
        assert!(Calibration::new(f64::INFINITY, 0.0).is_err());
        assert!(CalibrationTable::default().get(Sensor::Ph) == Calibration::IDENTITY);
    }
}
