//! Ground-truth water signals and per-sample measurement noise.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sensor::Sensor;

/// Source of readings for the node's analog front end.
pub trait Environment {
    /// Noise-free value of the quantity at `t` seconds.
    fn truth(&mut self, sensor: Sensor, t: f64) -> f64;
    /// One ADC-level sample: truth plus measurement noise.
    fn sample(&mut self, sensor: Sensor, t: f64) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalSpec {
    Constant {
        value: f64,
    },
    Diurnal {
        mean: f64,
        amplitude: f64,
        #[serde(default = "default_diurnal_period")]
        period_s: f64,
        #[serde(default)]
        phase_s: f64,
    },
    /// Gaussian steps every `step_s` seconds, clamped to `[min, max]`,
    /// linearly interpolated between steps.
    RandomWalk {
        start: f64,
        step_sd: f64,
        min: f64,
        max: f64,
        #[serde(default = "default_walk_step")]
        step_s: f64,
    },
}

fn default_diurnal_period() -> f64 {
    86_400.0
}

fn default_walk_step() -> f64 {
    600.0
}

impl SignalSpec {
    pub fn validate(&self) -> Result<(), String> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be finite"))
            }
        };
        match *self {
            SignalSpec::Constant { value } => finite("value", value),
            SignalSpec::Diurnal {
                mean,
                amplitude,
                period_s,
                phase_s,
            } => {
                finite("mean", mean)?;
                finite("amplitude", amplitude)?;
                finite("phase_s", phase_s)?;
                if !(period_s > 0.0 && period_s.is_finite()) {
                    return Err("period_s must be > 0".into());
                }
                Ok(())
            }
            SignalSpec::RandomWalk {
                start,
                step_sd,
                min,
                max,
                step_s,
            } => {
                finite("start", start)?;
                if !min.is_finite() || !max.is_finite() || min > max {
                    return Err("random walk needs finite min <= max".into());
                }
                if !(step_sd >= 0.0 && step_sd.is_finite()) {
                    return Err("step_sd must be >= 0".into());
                }
                if !(step_s > 0.0 && step_s.is_finite()) {
                    return Err("step_s must be > 0".into());
                }
                Ok(())
            }
        }
    }
}

/// Signal and noise level for one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesSpec {
    pub signal: SignalSpec,
    #[serde(default)]
    pub noise_sd: f64,
}

/// Environment description for one node, keyed by sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnvironmentSpec(pub BTreeMap<Sensor, SeriesSpec>);

impl Default for EnvironmentSpec {
    /// Plausible lagoon ranges: temperature 5–30 °C, pH 7.5–8.5,
    /// EC 20–60 mS/cm, DO 4–12 mg/L.
    fn default() -> Self {
        let mut m = BTreeMap::new();
        let diurnal = |mean, amplitude, phase_s| SignalSpec::Diurnal {
            mean,
            amplitude,
            period_s: default_diurnal_period(),
            phase_s,
        };
        m.insert(
            Sensor::Temperature,
            SeriesSpec {
                signal: diurnal(17.5, 4.0, 0.0),
                noise_sd: 0.05,
            },
        );
        m.insert(
            Sensor::Ph,
            SeriesSpec {
                signal: diurnal(8.0, 0.25, 3_600.0),
                noise_sd: 0.02,
            },
        );
        m.insert(
            Sensor::Ec,
            SeriesSpec {
                signal: SignalSpec::RandomWalk {
                    start: 40.0,
                    step_sd: 0.4,
                    min: 20.0,
                    max: 60.0,
                    step_s: default_walk_step(),
                },
                noise_sd: 0.2,
            },
        );
        m.insert(
            Sensor::DissolvedOxygen,
            SeriesSpec {
                signal: diurnal(8.0, 2.5, 7_200.0),
                noise_sd: 0.05,
            },
        );
        m.insert(
            Sensor::Turbidity,
            SeriesSpec {
                signal: SignalSpec::RandomWalk {
                    start: 25.0,
                    step_sd: 2.0,
                    min: 0.0,
                    max: 400.0,
                    step_s: default_walk_step(),
                },
                noise_sd: 1.0,
            },
        );
        m.insert(
            Sensor::LiquidLevel,
            SeriesSpec {
                signal: SignalSpec::Constant { value: 1.0 },
                noise_sd: 0.0,
            },
        );
        Self(m)
    }
}

impl EnvironmentSpec {
    /// Every measured sensor has an entry; missing ones fall back to defaults.
    pub fn completed(&self) -> Self {
        let mut full = Self::default();
        for (k, v) in &self.0 {
            full.0.insert(*k, v.clone());
        }
        full
    }
}

#[derive(Debug, Clone)]
enum Generator {
    Constant(f64),
    Diurnal {
        mean: f64,
        amplitude: f64,
        period_s: f64,
        phase_s: f64,
    },
    Walk {
        knots: Vec<f64>,
        step_sd: f64,
        min: f64,
        max: f64,
        step_s: f64,
        rng: Box<ChaCha8Rng>,
    },
}

impl Generator {
    fn value(&mut self, t: f64) -> f64 {
        match self {
            Generator::Constant(v) => *v,
            Generator::Diurnal {
                mean,
                amplitude,
                period_s,
                phase_s,
            } => *mean + *amplitude * (TAU * (t - *phase_s) / *period_s).sin(),
            Generator::Walk {
                knots,
                step_sd,
                min,
                max,
                step_s,
                rng,
            } => {
                let pos = (t.max(0.0)) / *step_s;
                let i = pos.floor() as usize;
                while knots.len() <= i + 1 {
                    let last = *knots.last().expect("walk starts with one knot");
                    let step = if *step_sd > 0.0 {
                        Normal::new(0.0, *step_sd).expect("sd checked").sample(rng)
                    } else {
                        0.0
                    };
                    knots.push((last + step).clamp(*min, *max));
                }
                let frac = pos - i as f64;
                knots[i] + (knots[i + 1] - knots[i]) * frac
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Channel {
    generator: Generator,
    noise: Option<Normal<f64>>,
}

/// Seeded environment for one node.
#[derive(Debug, Clone)]
pub struct EnvironmentModel {
    channels: BTreeMap<Sensor, Channel>,
    noise_rng: ChaCha8Rng,
}

impl EnvironmentModel {
    pub fn new(spec: &EnvironmentSpec, seed: u64) -> Self {
        let mut channels = BTreeMap::new();
        for (i, (sensor, s)) in spec.completed().0.into_iter().enumerate() {
            let generator = match s.signal {
                SignalSpec::Constant { value } => Generator::Constant(value),
                SignalSpec::Diurnal {
                    mean,
                    amplitude,
                    period_s,
                    phase_s,
                } => Generator::Diurnal {
                    mean,
                    amplitude,
                    period_s,
                    phase_s,
                },
                SignalSpec::RandomWalk {
                    start,
                    step_sd,
                    min,
                    max,
                    step_s,
                } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(1 + i as u64);
                    Generator::Walk {
                        knots: vec![start.clamp(min, max)],
                        step_sd,
                        min,
                        max,
                        step_s,
                        rng: Box::new(rng),
                    }
                }
            };
            let noise = (s.noise_sd > 0.0).then(|| Normal::new(0.0, s.noise_sd).expect("sd >= 0"));
            channels.insert(sensor, Channel { generator, noise });
        }
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(0);
        Self { channels, noise_rng }
    }
}

impl Environment for EnvironmentModel {
    fn truth(&mut self, sensor: Sensor, t: f64) -> f64 {
        self.channels
            .get_mut(&sensor)
            .map(|c| c.generator.value(t))
            .unwrap_or(0.0)
    }

    fn sample(&mut self, sensor: Sensor, t: f64) -> f64 {
        let Some(c) = self.channels.get_mut(&sensor) else {
            return 0.0;
        };
        let v = c.generator.value(t);
        match &c.noise {
            Some(n) => v + n.sample(&mut self.noise_rng),
            None => v,
        }
    }
}

/// Draws a uniform value in `[lo, hi)`; returns `lo` when the range is empty.
pub(crate) fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}
