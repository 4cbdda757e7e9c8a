//! The virtual sensor node.
//!
//! A node sleeps in standby until its RTC wakes it, then runs one
//! acquisition cycle: three sensor groups, each powered through latching
//! relays, stabilised and read over a 5.12 s window, followed by a 2 s LoRa
//! transmission and standby until the next wake.
//!
//! Relay choreography per cycle (all relays reset again in standby):
//!
//! ```text
//! group A  pH / turbidity   K1 set (pH power) .. K2 set (route pH, power TB) .. read .. reset K1 K2
//! group B  DO / level       K3 set (DO power) .. K2 set (route DO, power LV) .. read .. reset K2 K3
//! group C  EC / temperature K1 + K3 set (EC power and route) ............... read .. reset K1 K3
//! ```

pub mod energy;
pub mod environment;
pub mod sensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

pub use energy::{
    energy_report, phase_energy, Basis, BatteryPack, EnergyError, EnergyLedger, EnergyReport, Phase,
    PhaseName, PhaseProfile, ProfileKind,
};
pub use environment::{Environment, EnvironmentModel, EnvironmentSpec, SeriesSpec, SignalSpec};
pub use sensor::{read_sensor, Calibration, CalibrationTable, Sensor};

use crate::channel::{encode_sampleset, ChannelMap, SampleSet};
use crate::event::{EventKind, PhaseEvent};
use crate::lpp::{Command, GpsPosition};
use crate::time::{SimDuration, SimTime};

/// Hard cap on one GPS search.
pub const GPS_MAX_SEARCH: SimDuration = SimDuration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relay {
    K1,
    K2,
    K3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Relays {
    pub k1: bool,
    pub k2: bool,
    pub k3: bool,
}

impl Relays {
    fn slot(&mut self, r: Relay) -> &mut bool {
        match r {
            Relay::K1 => &mut self.k1,
            Relay::K2 => &mut self.k2,
            Relay::K3 => &mut self.k3,
        }
    }

    pub fn all_reset(&self) -> bool {
        !(self.k1 || self.k2 || self.k3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodePhase {
    Idle,
    Active(PhaseName),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GpsState {
    Off,
    Searching {
        started_at: SimTime,
        /// `None` when the receiver will never get a fix.
        time_to_fix: Option<SimDuration>,
    },
    FixPending(GpsPosition),
}

/// Distribution of the receiver's time to first fix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeToFix {
    Uniform { min_s: f64, max_s: f64 },
    Fixed { secs: f64 },
    Never,
}

impl Default for TimeToFix {
    fn default() -> Self {
        TimeToFix::Uniform {
            min_s: 30.0,
            max_s: 300.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpsConfig {
    /// Receiver draw while searching. Not measured on the bench; an assumption.
    pub searching_current_ma: f64,
    pub time_to_fix: TimeToFix,
    /// Each fix is offset from the true position by up to this many degrees per axis.
    pub error_deg: f64,
    pub altitude_m: f64,
}

impl Default for GpsConfig {
    fn default() -> Self {
        Self {
            searching_current_ma: 40.0,
            time_to_fix: TimeToFix::default(),
            error_deg: 0.0,
            altitude_m: 0.0,
        }
    }
}

/// Static description of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub device_id: String,
    pub lat: f64,
    pub lon: f64,
    pub sampling_period: SimDuration,
    pub profile: ProfileKind,
    pub calibration: CalibrationTable,
    pub pack: BatteryPack,
    pub gps: GpsConfig,
    pub seed: u64,
}

impl NodeConfig {
    pub fn new(device_id: impl Into<String>, lat: f64, lon: f64) -> Self {
        Self {
            device_id: device_id.into(),
            lat,
            lon,
            sampling_period: SimDuration::from_secs(600),
            profile: ProfileKind::Regulator,
            calibration: CalibrationTable::default(),
            pack: BatteryPack::default(),
            gps: GpsConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NodeError {
    #[error("node {device_id} is not idle at {at} (phase {phase:?}, next wake {deadline})")]
    NotIdle {
        device_id: String,
        at: SimTime,
        phase: NodePhase,
        deadline: SimTime,
    },
    #[error("sampling period {0} is shorter than the active part of the cycle")]
    PeriodTooShort(SimDuration),
}

/// Everything one acquisition cycle produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutput {
    pub samples: SampleSet,
    pub payload: Vec<u8>,
    pub events: Vec<PhaseEvent>,
    pub fcnt: u32,
    pub tx_start: SimTime,
    pub tx_end: SimTime,
    pub cycle_end: SimTime,
    pub ledger: EnergyLedger,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub device_id: String,
    pub position: (f64, f64),
    pub phase: NodePhase,
    /// End of the current phase; in standby, the next RTC wake.
    pub phase_deadline: SimTime,
    pub calibration: CalibrationTable,
    pub sampling_period: SimDuration,
    pub gps: GpsState,
    /// Consumption of the acquisition cycles.
    pub ledger: EnergyLedger,
    /// Consumption of the GPS receiver, kept apart from the cycle ledger.
    pub gps_ledger: EnergyLedger,
    pub relays: Relays,
    pub profile: PhaseProfile,
    pub pack: BatteryPack,
    pub gps_config: GpsConfig,
    pub fcnt: u32,
    pub cycles: u64,
    pub last_samples: Option<SampleSet>,
    channel_map: ChannelMap,
    rng: ChaCha8Rng,
}

impl NodeState {
    pub fn new(cfg: &NodeConfig) -> Result<Self, NodeError> {
        let profile = PhaseProfile::of_kind(cfg.profile)
            .with_period(cfg.sampling_period)
            .ok_or(NodeError::PeriodTooShort(cfg.sampling_period))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        Ok(Self {
            device_id: cfg.device_id.clone(),
            position: (cfg.lat, cfg.lon),
            phase: NodePhase::Idle,
            phase_deadline: SimTime::ZERO,
            calibration: cfg.calibration.clone(),
            sampling_period: cfg.sampling_period,
            gps: GpsState::Off,
            ledger: EnergyLedger::default(),
            gps_ledger: EnergyLedger::default(),
            relays: Relays::default(),
            profile,
            pack: cfg.pack,
            gps_config: cfg.gps,
            fcnt: 0,
            cycles: 0,
            last_samples: None,
            channel_map: ChannelMap::default(),
            rng,
        })
    }

    /// RTC interrupt: leave standby once the period has elapsed.
    pub fn rtc_wake(&mut self, t: SimTime) -> bool {
        if self.phase == NodePhase::Active(PhaseName::Standby) && t >= self.phase_deadline {
            self.phase = NodePhase::Idle;
        }
        self.phase == NodePhase::Idle
    }

    /// Runs one full acquisition cycle starting at `t0`.
    pub fn run_cycle<E: Environment + ?Sized>(
        &mut self,
        env: &mut E,
        t0: SimTime,
    ) -> Result<CycleOutput, NodeError> {
        if !self.rtc_wake(t0) {
            return Err(NodeError::NotIdle {
                device_id: self.device_id.clone(),
                at: t0,
                phase: self.phase,
                deadline: self.phase_deadline,
            });
        }
        let mut c = CycleRun {
            node: self,
            events: Vec::with_capacity(24),
            ledger: EnergyLedger::default(),
            t: t0,
        };
        c.emit(t0, EventKind::Wake);

        let gps = match c.node.gps {
            GpsState::FixPending(p) => {
                c.node.gps = GpsState::Off;
                c.emit(t0, EventKind::GpsAttached { position: p });
                Some(p)
            }
            _ => None,
        };

        // group A
        c.relay(Relay::K1, true);
        c.phase(PhaseName::PhStabilize);
        c.relay(Relay::K2, true);
        c.phase(PhaseName::PhPlusTb);
        let read_a = c.phase(PhaseName::AnalogReadA);
        let ph = c.read(env, Sensor::Ph, read_a);
        let turbidity = c.read(env, Sensor::Turbidity, read_a);
        c.relay(Relay::K1, false);
        c.relay(Relay::K2, false);

        // group B
        c.relay(Relay::K3, true);
        c.phase(PhaseName::DoStabilize);
        c.relay(Relay::K2, true);
        c.phase(PhaseName::DoPlusLv);
        let read_b = c.phase(PhaseName::AnalogReadB);
        let do_mgl = c.read(env, Sensor::DissolvedOxygen, read_b);
        let level = c.read(env, Sensor::LiquidLevel, read_b);
        c.relay(Relay::K2, false);
        c.relay(Relay::K3, false);

        // group C
        c.relay(Relay::K1, true);
        c.relay(Relay::K3, true);
        c.phase(PhaseName::EcStabilize);
        let read_c = c.phase(PhaseName::AnalogReadC);
        let ec = c.read(env, Sensor::Ec, read_c);
        let temperature_c = c.read(env, Sensor::Temperature, read_c);
        c.relay(Relay::K1, false);
        c.relay(Relay::K3, false);

        let samples = saturate(SampleSet {
            ph,
            ec,
            turbidity,
            do_mgl,
            liquid_level: level >= 0.5,
            temperature_c,
            gps,
        });
        let payload =
            encode_sampleset(&samples, &c.node.channel_map).expect("saturated sample set always encodes");

        let (tx_start, tx_len) = c.phase(PhaseName::LoRaTx);
        let tx_end = tx_start + tx_len;
        let fcnt = c.node.fcnt;
        c.node.fcnt = c.node.fcnt.wrapping_add(1);
        c.emit(
            tx_start,
            EventKind::UplinkSent {
                fcnt,
                bytes: payload.len(),
            },
        );

        c.phase(PhaseName::Standby);
        debug_assert!(c.node.relays.all_reset());
        let cycle_end = c.t;
        let CycleRun {
            node, events, ledger, ..
        } = c;
        node.phase = NodePhase::Active(PhaseName::Standby);
        node.phase_deadline = cycle_end;
        node.ledger = node.ledger.plus(&ledger);
        node.cycles += 1;
        node.last_samples = Some(samples);
        debug!(device = %node.device_id, %t0, fcnt, "cycle complete");
        Ok(CycleOutput {
            samples,
            payload,
            events,
            fcnt,
            tx_start,
            tx_end,
            cycle_end,
            ledger,
        })
    }

    /// Applies a command received in the post-uplink receive window.
    pub fn handle_downlink(&mut self, cmd: &Command, t: SimTime) -> Option<PhaseEvent> {
        match cmd {
            Command::ActivateGps => match self.gps {
                GpsState::Off => {
                    let time_to_fix = self.draw_time_to_fix();
                    self.gps = GpsState::Searching {
                        started_at: t,
                        time_to_fix,
                    };
                    Some(PhaseEvent::new(
                        &self.device_id,
                        t,
                        EventKind::GpsSearching { time_to_fix },
                    ))
                }
                // already searching, or a fix is waiting for the next uplink
                GpsState::Searching { .. } | GpsState::FixPending(_) => None,
            },
            Command::Unknown(text) => Some(PhaseEvent::new(
                &self.device_id,
                t,
                EventKind::CommandIgnored { text: text.clone() },
            )),
        }
    }

    /// When the running GPS search will next change state.
    pub fn gps_deadline(&self) -> Option<SimTime> {
        match self.gps {
            GpsState::Searching {
                started_at,
                time_to_fix,
            } => Some(
                started_at
                    + match time_to_fix {
                        Some(tau) => tau.min(GPS_MAX_SEARCH),
                        None => GPS_MAX_SEARCH,
                    },
            ),
            _ => None,
        }
    }

    /// Advances the GPS receiver to time `t`.
    pub fn step_gps(&mut self, t: SimTime) -> Option<PhaseEvent> {
        let GpsState::Searching {
            started_at,
            time_to_fix,
        } = self.gps
        else {
            return None;
        };
        let elapsed = t.since(started_at);
        match time_to_fix {
            Some(tau) if tau <= GPS_MAX_SEARCH && elapsed >= tau => {
                self.charge_gps(tau);
                let position = self.gps_fix_position();
                self.gps = GpsState::FixPending(position);
                Some(PhaseEvent::new(
                    &self.device_id,
                    started_at + tau,
                    EventKind::GpsFix { position },
                ))
            }
            _ if elapsed >= GPS_MAX_SEARCH => {
                self.charge_gps(GPS_MAX_SEARCH);
                self.gps = GpsState::Off;
                Some(PhaseEvent::new(
                    &self.device_id,
                    started_at + GPS_MAX_SEARCH,
                    EventKind::NoFix,
                ))
            }
            _ => None,
        }
    }

    /// Overrides the drawn time to fix of a running search.
    pub fn set_time_to_fix(&mut self, tau: Option<SimDuration>) {
        if let GpsState::Searching { time_to_fix, .. } = &mut self.gps {
            *time_to_fix = tau;
        }
    }

    /// Battery left, capacity basis, counting cycle and GPS consumption.
    pub fn battery_remaining_pct(&self) -> f64 {
        let used = self.ledger.plus(&self.gps_ledger).charge_mah();
        (100.0 * (1.0 - used / self.pack.pack_capacity_mah())).clamp(0.0, 100.0)
    }

    fn draw_time_to_fix(&mut self) -> Option<SimDuration> {
        match self.gps_config.time_to_fix {
            TimeToFix::Never => None,
            TimeToFix::Fixed { secs } => Some(SimDuration::from_secs_f64(secs)),
            TimeToFix::Uniform { min_s, max_s } => Some(SimDuration::from_secs_f64(environment::uniform(
                &mut self.rng,
                min_s,
                max_s,
            ))),
        }
    }

    fn gps_fix_position(&mut self) -> GpsPosition {
        let e = self.gps_config.error_deg.abs();
        let (lat, lon) = self.position;
        let dlat = environment::uniform(&mut self.rng, -e, e);
        let dlon = environment::uniform(&mut self.rng, -e, e);
        GpsPosition {
            lat: (lat + dlat).clamp(-90.0, 90.0),
            lon: (lon + dlon).clamp(-180.0, 180.0),
            alt: self.gps_config.altitude_m,
        }
    }

    fn charge_gps(&mut self, d: SimDuration) {
        let ua = (self.gps_config.searching_current_ma * 1000.0).round().max(0.0) as u32;
        self.gps_ledger.record(d, ua, self.profile.supply_mv);
    }
}

struct CycleRun<'a> {
    node: &'a mut NodeState,
    events: Vec<PhaseEvent>,
    ledger: EnergyLedger,
    t: SimTime,
}

impl CycleRun<'_> {
    fn emit(&mut self, at: SimTime, kind: EventKind) {
        self.events.push(PhaseEvent::new(&self.node.device_id, at, kind));
    }

    fn relay(&mut self, r: Relay, set: bool) {
        *self.node.relays.slot(r) = set;
        let kind = if set {
            EventKind::RelaySet { relay: r }
        } else {
            EventKind::RelayReset { relay: r }
        };
        self.emit(self.t, kind);
    }

    /// Enters `name`, charges it to the ledger and returns its window.
    fn phase(&mut self, name: PhaseName) -> (SimTime, SimDuration) {
        let p = *self.node.profile.phase(name);
        let start = self.t;
        let until = start + p.duration;
        self.node.phase = NodePhase::Active(name);
        self.node.phase_deadline = until;
        self.emit(start, EventKind::PhaseStarted { phase: name, until });
        self.ledger
            .record(p.duration, p.current_ua, self.node.profile.supply_mv);
        self.t = until;
        (start, p.duration)
    }

    fn read<E: Environment + ?Sized>(
        &mut self,
        env: &mut E,
        sensor: Sensor,
        (start, len): (SimTime, SimDuration),
    ) -> f64 {
        let cal = self.node.calibration.get(sensor);
        read_sensor(sensor, env, cal, start, len)
    }
}

/// Clamps readings into what the payload types can carry.
fn saturate(s: SampleSet) -> SampleSet {
    let analog = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-327.68, 327.67) };
    SampleSet {
        ph: analog(s.ph),
        ec: analog(s.ec),
        turbidity: if s.turbidity.is_nan() {
            0.0
        } else {
            s.turbidity.clamp(-32_768.0, 32_767.0)
        },
        do_mgl: analog(s.do_mgl),
        liquid_level: s.liquid_level,
        temperature_c: if s.temperature_c.is_nan() {
            0.0
        } else {
            s.temperature_c.clamp(-3_276.8, 3_276.7)
        },
        gps: s.gps,
    }
}
