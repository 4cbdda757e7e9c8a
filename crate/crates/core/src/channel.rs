//! Fixed mapping between node measurements and payload channels.
//!
//! | ch | type          | quantity                          |
//! |----|---------------|-----------------------------------|
//! | 1  | analog input  | pH                                |
//! | 2  | analog input  | EC, mS/cm                         |
//! | 3  | analog input  | turbidity, NTU ÷ 100 on the wire  |
//! | 4  | analog input  | dissolved oxygen, mg/L            |
//! | 5  | digital input | liquid level, 0/1                 |
//! | 6  | temperature   | water temperature, °C             |
//! | 7  | GPS           | position (only after a fix)       |
//!
//! Turbidity is divided by 100 before encoding because an analog input
//! record saturates at 327.67 and lagoon turbidity can go well past that.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lpp::{self, GpsPosition, LppError, LppKind, LppRecord, LppValue};

/// One periodic reading of every sensor, after calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub ph: f64,
    /// mS/cm
    pub ec: f64,
    /// NTU
    pub turbidity: f64,
    /// mg/L
    pub do_mgl: f64,
    pub liquid_level: bool,
    pub temperature_c: f64,
    pub gps: Option<GpsPosition>,
}

/// Measured quantities carried in a payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Field {
    Ph,
    Ec,
    Turbidity,
    DissolvedOxygen,
    LiquidLevel,
    Temperature,
    Gps,
}

/// Names of the stored time series. GPS fixes expand into three series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Series {
    Ph,
    Ec,
    Turbidity,
    Do,
    LiquidLevel,
    Temperature,
    GpsLat,
    GpsLon,
    GpsAlt,
}

impl Series {
    pub const ALL: [Series; 9] = [
        Series::Ph,
        Series::Ec,
        Series::Turbidity,
        Series::Do,
        Series::LiquidLevel,
        Series::Temperature,
        Series::GpsLat,
        Series::GpsLon,
        Series::GpsAlt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Series::Ph => "ph",
            Series::Ec => "ec",
            Series::Turbidity => "turbidity",
            Series::Do => "do",
            Series::LiquidLevel => "liquid_level",
            Series::Temperature => "temperature",
            Series::GpsLat => "gps_lat",
            Series::GpsLon => "gps_lon",
            Series::GpsAlt => "gps_alt",
        }
    }
}

impl fmt::Display for Series {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown series `{0}`")]
pub struct UnknownSeries(pub String);

impl FromStr for Series {
    type Err = UnknownSeries;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Series::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| UnknownSeries(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelEntry {
    pub channel: u8,
    pub kind: LppKind,
    pub field: Field,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("channel {0} is not assigned")]
    UnassignedChannel(u8),
    #[error("channel {channel} carries {found:?}, expected {expected:?}")]
    KindMismatch {
        channel: u8,
        expected: LppKind,
        found: LppKind,
    },
    #[error("periodic fields missing from payload: {0:?}")]
    MissingFields(Vec<Field>),
}

/// Wire value = engineering value ÷ this factor.
pub const TURBIDITY_WIRE_DIVISOR: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMap {
    entries: [ChannelEntry; 7],
}

impl Default for ChannelMap {
    fn default() -> Self {
        use Field::*;
        let e = |channel, kind, field| ChannelEntry { channel, kind, field };
        Self {
            entries: [
                e(1, LppKind::AnalogInput, Ph),
                e(2, LppKind::AnalogInput, Ec),
                e(3, LppKind::AnalogInput, Turbidity),
                e(4, LppKind::AnalogInput, DissolvedOxygen),
                e(5, LppKind::DigitalInput, LiquidLevel),
                e(6, LppKind::Temperature, Temperature),
                e(7, LppKind::Gps, Gps),
            ],
        }
    }
}

impl ChannelMap {
    pub fn entries(&self) -> &[ChannelEntry] {
        &self.entries
    }

    pub fn channel_of(&self, field: Field) -> u8 {
        self.entries
            .iter()
            .find(|e| e.field == field)
            .map(|e| e.channel)
            .expect("every field has a channel")
    }

    pub fn entry_for_channel(&self, channel: u8) -> Option<&ChannelEntry> {
        self.entries.iter().find(|e| e.channel == channel)
    }

    /// Records for a sample set, in ascending channel order.
    pub fn records(&self, s: &SampleSet) -> Vec<LppRecord> {
        let mut out = Vec::with_capacity(7);
        for e in &self.entries {
            let value = match e.field {
                Field::Ph => LppValue::AnalogInput(s.ph),
                Field::Ec => LppValue::AnalogInput(s.ec),
                Field::Turbidity => LppValue::AnalogInput(s.turbidity / TURBIDITY_WIRE_DIVISOR),
                Field::DissolvedOxygen => LppValue::AnalogInput(s.do_mgl),
                Field::LiquidLevel => LppValue::DigitalInput(u8::from(s.liquid_level)),
                Field::Temperature => LppValue::Temperature(s.temperature_c),
                Field::Gps => match s.gps {
                    Some(p) => LppValue::Gps(p),
                    None => continue,
                },
            };
            out.push(LppRecord::new(e.channel, value));
        }
        out.sort_by_key(|r| r.channel);
        out
    }

    /// Converts decoded records to stored series values, expanding GPS.
    pub fn series_values(&self, records: &[LppRecord]) -> Result<Vec<(Series, f64)>, ChannelError> {
        let mut out = Vec::with_capacity(records.len() + 2);
        for r in records {
            let entry = self
                .entry_for_channel(r.channel)
                .ok_or(ChannelError::UnassignedChannel(r.channel))?;
            if entry.kind != r.kind() {
                return Err(ChannelError::KindMismatch {
                    channel: r.channel,
                    expected: entry.kind,
                    found: r.kind(),
                });
            }
            match (entry.field, r.value) {
                (Field::Ph, LppValue::AnalogInput(v)) => out.push((Series::Ph, v)),
                (Field::Ec, LppValue::AnalogInput(v)) => out.push((Series::Ec, v)),
                (Field::Turbidity, LppValue::AnalogInput(v)) => {
                    out.push((Series::Turbidity, v * TURBIDITY_WIRE_DIVISOR))
                }
                (Field::DissolvedOxygen, LppValue::AnalogInput(v)) => out.push((Series::Do, v)),
                (Field::LiquidLevel, LppValue::DigitalInput(v)) => {
                    out.push((Series::LiquidLevel, f64::from(v)))
                }
                (Field::Temperature, LppValue::Temperature(v)) => out.push((Series::Temperature, v)),
                (Field::Gps, LppValue::Gps(p)) => {
                    out.push((Series::GpsLat, p.lat));
                    out.push((Series::GpsLon, p.lon));
                    out.push((Series::GpsAlt, p.alt));
                }
                _ => unreachable!("kind checked against the channel entry"),
            }
        }
        Ok(out)
    }

    /// Rebuilds a sample set from decoded records. All periodic fields must be present.
    pub fn sampleset(&self, records: &[LppRecord]) -> Result<SampleSet, ChannelError> {
        let values = self.series_values(records)?;
        let get = |s: Series| values.iter().find(|(x, _)| *x == s).map(|(_, v)| *v);
        let mut missing = Vec::new();
        let mut need = |s: Series, f: Field| {
            let v = get(s);
            if v.is_none() {
                missing.push(f);
            }
            v.unwrap_or_default()
        };
        let set = SampleSet {
            ph: need(Series::Ph, Field::Ph),
            ec: need(Series::Ec, Field::Ec),
            turbidity: need(Series::Turbidity, Field::Turbidity),
            do_mgl: need(Series::Do, Field::DissolvedOxygen),
            liquid_level: need(Series::LiquidLevel, Field::LiquidLevel) != 0.0,
            temperature_c: need(Series::Temperature, Field::Temperature),
            gps: match (get(Series::GpsLat), get(Series::GpsLon), get(Series::GpsAlt)) {
                (Some(lat), Some(lon), Some(alt)) => Some(GpsPosition { lat, lon, alt }),
                _ => None,
            },
        };
        if missing.is_empty() {
            Ok(set)
        } else {
            Err(ChannelError::MissingFields(missing))
        }
    }
}

/// Encodes a sample set: channels 1..6, plus 7 when a fix is present.
pub fn encode_sampleset(s: &SampleSet, map: &ChannelMap) -> Result<Vec<u8>, LppError> {
    lpp::encode_payload(&map.records(s))
}

/// Renders decoded series as `key=value` pairs, one line.
pub fn cleartext(values: &[(Series, f64)]) -> String {
    values
        .iter()
        .map(|(s, v)| format!("{s}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}
