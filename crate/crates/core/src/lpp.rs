//! CayenneLPP record codec and the base64 downlink command protocol.
//!
//! Each record on the wire is `[channel][type][data...]` with big-endian,
//! two's-complement data. Only the four types used by the node are
//! supported:
//!
//! | type          | byte   | data bytes | scaling                      |
//! |---------------|--------|------------|------------------------------|
//! | digital input | `0x00` | 1          | raw `u8`                     |
//! | analog input  | `0x02` | 2          | value × 100, signed          |
//! | temperature   | `0x67` | 2          | °C × 10, signed              |
//! | GPS           | `0x88` | 9          | lat, lon × 10⁴; alt × 100    |
//!
//! Decoding is strict: truncated records, unknown type bytes, trailing
//! bytes and repeated channels all reject the whole payload.

use std::collections::HashSet;
use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TYPE_DIGITAL_INPUT: u8 = 0x00;
pub const TYPE_ANALOG_INPUT: u8 = 0x02;
pub const TYPE_TEMPERATURE: u8 = 0x67;
pub const TYPE_GPS: u8 = 0x88;

/// Largest FPort an application may use.
pub const MAX_APP_FPORT: u8 = 223;

/// The record types this codec understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LppKind {
    DigitalInput,
    AnalogInput,
    Temperature,
    Gps,
}

impl LppKind {
    pub fn type_byte(self) -> u8 {
        match self {
            LppKind::DigitalInput => TYPE_DIGITAL_INPUT,
            LppKind::AnalogInput => TYPE_ANALOG_INPUT,
            LppKind::Temperature => TYPE_TEMPERATURE,
            LppKind::Gps => TYPE_GPS,
        }
    }

    pub fn from_type_byte(byte: u8) -> Option<Self> {
        match byte {
            TYPE_DIGITAL_INPUT => Some(LppKind::DigitalInput),
            TYPE_ANALOG_INPUT => Some(LppKind::AnalogInput),
            TYPE_TEMPERATURE => Some(LppKind::Temperature),
            TYPE_GPS => Some(LppKind::Gps),
            _ => None,
        }
    }

    /// Number of data bytes following the type byte.
    pub fn data_len(self) -> usize {
        match self {
            LppKind::DigitalInput => 1,
            LppKind::AnalogInput | LppKind::Temperature => 2,
            LppKind::Gps => 9,
        }
    }

    /// Total encoded size of one record of this kind.
    pub fn record_len(self) -> usize {
        2 + self.data_len()
    }
}

/// A position fix as carried by a GPS record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsPosition {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LppValue {
    DigitalInput(u8),
    AnalogInput(f64),
    Temperature(f64),
    Gps(GpsPosition),
}

impl LppValue {
    pub fn kind(&self) -> LppKind {
        match self {
            LppValue::DigitalInput(_) => LppKind::DigitalInput,
            LppValue::AnalogInput(_) => LppKind::AnalogInput,
            LppValue::Temperature(_) => LppKind::Temperature,
            LppValue::Gps(_) => LppKind::Gps,
        }
    }
}

/// One channel/type/value unit of a payload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LppRecord {
    pub channel: u8,
    pub value: LppValue,
}

impl LppRecord {
    pub fn new(channel: u8, value: LppValue) -> Self {
        Self { channel, value }
    }

    pub fn kind(&self) -> LppKind {
        self.value.kind()
    }

    /// The record as it will read back after a trip over the wire.
    pub fn quantized(&self) -> Result<LppRecord, LppError> {
        let mut buf = Vec::with_capacity(self.kind().record_len());
        encode_record_into(self, &mut buf)?;
        let (rec, _) = decode_one(&buf, 0).expect("freshly encoded record decodes");
        Ok(rec)
    }
}

impl fmt::Display for LppRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value {
            LppValue::DigitalInput(v) => write!(f, "ch{} digital_input={}", self.channel, v),
            LppValue::AnalogInput(v) => write!(f, "ch{} analog_input={:.2}", self.channel, v),
            LppValue::Temperature(v) => write!(f, "ch{} temperature={:.1}", self.channel, v),
            LppValue::Gps(p) => write!(
                f,
                "ch{} gps=({:.4}, {:.4}, {:.2})",
                self.channel, p.lat, p.lon, p.alt
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LppError {
    #[error("channel {channel}: {kind:?} value {value} is outside the representable range")]
    Range { channel: u8, kind: LppKind, value: f64 },
    #[error("channel {0} appears more than once in the payload")]
    DuplicateChannel(u8),
    #[error(transparent)]
    Malformed(#[from] MalformedPayload),
}

/// Why a byte sequence could not be parsed as a payload.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MalformedPayload {
    #[error("truncated {kind:?} record at offset {offset}: need {needed} bytes, {available} left")]
    Truncated {
        offset: usize,
        kind: LppKind,
        needed: usize,
        available: usize,
    },
    #[error("unknown type byte 0x{type_byte:02X} at offset {offset}")]
    UnknownType { offset: usize, type_byte: u8 },
    #[error("{count} trailing byte(s) at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("channel {channel} repeated at offset {offset}")]
    DuplicateChannel { offset: usize, channel: u8 },
}

/// Encodes a single record.
pub fn encode_record(record: &LppRecord) -> Result<Vec<u8>, LppError> {
    let mut out = Vec::with_capacity(record.kind().record_len());
    encode_record_into(record, &mut out)?;
    Ok(out)
}

/// Encodes records in the given order, rejecting repeated channels.
pub fn encode_payload(records: &[LppRecord]) -> Result<Vec<u8>, LppError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.iter().map(|r| r.kind().record_len()).sum());
    for r in records {
        if !seen.insert(r.channel) {
            return Err(LppError::DuplicateChannel(r.channel));
        }
        encode_record_into(r, &mut out)?;
    }
    Ok(out)
}

fn encode_record_into(record: &LppRecord, out: &mut Vec<u8>) -> Result<(), LppError> {
    let ch = record.channel;
    let range_err = |value: f64| LppError::Range {
        channel: ch,
        kind: record.kind(),
        value,
    };
    out.push(ch);
    out.push(record.kind().type_byte());
    match record.value {
        LppValue::DigitalInput(v) => out.push(v),
        LppValue::AnalogInput(v) => {
            let raw = scale_i16(v, 100.0).ok_or_else(|| range_err(v))?;
            out.extend_from_slice(&raw.to_be_bytes());
        }
        LppValue::Temperature(v) => {
            let raw = scale_i16(v, 10.0).ok_or_else(|| range_err(v))?;
            out.extend_from_slice(&raw.to_be_bytes());
        }
        LppValue::Gps(p) => {
            if !(-90.0..=90.0).contains(&p.lat) {
                return Err(range_err(p.lat));
            }
            if !(-180.0..=180.0).contains(&p.lon) {
                return Err(range_err(p.lon));
            }
            let lat = scale_i24(p.lat, 10_000.0).ok_or_else(|| range_err(p.lat))?;
            let lon = scale_i24(p.lon, 10_000.0).ok_or_else(|| range_err(p.lon))?;
            let alt = scale_i24(p.alt, 100.0).ok_or_else(|| range_err(p.alt))?;
            for v in [lat, lon, alt] {
                out.extend_from_slice(&v.to_be_bytes()[1..]);
            }
        }
    }
    Ok(())
}

fn scale_i16(value: f64, factor: f64) -> Option<i16> {
    let scaled = (value * factor).round();
    if scaled.is_finite() && scaled >= i16::MIN as f64 && scaled <= i16::MAX as f64 {
        Some(scaled as i16)
    } else {
        None
    }
}

const I24_MIN: f64 = -8_388_608.0;
const I24_MAX: f64 = 8_388_607.0;

fn scale_i24(value: f64, factor: f64) -> Option<i32> {
    let scaled = (value * factor).round();
    if scaled.is_finite() && (I24_MIN..=I24_MAX).contains(&scaled) {
        Some(scaled as i32)
    } else {
        None
    }
}

fn read_i24(b: &[u8]) -> i32 {
    // sign-extend through the top byte
    i32::from_be_bytes([b[0], b[1], b[2], 0]) >> 8
}

/// Parses a whole payload. Every byte must belong to a record.
pub fn decode_payload(bytes: &[u8]) -> Result<Vec<LppRecord>, MalformedPayload> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let (rec, used) = decode_one(bytes, offset)?;
        if !seen.insert(rec.channel) {
            return Err(MalformedPayload::DuplicateChannel {
                offset,
                channel: rec.channel,
            });
        }
        records.push(rec);
        offset += used;
    }
    Ok(records)
}

fn decode_one(bytes: &[u8], offset: usize) -> Result<(LppRecord, usize), MalformedPayload> {
    let rest = &bytes[offset..];
    if rest.len() < 2 {
        return Err(MalformedPayload::TrailingBytes {
            offset,
            count: rest.len(),
        });
    }
    let channel = rest[0];
    let kind = LppKind::from_type_byte(rest[1]).ok_or(MalformedPayload::UnknownType {
        offset: offset + 1,
        type_byte: rest[1],
    })?;
    let data = &rest[2..];
    if data.len() < kind.data_len() {
        return Err(MalformedPayload::Truncated {
            offset,
            kind,
            needed: kind.record_len(),
            available: rest.len(),
        });
    }
    let value = match kind {
        LppKind::DigitalInput => LppValue::DigitalInput(data[0]),
        LppKind::AnalogInput => LppValue::AnalogInput(i16::from_be_bytes([data[0], data[1]]) as f64 / 100.0),
        LppKind::Temperature => LppValue::Temperature(i16::from_be_bytes([data[0], data[1]]) as f64 / 10.0),
        LppKind::Gps => LppValue::Gps(GpsPosition {
            lat: read_i24(&data[0..3]) as f64 / 10_000.0,
            lon: read_i24(&data[3..6]) as f64 / 10_000.0,
            alt: read_i24(&data[6..9]) as f64 / 100.0,
        }),
    };
    Ok((LppRecord { channel, value }, kind.record_len()))
}

/// A command decoded from a downlink.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    ActivateGps,
    Unknown(String),
}

pub const GPS_COMMAND: &str = "gps";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DownlinkError {
    #[error("invalid base64 payload: {0}")]
    Base64(String),
    #[error("fport {0} is outside the application range 1..=223")]
    InvalidFPort(u16),
}

/// Decodes an application downlink: base64 text to a node command.
pub fn decode_downlink(fport: u16, payload_b64: &str) -> Result<Command, DownlinkError> {
    if !(1..=MAX_APP_FPORT as u16).contains(&fport) {
        return Err(DownlinkError::InvalidFPort(fport));
    }
    let raw = decode_base64(payload_b64).map_err(DownlinkError::Base64)?;
    let text = String::from_utf8_lossy(&raw);
    if text == GPS_COMMAND {
        Ok(Command::ActivateGps)
    } else {
        Ok(Command::Unknown(text.into_owned()))
    }
}

pub fn encode_base64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn decode_base64(text: &str) -> Result<Vec<u8>, String> {
    STANDARD.decode(text).map_err(|e| e.to_string())
}
