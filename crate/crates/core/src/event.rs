//! Simulation event log entries.

use serde::{Deserialize, Serialize};

use crate::lpp::GpsPosition;
use crate::node::{PhaseName, Relay};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub device_id: String,
    pub at: SimTime,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Wake,
    PhaseStarted {
        phase: PhaseName,
        until: SimTime,
    },
    RelaySet {
        relay: Relay,
    },
    RelayReset {
        relay: Relay,
    },
    UplinkSent {
        fcnt: u32,
        bytes: usize,
    },
    UplinkDelivered {
        fcnt: u32,
        gateways: Vec<String>,
    },
    UplinkDropped {
        fcnt: u32,
    },
    DownlinkDelivered {
        id: u64,
        fport: u16,
        payload_b64: String,
    },
    CommandIgnored {
        text: String,
    },
    GpsSearching {
        time_to_fix: Option<SimDuration>,
    },
    GpsFix {
        position: GpsPosition,
    },
    NoFix,
    GpsAttached {
        position: GpsPosition,
    },
}

impl PhaseEvent {
    pub fn new(device_id: &str, at: SimTime, kind: EventKind) -> Self {
        Self {
            device_id: device_id.to_string(),
            at,
            kind,
        }
    }
}
