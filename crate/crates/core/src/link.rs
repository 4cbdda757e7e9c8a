//! Simulated LoRaWAN transport.
//!
//! Coverage is a binary disc around each gateway. Downlinks follow Class A
//! rules: a device can only receive right after one of its own uplinks, one
//! command per receive window, oldest first.

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lpp;
use crate::time::{SimDuration, SimTime};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_RANGE_KM: f64 = 15.0;
pub const DEFAULT_FPORT: u8 = 1;
/// Delay from the end of an uplink to its receive window.
pub const DEFAULT_RX_DELAY: SimDuration = SimDuration::from_secs(1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gateway {
    pub gateway_id: String,
    pub lat: f64,
    pub lon: f64,
    pub range_km: f64,
}

impl Gateway {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64, range_km: f64) -> Self {
        Self {
            gateway_id: id.into(),
            lat,
            lon,
            range_km,
        }
    }

    pub fn covers(&self, lat: f64, lon: f64) -> bool {
        haversine_km((self.lat, self.lon), (lat, lon)) <= self.range_km
    }
}

/// Great-circle distance in km between two (lat, lon) points in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UplinkFrame {
    pub device_id: String,
    pub fcnt: u32,
    pub fport: u8,
    pub payload: Vec<u8>,
    /// Transmitter position at send time.
    pub lat: f64,
    pub lon: f64,
    pub tx_start: SimTime,
    pub tx_end: SimTime,
    pub received_by: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeliveryResult {
    Delivered { received_by: Vec<String> },
    Dropped,
}

impl DeliveryResult {
    pub fn is_delivered(&self) -> bool {
        matches!(self, DeliveryResult::Delivered { .. })
    }
}

/// Marks the frame as heard by every gateway in range.
pub fn deliver_uplink(frame: &mut UplinkFrame, gateways: &[Gateway]) -> DeliveryResult {
    frame.received_by = gateways
        .iter()
        .filter(|g| g.covers(frame.lat, frame.lon))
        .map(|g| g.gateway_id.clone())
        .collect();
    if frame.received_by.is_empty() {
        DeliveryResult::Dropped
    } else {
        DeliveryResult::Delivered {
            received_by: frame.received_by.clone(),
        }
    }
}

/// Gateways plus the optional random frame loss.
#[derive(Debug, Clone)]
pub struct Radio {
    pub gateways: Vec<Gateway>,
    pub loss_probability: f64,
    rng: ChaCha8Rng,
}

impl Radio {
    pub fn new(gateways: Vec<Gateway>, loss_probability: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x11FE);
        Self {
            gateways,
            loss_probability,
            rng,
        }
    }

    pub fn transmit(&mut self, frame: &mut UplinkFrame) -> DeliveryResult {
        if self.loss_probability > 0.0 && self.rng.random::<f64>() < self.loss_probability {
            frame.received_by.clear();
            return DeliveryResult::Dropped;
        }
        deliver_uplink(frame, &self.gateways)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownlinkCommand {
    pub id: u64,
    pub device_id: String,
    pub fport: u16,
    pub payload_b64: String,
    pub enqueued_at: SimTime,
    pub delivered_at: Option<SimTime>,
}

#[derive(Debug, Clone, Default)]
pub struct DownlinkQueue {
    pending: VecDeque<DownlinkCommand>,
    delivered: Vec<DownlinkCommand>,
    next_id: u64,
}

impl DownlinkQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(
        &mut self,
        device_id: &str,
        fport: u16,
        payload_b64: &str,
        at: SimTime,
    ) -> DownlinkCommand {
        self.next_id += 1;
        let cmd = DownlinkCommand {
            id: self.next_id,
            device_id: device_id.to_string(),
            fport,
            payload_b64: payload_b64.to_string(),
            enqueued_at: at,
            delivered_at: None,
        };
        self.pending.push_back(cmd.clone());
        cmd
    }

    /// Delivers at most one command for `device_id`, the oldest, in the
    /// receive window that opens `rx_delay` after `uplink_end`.
    pub fn flush(
        &mut self,
        device_id: &str,
        uplink_end: SimTime,
        rx_delay: SimDuration,
    ) -> Vec<DownlinkCommand> {
        let Some(idx) = self.pending.iter().position(|c| c.device_id == device_id) else {
            return Vec::new();
        };
        let mut cmd = self.pending.remove(idx).expect("index from position");
        cmd.delivered_at = Some(uplink_end + rx_delay);
        self.delivered.push(cmd.clone());
        vec![cmd]
    }

    pub fn pending(&self) -> impl Iterator<Item = &DownlinkCommand> {
        self.pending.iter()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn delivered(&self) -> &[DownlinkCommand] {
        &self.delivered
    }
}

/// Free-function form of [`DownlinkQueue::flush`] with the default receive delay.
pub fn flush_downlinks(
    device_id: &str,
    uplink_end: SimTime,
    queue: &mut DownlinkQueue,
) -> Vec<DownlinkCommand> {
    queue.flush(device_id, uplink_end, DEFAULT_RX_DELAY)
}

/// Fraction of `[from, from + window)` spent transmitting.
pub fn duty_cycle(tx_log: &[(SimTime, SimTime)], from: SimTime, window: SimDuration) -> f64 {
    if window.0 == 0 {
        return 0.0;
    }
    let to = from + window;
    let on_air: u64 = tx_log
        .iter()
        .map(|&(s, e)| {
            let s = s.max(from);
            let e = e.min(to);
            e.0.saturating_sub(s.0)
        })
        .sum();
    on_air as f64 / window.0 as f64
}

/// What the network server hands to the application side: one copy per
/// frame, payload base64-encoded as it travels over the broker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UplinkMessage {
    pub device_id: String,
    pub fcnt: u32,
    pub fport: u8,
    pub payload_b64: String,
    pub received_by: Vec<String>,
}

/// Collapses the copies of a frame heard by several gateways.
#[derive(Debug, Clone, Default)]
pub struct NetworkServer {
    last_fcnt: HashMap<String, u32>,
    duplicates: u64,
}

impl NetworkServer {
    pub fn new() -> Self {
        Self::default()
    }

    /// One gateway's copy of a frame. Returns the message the first time a
    /// frame is seen, `None` for later copies.
    pub fn receive(&mut self, frame: &UplinkFrame, _gateway_id: &str) -> Option<UplinkMessage> {
        match self.last_fcnt.get(&frame.device_id) {
            Some(&last) if frame.fcnt <= last => {
                self.duplicates += 1;
                None
            }
            _ => {
                self.last_fcnt.insert(frame.device_id.clone(), frame.fcnt);
                Some(UplinkMessage {
                    device_id: frame.device_id.clone(),
                    fcnt: frame.fcnt,
                    fport: frame.fport,
                    payload_b64: lpp::encode_base64(&frame.payload),
                    received_by: frame.received_by.clone(),
                })
            }
        }
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_at(lat: f64, lon: f64) -> UplinkFrame {
        UplinkFrame {
            device_id: "node-1".into(),
            fcnt: 0,
            fport: DEFAULT_FPORT,
            payload: vec![1, 2, 0, 0],
            lat,
            lon,
            tx_start: SimTime(215_360),
            tx_end: SimTime(217_360),
            received_by: vec![],
        }
    }

    #[test]
    fn haversine_known_values() {
        assert_eq!(haversine_km((45.0, 12.0), (45.0, 12.0)), 0.0);
        // 0.01° of meridian: 6371 × 0.01 × π/180
        let arc = EARTH_RADIUS_KM * 0.01_f64.to_radians();
        let d = haversine_km((45.0, 12.0), (45.01, 12.0));
        assert!((d - arc).abs() < 1e-6);
        assert!((d - 1.112).abs() <= 0.001);
    }

    #[test]
    fn coverage_disc() {
        let gw = Gateway::new("gw", 45.0, 12.0, 15.0);
        // 5 km north
        let near = 45.0 + (5.0 / EARTH_RADIUS_KM).to_degrees();
        let far = 45.0 + (20.0 / EARTH_RADIUS_KM).to_degrees();
        let mut f = frame_at(near, 12.0);
        assert_eq!(
            deliver_uplink(&mut f, std::slice::from_ref(&gw)),
            DeliveryResult::Delivered {
                received_by: vec!["gw".into()]
            }
        );
        let mut f = frame_at(far, 12.0);
        assert_eq!(deliver_uplink(&mut f, &[gw]), DeliveryResult::Dropped);
        assert!(f.received_by.is_empty());
    }

    #[test]
    fn forced_loss_drops_everything() {
        let mut radio = Radio::new(vec![Gateway::new("gw", 45.0, 12.0, 15.0)], 1.0, 3);
        let mut f = frame_at(45.0, 12.0);
        assert_eq!(radio.transmit(&mut f), DeliveryResult::Dropped);
    }

    #[test]
    fn queue_is_fifo_per_device_one_per_window() {
        let mut q = DownlinkQueue::new();
        assert!(flush_downlinks("a", SimTime(0), &mut q).is_empty());
        q.enqueue("a", 1, "Z3Bz", SimTime(10));
        q.enqueue("b", 1, "YWJj", SimTime(11));
        q.enqueue("a", 2, "YWJj", SimTime(12));
        let first = flush_downlinks("a", SimTime(400), &mut q);
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].payload_b64, "Z3Bz");
        assert_eq!(first[0].delivered_at, Some(SimTime(1_400)));
        assert_eq!(q.pending_len(), 2);
        let second = flush_downlinks("a", SimTime(1_000), &mut q);
        assert_eq!(second[0].fport, 2);
        assert!(flush_downlinks("a", SimTime(2_000), &mut q).is_empty());
        assert_eq!(q.pending().next().unwrap().device_id, "b");
        assert_eq!(q.delivered().len(), 2);
    }

    #[test]
    fn duty_cycle_fraction() {
        assert_eq!(duty_cycle(&[], SimTime(0), SimDuration::from_secs(600)), 0.0);
        let log = [(SimTime(215_360), SimTime(217_360))];
        let f = duty_cycle(&log, SimTime(0), SimDuration::from_secs(600));
        assert!((f - 2.0 / 600.0).abs() < 1e-12);
        // clipped at the window edge
        let f = duty_cycle(&log, SimTime(216_360), SimDuration::from_secs(10));
        assert!((f - 0.1).abs() < 1e-12);
    }

    #[test]
    fn network_server_dedups_copies() {
        let mut ns = NetworkServer::new();
        let mut f = frame_at(45.0, 12.0);
        f.received_by = vec!["gw1".into(), "gw2".into()];
        assert!(ns.receive(&f, "gw1").is_some());
        assert!(ns.receive(&f, "gw2").is_none());
        f.fcnt = 1;
        let msg = ns.receive(&f, "gw2").unwrap();
        assert_eq!(msg.payload_b64, "AQIAAA==");
        assert_eq!(ns.duplicates(), 1);
    }
}
