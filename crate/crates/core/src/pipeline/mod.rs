//! Application-side pipeline: decode hook, topic republish and storage.
//!
//! Each uplink goes base64 → CayenneLPP records → series points. A frame
//! that decodes and stores cleanly is republished on `lorawan` with its
//! decoded fields; anything else lands on `lorawan/error` with the cause
//! and stores nothing.

pub mod store;

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use store::{
    export_points, read_points, Aggregation, ExportFormat, QueryError, RetentionPolicy, SeriesPoint,
    StoreError, TimeSeriesStore,
};

use crate::channel::{cleartext, ChannelMap, SampleSet, Series};
use crate::link::UplinkMessage;
use crate::lpp::{self, GpsPosition};
use crate::time::{SimDuration, SimTime};

pub const TOPIC_OK: &str = "lorawan";
pub const TOPIC_ERROR: &str = "lorawan/error";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedField {
    pub series: Series,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageBody {
    pub device_id: String,
    pub fcnt: u32,
    pub fport: u8,
    pub time: SimTime,
    pub payload_b64: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub decoded: Vec<DecodedField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cleartext: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicMessage {
    pub topic: String,
    pub body: MessageBody,
}

impl TopicMessage {
    pub fn is_error(&self) -> bool {
        self.topic == TOPIC_ERROR
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopicFilter {
    Success,
    Error,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad topic filter `{0}` (expected lorawan, lorawan/error or lorawan/#)")]
pub struct BadFilter(pub String);

impl FromStr for TopicFilter {
    type Err = BadFilter;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            TOPIC_OK => Ok(TopicFilter::Success),
            TOPIC_ERROR => Ok(TopicFilter::Error),
            "lorawan/#" => Ok(TopicFilter::All),
            other => Err(BadFilter(other.to_string())),
        }
    }
}

impl TopicFilter {
    pub fn matches(self, topic: &str) -> bool {
        match self {
            TopicFilter::Success => topic == TOPIC_OK,
            TopicFilter::Error => topic == TOPIC_ERROR,
            TopicFilter::All => topic == TOPIC_OK || topic == TOPIC_ERROR,
        }
    }
}

/// A live feed of messages published after `subscribe` returned.
#[derive(Debug)]
pub struct Subscription {
    rx: Receiver<TopicMessage>,
}

impl Subscription {
    pub fn try_recv(&self) -> Option<TopicMessage> {
        self.rx.try_recv().ok()
    }

    pub fn recv_timeout(&self, d: std::time::Duration) -> Option<TopicMessage> {
        self.rx.recv_timeout(d).ok()
    }

    /// Everything queued so far, without blocking.
    pub fn drain(&self) -> Vec<TopicMessage> {
        self.rx.try_iter().collect()
    }

    pub fn into_receiver(self) -> Receiver<TopicMessage> {
        self.rx
    }
}

/// What the pipeline knows about a device from its decoded traffic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceStatus {
    pub last_seen: Option<SimTime>,
    pub last_values: Option<SampleSet>,
    pub last_position: Option<GpsPosition>,
}

#[derive(Debug, Error)]
enum IngestError {
    #[error("base64: {0}")]
    Base64(String),
    #[error("cayennelpp: {0}")]
    Lpp(#[from] lpp::MalformedPayload),
    #[error("channel map: {0}")]
    Channel(#[from] crate::channel::ChannelError),
    #[error("payload carries no records")]
    Empty,
    #[error("store: {0}")]
    Store(#[from] StoreError),
}

#[derive(Debug)]
pub struct Pipeline {
    store: TimeSeriesStore,
    channel_map: ChannelMap,
    subscribers: Mutex<Vec<(TopicFilter, Sender<TopicMessage>)>>,
    history: Vec<TopicMessage>,
    devices: BTreeMap<String, DeviceStatus>,
}

impl Pipeline {
    pub fn new(store: TimeSeriesStore) -> Self {
        Self {
            store,
            channel_map: ChannelMap::default(),
            subscribers: Mutex::new(Vec::new()),
            history: Vec::new(),
            devices: BTreeMap::new(),
        }
    }

    pub fn register_device(&mut self, device_id: &str) {
        self.store.register_device(device_id);
        self.devices.entry(device_id.to_string()).or_default();
    }

    pub fn store(&self) -> &TimeSeriesStore {
        &self.store
    }

    pub fn device_status(&self, device_id: &str) -> Option<&DeviceStatus> {
        self.devices.get(device_id)
    }

    /// Decodes, stores and republishes one uplink. Never fails: problems
    /// become `lorawan/error` messages.
    pub fn ingest(&mut self, msg: &UplinkMessage, t: SimTime) -> TopicMessage {
        let mut body = MessageBody {
            device_id: msg.device_id.clone(),
            fcnt: msg.fcnt,
            fport: msg.fport,
            time: t,
            payload_b64: msg.payload_b64.clone(),
            decoded: Vec::new(),
            cleartext: None,
            error: None,
        };
        let topic = match self.decode_and_store(msg, t) {
            Ok(values) => {
                body.cleartext = Some(cleartext(&values));
                body.decoded = values
                    .into_iter()
                    .map(|(series, value)| DecodedField { series, value })
                    .collect();
                TOPIC_OK
            }
            Err(e) => {
                body.error = Some(e.to_string());
                TOPIC_ERROR
            }
        };
        let message = TopicMessage {
            topic: topic.to_string(),
            body,
        };
        self.publish(&message);
        message
    }

    fn decode_and_store(
        &mut self,
        msg: &UplinkMessage,
        t: SimTime,
    ) -> Result<Vec<(Series, f64)>, IngestError> {
        let bytes = lpp::decode_base64(&msg.payload_b64).map_err(IngestError::Base64)?;
        let records = lpp::decode_payload(&bytes)?;
        if records.is_empty() {
            return Err(IngestError::Empty);
        }
        let values = self.channel_map.series_values(&records)?;
        let points: Vec<SeriesPoint> = values
            .iter()
            .map(|&(series, value)| SeriesPoint {
                device_id: msg.device_id.clone(),
                series,
                time: t,
                value,
            })
            .collect();
        self.store.insert_batch(&points)?;

        let status = self.devices.entry(msg.device_id.clone()).or_default();
        status.last_seen = Some(t);
        if let Ok(set) = self.channel_map.sampleset(&records) {
            status.last_values = Some(set);
            if set.gps.is_some() {
                status.last_position = set.gps;
            }
        }
        Ok(values)
    }

    fn publish(&mut self, msg: &TopicMessage) {
        self.history.push(msg.clone());
        let mut subs = self.subscribers.lock().expect("subscriber list poisoned");
        subs.retain(|(filter, tx)| !filter.matches(&msg.topic) || tx.send(msg.clone()).is_ok());
    }

    pub fn subscribe(&self, filter: &str) -> Result<Subscription, BadFilter> {
        let filter: TopicFilter = filter.parse()?;
        let (tx, rx) = mpsc::channel();
        self.subscribers
            .lock()
            .expect("subscriber list poisoned")
            .push((filter, tx));
        Ok(Subscription { rx })
    }

    /// Every message published so far, in publish order.
    pub fn history(&self) -> &[TopicMessage] {
        &self.history
    }

    /// Error-topic messages with `from <= time <= to`.
    pub fn errors(&self, from: SimTime, to: SimTime) -> Vec<TopicMessage> {
        self.history
            .iter()
            .filter(|m| m.is_error() && m.body.time >= from && m.body.time <= to)
            .cloned()
            .collect()
    }

    pub fn query(
        &self,
        device_id: &str,
        series: &str,
        from: SimTime,
        to: SimTime,
        agg: Aggregation,
        bucket: SimDuration,
    ) -> Result<Vec<(SimTime, f64)>, QueryError> {
        self.store.query(device_id, series, from, to, agg, bucket)
    }

    pub fn expire(&mut self, now: SimTime) -> usize {
        self.store.expire(now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::encode_sampleset;

    fn periodic(gps: Option<GpsPosition>) -> Vec<u8> {
        let s = SampleSet {
            ph: 8.1,
            ec: 41.2,
            turbidity: 30.0,
            do_mgl: 7.5,
            liquid_level: true,
            temperature_c: 16.3,
            gps,
        };
        encode_sampleset(&s, &ChannelMap::default()).unwrap()
    }

    fn msg(fcnt: u32, payload_b64: String) -> UplinkMessage {
        UplinkMessage {
            device_id: "node-1".into(),
            fcnt,
            fport: 1,
            payload_b64,
            received_by: vec!["gw".into()],
        }
    }

    fn pipeline() -> Pipeline {
        let mut p = Pipeline::new(TimeSeriesStore::default());
        p.register_device("node-1");
        p
    }

    #[test]
    fn periodic_frame_stores_six_points() {
        let mut p = pipeline();
        let m = p.ingest(&msg(0, lpp::encode_base64(&periodic(None))), SimTime(217_360));
        assert_eq!(m.topic, TOPIC_OK);
        assert_eq!(m.body.decoded.len(), 6);
        assert!(m.body.cleartext.as_deref().unwrap().contains("ph=8.1"));
        assert_eq!(p.store().len(), 6);
    }

    #[test]
    fn gps_frame_expands_to_nine_points() {
        let mut p = pipeline();
        let fix = GpsPosition {
            lat: 45.4408,
            lon: 12.3155,
            alt: 0.0,
        };
        let m = p.ingest(&msg(0, lpp::encode_base64(&periodic(Some(fix)))), SimTime(1));
        assert_eq!(m.body.decoded.len(), 9);
        assert_eq!(p.store().len(), 9);
        assert_eq!(p.device_status("node-1").unwrap().last_position, Some(fix));
    }

    #[test]
    fn failures_route_to_error_topic() {
        let mut p = pipeline();
        for (i, body) in [
            "not base64!".to_string(),
            lpp::encode_base64(&[1, 2, 0]),
            lpp::encode_base64(&[]),
            lpp::encode_base64(&[9, 2, 0, 0]),
        ]
        .into_iter()
        .enumerate()
        {
            let m = p.ingest(&msg(i as u32, body), SimTime(i as u64));
            assert_eq!(m.topic, TOPIC_ERROR);
            assert!(m.body.error.is_some());
            assert!(m.body.decoded.is_empty());
        }
        assert!(p.store().is_empty());
        assert_eq!(p.errors(SimTime(0), SimTime(10)).len(), 4);
        assert_eq!(p.errors(SimTime(2), SimTime(10)).len(), 2);
    }

    #[test]
    fn store_conflict_becomes_error_message() {
        let mut p = pipeline();
        let body = lpp::encode_base64(&periodic(None));
        assert_eq!(p.ingest(&msg(0, body.clone()), SimTime(5)).topic, TOPIC_OK);
        let again = p.ingest(&msg(1, body), SimTime(5));
        assert_eq!(again.topic, TOPIC_ERROR);
        assert_eq!(p.store().len(), 6);
    }

    #[test]
    fn subscriptions_filter_and_order() {
        let mut p = pipeline();
        let all = p.subscribe("lorawan/#").unwrap();
        let errors = p.subscribe("lorawan/error").unwrap();
        let ok = p.subscribe("lorawan").unwrap();
        assert!(p.subscribe("lorawan/+").is_err());
        p.ingest(&msg(0, lpp::encode_base64(&periodic(None))), SimTime(1));
        p.ingest(&msg(1, "***".into()), SimTime(2));
        let got = all.drain();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].topic, TOPIC_OK);
        assert_eq!(got[1].topic, TOPIC_ERROR);
        assert_eq!(errors.drain().len(), 1);
        assert_eq!(ok.drain().len(), 1);
    }

    #[test]
    fn late_subscriber_sees_only_new_messages() {
        let mut p = pipeline();
        p.ingest(&msg(0, lpp::encode_base64(&periodic(None))), SimTime(1));
        let sub = p.subscribe("lorawan").unwrap();
        assert!(sub.try_recv().is_none());
        drop(sub);
        // dropped subscribers are pruned on the next publish
        p.ingest(&msg(1, lpp::encode_base64(&periodic(None))), SimTime(2));
        assert!(p.subscribers.lock().unwrap().is_empty());
    }
}
