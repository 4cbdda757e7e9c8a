//! Discrete-event simulation of a whole deployment.
//!
//! Actions sit on a min-heap keyed by `(time, insertion order)`, so equal
//! times resolve first-in first-out and a seeded run is reproducible.
//! Phase events produced ahead of time (a cycle is computed at wake) are
//! held back and released once the clock reaches them.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{self, Write};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::channel::SampleSet;
use crate::event::{EventKind, PhaseEvent};
use crate::link::{DownlinkCommand, DownlinkQueue, NetworkServer, Radio, UplinkFrame, DEFAULT_FPORT};
use crate::lpp::{self, decode_downlink, GpsPosition};
use crate::node::{energy_report, Basis, EnergyLedger, EnergyReport, EnvironmentModel, GpsState, NodeState};
use crate::pipeline::{export_points, ExportFormat, Pipeline, TimeSeriesStore, TopicMessage};
use crate::scenario::{ConfigError, FieldError, ScenarioConfig};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Wake(usize),
    TxEnd(usize),
    RxWindow(usize),
    GpsCheck(usize),
}

/// What live observers receive, in simulation-time order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    Message(TopicMessage),
    Phase(PhaseEvent),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub cycles: u64,
    pub uplinks_sent: u64,
    pub uplinks_delivered: u64,
    pub uplinks_dropped: u64,
    pub duplicates: u64,
    pub messages_ok: u64,
    pub messages_error: u64,
    pub downlinks_delivered: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DownlinkRequestError {
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("payload is not valid base64: {0}")]
    Base64(String),
    #[error("fport {0} outside 1..=223")]
    InvalidFPort(u16),
}

/// Per-node view served to operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub device_id: String,
    pub last_seen: Option<SimTime>,
    pub last_values: Option<SampleSet>,
    /// Percent of pack capacity left.
    pub battery_remaining: f64,
    /// Last position reported over the air.
    pub position: Option<GpsPosition>,
    pub gps: String,
    pub fcnt: u32,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEnergy {
    pub device_id: String,
    pub capacity: EnergyReport,
    pub energy: EnergyReport,
    pub cycle_ledger: EnergyLedger,
    pub gps_ledger: EnergyLedger,
}

/// Optional sinks for the run's output files.
#[derive(Default)]
pub struct SimOutputs {
    /// Receives `time,device_id,series,value` lines as points are stored.
    pub points: Option<Box<dyn Write + Send + Sync>>,
    /// Receives one JSON phase event per line.
    pub events: Option<Box<dyn Write + Send + Sync>>,
}

struct SimNode {
    state: NodeState,
    env: EnvironmentModel,
    frame: Option<UplinkFrame>,
    rx: Option<DownlinkCommand>,
}

pub struct Simulation {
    config: ScenarioConfig,
    now: SimTime,
    end: SimTime,
    rx_delay: SimDuration,
    nodes: Vec<SimNode>,
    radio: Radio,
    server: NetworkServer,
    queue: DownlinkQueue,
    pipeline: Pipeline,
    agenda: BinaryHeap<Reverse<(SimTime, u64, Action)>>,
    seq: u64,
    held: BTreeMap<(SimTime, u64), PhaseEvent>,
    events: Vec<PhaseEvent>,
    event_sink: Option<Box<dyn Write + Send + Sync>>,
    observers: Mutex<Vec<Sender<StreamEvent>>>,
    tx_log: Vec<(SimTime, SimTime)>,
    stats: RunStats,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("now", &self.now)
            .field("end", &self.end)
            .field("nodes", &self.nodes.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl Simulation {
    pub fn new(config: ScenarioConfig) -> Result<Self, ConfigError> {
        Self::with_outputs(config, SimOutputs::default())
    }

    pub fn with_outputs(config: ScenarioConfig, outputs: SimOutputs) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut nodes = Vec::with_capacity(config.nodes.len());
        for (i, (cfg, env_spec)) in config.node_configs().into_iter().enumerate() {
            let state = NodeState::new(&cfg).map_err(|e| ConfigError {
                errors: vec![FieldError {
                    field: format!("nodes[{i}].sampling_period_s"),
                    message: e.to_string(),
                }],
            })?;
            nodes.push(SimNode {
                env: EnvironmentModel::new(&env_spec, cfg.seed),
                state,
                frame: None,
                rx: None,
            });
        }
        let mut store = TimeSeriesStore::new(config.retention_policy());
        if let Some(w) = outputs.points {
            store = store.with_persistence(w);
        }
        let mut pipeline = Pipeline::new(store);
        for n in &nodes {
            pipeline.register_device(&n.state.device_id);
        }
        let mut sim = Self {
            now: SimTime::ZERO,
            end: SimTime::ZERO + config.duration(),
            rx_delay: SimDuration::from_secs_f64(config.rx_delay_s),
            radio: Radio::new(config.gateways(), config.loss_probability, config.seed),
            server: NetworkServer::new(),
            queue: DownlinkQueue::new(),
            pipeline,
            agenda: BinaryHeap::new(),
            seq: 0,
            held: BTreeMap::new(),
            events: Vec::new(),
            event_sink: outputs.events,
            observers: Mutex::new(Vec::new()),
            tx_log: Vec::new(),
            stats: RunStats::default(),
            nodes,
            config,
        };
        for i in 0..sim.nodes.len() {
            sim.schedule(SimTime::ZERO, Action::Wake(i));
        }
        Ok(sim)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn end(&self) -> SimTime {
        self.end
    }

    /// Time of the next action or held event inside the run, if any.
    pub fn next_time(&self) -> Option<SimTime> {
        let action = self.agenda.peek().map(|Reverse((t, _, _))| *t);
        let held = self.held.first_key_value().map(|((t, _), _)| *t);
        match (action, held) {
            (Some(a), Some(h)) => Some(a.min(h)),
            (a, h) => a.or(h),
        }
        .filter(|&t| t <= self.end)
    }

    pub fn is_finished(&self) -> bool {
        self.next_time().is_none()
    }

    /// Advances to the next action or held event and processes it.
    /// Returns its time, or `None` once done.
    pub fn step(&mut self) -> Option<SimTime> {
        let t = self.next_time()?;
        self.now = self.now.max(t);
        self.release();
        if self.agenda.peek().is_some_and(|Reverse((at, _, _))| *at == t) {
            let Reverse((_, _, action)) = self.agenda.pop().expect("peeked");
            self.dispatch(action);
            self.release();
        }
        Some(t)
    }

    /// Processes every action up to `t` (clamped to the run end) and moves
    /// the clock there.
    pub fn run_until(&mut self, t: SimTime) {
        let t = t.min(self.end);
        while self.next_time().is_some_and(|n| n <= t) {
            self.step();
        }
        self.advance_clock(t);
    }

    pub fn run_to_end(&mut self) {
        self.run_until(self.end);
    }

    /// Moves the clock forward without processing anything past it.
    pub fn advance_clock(&mut self, t: SimTime) {
        let t = t.min(self.end);
        if let Some(next) = self.next_time() {
            debug_assert!(t <= next, "clock would skip a pending action");
        }
        self.now = self.now.max(t);
        self.release();
    }

    pub fn flush_outputs(&mut self) {
        if let Some(w) = self.event_sink.as_mut() {
            if let Err(e) = w.flush() {
                warn!(error = %e, "event log flush failed");
            }
        }
    }

    /// Queues a downlink for the device's next receive window.
    pub fn enqueue_downlink(
        &mut self,
        device_id: &str,
        fport: u16,
        payload_b64: &str,
    ) -> Result<DownlinkCommand, DownlinkRequestError> {
        if self.node_index(device_id).is_none() {
            return Err(DownlinkRequestError::UnknownDevice(device_id.to_string()));
        }
        if !(1..=223).contains(&fport) {
            return Err(DownlinkRequestError::InvalidFPort(fport));
        }
        lpp::decode_base64(payload_b64).map_err(DownlinkRequestError::Base64)?;
        Ok(self.queue.enqueue(device_id, fport, payload_b64, self.now))
    }

    /// Live feed of topic messages and phase events from now on.
    pub fn subscribe(&self) -> Receiver<StreamEvent> {
        let (tx, rx) = mpsc::channel();
        self.observers.lock().expect("observer list poisoned").push(tx);
        rx
    }

    pub fn node(&self, device_id: &str) -> Option<&NodeState> {
        self.node_index(device_id).map(|i| &self.nodes[i].state)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeState> {
        self.nodes.iter().map(|n| &n.state)
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn downlinks(&self) -> &DownlinkQueue {
        &self.queue
    }

    /// Released phase events, time-ordered.
    pub fn events(&self) -> &[PhaseEvent] {
        &self.events
    }

    /// `(start, end)` of every transmission so far.
    pub fn tx_log(&self) -> &[(SimTime, SimTime)] {
        &self.tx_log
    }

    pub fn stats(&self) -> RunStats {
        RunStats {
            duplicates: self.server.duplicates(),
            ..self.stats
        }
    }

    pub fn node_summaries(&self) -> Vec<NodeSummary> {
        self.nodes
            .iter()
            .map(|n| {
                let s = &n.state;
                let status = self
                    .pipeline
                    .device_status(&s.device_id)
                    .cloned()
                    .unwrap_or_default();
                NodeSummary {
                    device_id: s.device_id.clone(),
                    last_seen: status.last_seen,
                    last_values: status.last_values,
                    battery_remaining: s.battery_remaining_pct(),
                    position: status.last_position,
                    gps: match s.gps {
                        GpsState::Off => "off",
                        GpsState::Searching { .. } => "searching",
                        GpsState::FixPending(_) => "fix_pending",
                    }
                    .to_string(),
                    fcnt: s.fcnt,
                    cycles: s.cycles,
                }
            })
            .collect()
    }

    /// Steady-state estimate for each node's configured profile and pack.
    pub fn energy(&self) -> Vec<NodeEnergy> {
        self.nodes
            .iter()
            .map(|n| {
                let s = &n.state;
                let report = |basis| {
                    energy_report(&s.profile, &s.pack, basis).expect("built-in profiles draw current")
                };
                NodeEnergy {
                    device_id: s.device_id.clone(),
                    capacity: report(Basis::Capacity),
                    energy: report(Basis::Energy),
                    cycle_ledger: s.ledger,
                    gps_ledger: s.gps_ledger,
                }
            })
            .collect()
    }

    /// Every stored point, sorted by time, device and series.
    pub fn export<W: Write>(&self, format: ExportFormat, out: W) -> io::Result<()> {
        export_points(&self.pipeline.store().all_points(), format, out)
    }

    fn node_index(&self, device_id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.state.device_id == device_id)
    }

    fn schedule(&mut self, t: SimTime, action: Action) {
        self.seq += 1;
        self.agenda.push(Reverse((t, self.seq, action)));
    }

    fn hold(&mut self, event: PhaseEvent) {
        self.seq += 1;
        self.held.insert((event.at, self.seq), event);
    }

    fn release(&mut self) {
        while let Some(entry) = self.held.first_entry() {
            if entry.key().0 > self.now {
                break;
            }
            let event = entry.remove();
            if let Some(w) = self.event_sink.as_mut() {
                let line = serde_json::to_string(&event).expect("events serialize");
                if let Err(e) = writeln!(w, "{line}") {
                    warn!(error = %e, "event log write failed; disabling it");
                    self.event_sink = None;
                }
            }
            self.broadcast(StreamEvent::Phase(event.clone()));
            self.events.push(event);
        }
    }

    fn broadcast(&self, event: StreamEvent) {
        let mut observers = self.observers.lock().expect("observer list poisoned");
        if observers.is_empty() {
            return;
        }
        observers.retain(|tx| tx.send(event.clone()).is_ok());
    }

    fn dispatch(&mut self, action: Action) {
        let t = self.now;
        match action {
            Action::Wake(i) => self.wake(i, t),
            Action::TxEnd(i) => self.tx_end(i, t),
            Action::RxWindow(i) => self.rx_window(i, t),
            Action::GpsCheck(i) => {
                if let Some(ev) = self.nodes[i].state.step_gps(t) {
                    self.hold(ev);
                }
            }
        }
    }

    fn wake(&mut self, i: usize, t: SimTime) {
        let node = &mut self.nodes[i];
        let out = match node.state.run_cycle(&mut node.env, t) {
            Ok(out) => out,
            Err(e) => {
                warn!(error = %e, "wake skipped");
                return;
            }
        };
        let (lat, lon) = node.state.position;
        node.frame = Some(UplinkFrame {
            device_id: node.state.device_id.clone(),
            fcnt: out.fcnt,
            fport: DEFAULT_FPORT,
            payload: out.payload,
            lat,
            lon,
            tx_start: out.tx_start,
            tx_end: out.tx_end,
            received_by: Vec::new(),
        });
        self.stats.cycles += 1;
        for ev in out.events {
            self.hold(ev);
        }
        self.schedule(out.tx_end, Action::TxEnd(i));
        if out.cycle_end < self.end {
            self.schedule(out.cycle_end, Action::Wake(i));
        }
    }

    fn tx_end(&mut self, i: usize, t: SimTime) {
        let Some(mut frame) = self.nodes[i].frame.take() else {
            return;
        };
        self.stats.uplinks_sent += 1;
        self.tx_log.push((frame.tx_start, frame.tx_end));
        let device_id = frame.device_id.clone();
        let delivered = self.radio.transmit(&mut frame).is_delivered();
        if !delivered {
            self.stats.uplinks_dropped += 1;
            self.hold(PhaseEvent::new(
                &device_id,
                t,
                EventKind::UplinkDropped { fcnt: frame.fcnt },
            ));
            return;
        }
        self.stats.uplinks_delivered += 1;
        self.hold(PhaseEvent::new(
            &device_id,
            t,
            EventKind::UplinkDelivered {
                fcnt: frame.fcnt,
                gateways: frame.received_by.clone(),
            },
        ));
        for gw in frame.received_by.clone() {
            if let Some(msg) = self.server.receive(&frame, &gw) {
                self.release();
                let out = self.pipeline.ingest(&msg, t);
                if out.is_error() {
                    self.stats.messages_error += 1;
                } else {
                    self.stats.messages_ok += 1;
                }
                self.broadcast(StreamEvent::Message(out));
            }
        }
        let expired = self.pipeline.expire(t);
        if expired > 0 {
            debug!(expired, "retention pass");
        }
        // class A: at most one command rides the receive window after an uplink
        if let Some(cmd) = self.queue.flush(&device_id, t, self.rx_delay).into_iter().next() {
            let at = cmd.delivered_at.expect("flushed commands carry a delivery time");
            self.nodes[i].rx = Some(cmd);
            self.schedule(at, Action::RxWindow(i));
        }
    }

    fn rx_window(&mut self, i: usize, t: SimTime) {
        let Some(cmd) = self.nodes[i].rx.take() else {
            return;
        };
        self.stats.downlinks_delivered += 1;
        let device_id = self.nodes[i].state.device_id.clone();
        self.hold(PhaseEvent::new(
            &device_id,
            t,
            EventKind::DownlinkDelivered {
                id: cmd.id,
                fport: cmd.fport,
                payload_b64: cmd.payload_b64.clone(),
            },
        ));
        match decode_downlink(cmd.fport, &cmd.payload_b64) {
            Ok(command) => {
                let node = &mut self.nodes[i].state;
                if let Some(ev) = node.handle_downlink(&command, t) {
                    self.hold(ev);
                }
                if let Some(deadline) = self.nodes[i].state.gps_deadline() {
                    self.schedule(deadline, Action::GpsCheck(i));
                }
            }
            Err(e) => self.hold(PhaseEvent::new(
                &device_id,
                t,
                EventKind::CommandIgnored { text: e.to_string() },
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::TimeToFix;
    use crate::scenario::{GatewayDef, NodeDef, Speed};

    fn one_node(duration_s: f64) -> ScenarioConfig {
        ScenarioConfig {
            seed: 3,
            duration_s,
            speed: Speed::Max,
            retention: Default::default(),
            loss_probability: 0.0,
            rx_delay_s: 1.0,
            gateways: vec![GatewayDef {
                id: "gw".into(),
                lat: 45.40,
                lon: 12.30,
                range_km: 15.0,
            }],
            nodes: vec![NodeDef::new("n1", 45.41, 12.31)],
        }
    }

    #[test]
    fn hour_run_stores_six_cycles() {
        let mut sim = Simulation::new(one_node(3600.0)).unwrap();
        sim.run_to_end();
        let st = sim.stats();
        assert_eq!(st.uplinks_delivered, 6);
        assert_eq!(st.messages_ok, 6);
        assert_eq!(sim.pipeline().store().len(), 36);
        assert_eq!(sim.tx_log()[0], (SimTime(215_360), SimTime(217_360)));
        assert!(sim.is_finished());
        assert_eq!(sim.now(), SimTime(3_600_000));
    }

    #[test]
    fn released_events_are_time_ordered() {
        let mut sim = Simulation::new(one_node(1800.0)).unwrap();
        sim.run_to_end();
        let ev = sim.events();
        assert!(!ev.is_empty());
        assert!(ev.windows(2).all(|w| w[0].at <= w[1].at));
        assert!(ev.iter().all(|e| e.at <= sim.end()));
    }

    #[test]
    fn events_are_held_until_the_clock_reaches_them() {
        let mut sim = Simulation::new(one_node(1800.0)).unwrap();
        sim.step();
        assert_eq!(sim.now(), SimTime::ZERO);
        assert!(sim.events().iter().all(|e| e.at == SimTime::ZERO));
        // the next step is the first held event, not the next action
        assert_eq!(sim.next_time(), Some(SimTime(80_000)));
        sim.run_until(SimTime(100_000));
        assert!(sim.events().iter().all(|e| e.at <= SimTime(100_000)));
        assert_eq!(sim.stats().uplinks_sent, 0);
    }

    #[test]
    fn downlink_rides_the_next_receive_window() {
        let mut cfg = one_node(1800.0);
        cfg.nodes[0].gps.time_to_fix = TimeToFix::Fixed { secs: 60.0 };
        let mut sim = Simulation::new(cfg).unwrap();
        sim.run_until(SimTime(100_000));
        let cmd = sim.enqueue_downlink("n1", 1, "Z3Bz").unwrap();
        assert_eq!(cmd.enqueued_at, SimTime(100_000));
        sim.run_to_end();
        let delivered = &sim.downlinks().delivered()[0];
        assert_eq!(delivered.delivered_at, Some(SimTime(218_360)));
        let kinds: Vec<&EventKind> = sim.events().iter().map(|e| &e.kind).collect();
        assert!(kinds.iter().any(|k| matches!(k, EventKind::GpsFix { .. })));
        assert!(kinds.iter().any(|k| matches!(k, EventKind::GpsAttached { .. })));
        // second cycle carries GPS
        let gps = sim
            .pipeline()
            .query(
                "n1",
                "gps_lat",
                SimTime::ZERO,
                sim.end(),
                crate::pipeline::Aggregation::Raw,
                SimDuration::ZERO,
            )
            .unwrap();
        assert_eq!(gps.len(), 1);
        assert_eq!(gps[0].0, SimTime(817_360));
    }

    #[test]
    fn downlink_validation() {
        let mut sim = Simulation::new(one_node(600.0)).unwrap();
        assert_eq!(
            sim.enqueue_downlink("nope", 1, "Z3Bz"),
            Err(DownlinkRequestError::UnknownDevice("nope".into()))
        );
        assert!(matches!(
            sim.enqueue_downlink("n1", 1, "!!"),
            Err(DownlinkRequestError::Base64(_))
        ));
        assert_eq!(
            sim.enqueue_downlink("n1", 0, "Z3Bz"),
            Err(DownlinkRequestError::InvalidFPort(0))
        );
        assert_eq!(sim.downlinks().pending_len(), 0);
    }

    #[test]
    fn unknown_command_is_logged_and_ignored() {
        let mut sim = Simulation::new(one_node(1200.0)).unwrap();
        sim.enqueue_downlink("n1", 1, &lpp::encode_base64(b"reboot"))
            .unwrap();
        sim.run_to_end();
        assert!(sim
            .events()
            .iter()
            .any(|e| matches!(&e.kind, EventKind::CommandIgnored { text } if text == "reboot")));
        assert_eq!(sim.node("n1").unwrap().gps, GpsState::Off);
    }

    #[test]
    fn uncovered_node_drops_and_keeps_commands_queued() {
        let mut cfg = one_node(1200.0);
        cfg.nodes[0].lat = 46.0;
        let mut sim = Simulation::new(cfg).unwrap();
        sim.enqueue_downlink("n1", 1, "Z3Bz").unwrap();
        sim.run_to_end();
        assert_eq!(sim.stats().uplinks_dropped, 2);
        assert_eq!(sim.pipeline().store().len(), 0);
        assert_eq!(sim.downlinks().pending_len(), 1);
    }

    #[test]
    fn observers_see_messages_and_phases() {
        let mut sim = Simulation::new(one_node(600.0)).unwrap();
        let rx = sim.subscribe();
        sim.run_to_end();
        let got: Vec<StreamEvent> = rx.try_iter().collect();
        assert_eq!(
            got.iter()
                .filter(|e| matches!(e, StreamEvent::Message(_)))
                .count(),
            1
        );
        assert_eq!(
            got.iter().filter(|e| matches!(e, StreamEvent::Phase(_))).count(),
            sim.events().len()
        );
    }

    #[test]
    fn same_seed_same_export() {
        let run = || {
            let mut cfg = ScenarioConfig::lagoon_default();
            cfg.duration_s = 7200.0;
            cfg.loss_probability = 0.2;
            let mut sim = Simulation::new(cfg).unwrap();
            sim.run_to_end();
            let mut out = Vec::new();
            sim.export(ExportFormat::Csv, &mut out).unwrap();
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn outputs_receive_points_and_events() {
        #[derive(Clone, Default)]
        struct Shared(std::sync::Arc<Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let (points, events) = (Shared::default(), Shared::default());
        let mut sim = Simulation::with_outputs(
            one_node(600.0),
            SimOutputs {
                points: Some(Box::new(points.clone())),
                events: Some(Box::new(events.clone())),
            },
        )
        .unwrap();
        sim.run_to_end();
        let p = String::from_utf8(points.0.lock().unwrap().clone()).unwrap();
        assert_eq!(p.lines().count(), 6);
        assert!(p.lines().all(|l| l.starts_with("217.360,n1,")));
        let e = String::from_utf8(events.0.lock().unwrap().clone()).unwrap();
        assert_eq!(e.lines().count(), sim.events().len());
    }
}
