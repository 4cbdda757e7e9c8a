//! Running a scenario on a background thread and talking to it.
//!
//! The simulation lives behind an `RwLock`; readers (status, queries,
//! exports) take the read side while the run thread advances the clock.
//! Mutations from outside go through a command channel and are applied by
//! the run thread between actions, so they land at a well-defined
//! simulation time.

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex, RwLock, RwLockReadGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::link::DownlinkCommand;
use crate::node::{energy_report, Basis, BatteryPack, EnergyReport, PhaseProfile, ProfileKind};
use crate::scenario::{ConfigError, ScenarioConfig, Speed};
use crate::sim::{DownlinkRequestError, RunStats, SimOutputs, Simulation, StreamEvent};
use crate::time::SimTime;

/// Actions processed per write-lock acquisition when running flat out.
const BATCH: usize = 512;

/// Steady-state figures for a built-in profile on the default pack.
pub fn get_energy_report(profile: ProfileKind, basis: Basis) -> EnergyReport {
    energy_report(&PhaseProfile::of_kind(profile), &BatteryPack::default(), basis)
        .expect("built-in profiles draw current")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Running,
    Completed,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub state: RunState,
    pub sim_time: SimTime,
    pub end: SimTime,
    /// Fraction of the scenario simulated, 0 to 1.
    pub progress: f64,
    pub speed: Speed,
    pub stats: RunStats,
    pub pending_downlinks: usize,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("output directory: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error(transparent)]
    Downlink(#[from] DownlinkRequestError),
    #[error("the run has been stopped")]
    Stopped,
}

enum Request {
    Downlink {
        device_id: String,
        fport: u16,
        payload_b64: String,
        reply: Sender<Result<DownlinkCommand, DownlinkRequestError>>,
    },
    Stop,
}

type StateCell = Arc<(Mutex<RunState>, Condvar)>;

/// A scenario running on its own thread. Dropping the handle stops it.
pub struct RunHandle {
    sim: Arc<RwLock<Simulation>>,
    requests: Sender<Request>,
    state: StateCell,
    thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for RunHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunHandle").field("state", &self.state()).finish()
    }
}

/// Validates `config` and starts it. With `out_dir`, stored points go to
/// `points.csv`, phase events to `events.jsonl` and a run summary to
/// `summary.json` once the scenario completes.
pub fn run_scenario(config: ScenarioConfig, out_dir: Option<&Path>) -> Result<RunHandle, RunError> {
    config.validate()?;
    let mut outputs = SimOutputs::default();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        outputs.points = Some(Box::new(BufWriter::new(File::create(dir.join("points.csv"))?)));
        outputs.events = Some(Box::new(BufWriter::new(File::create(dir.join("events.jsonl"))?)));
    }
    let speed = config.speed;
    let sim = Arc::new(RwLock::new(Simulation::with_outputs(config, outputs)?));
    let (tx, rx) = mpsc::channel();
    let state: StateCell = Arc::new((Mutex::new(RunState::Running), Condvar::new()));
    let thread = {
        let sim = Arc::clone(&sim);
        let state = Arc::clone(&state);
        let summary = out_dir.map(|d| d.join("summary.json"));
        thread::Builder::new()
            .name("senswich-run".into())
            .spawn(move || run_loop(sim, rx, state, speed, summary))?
    };
    Ok(RunHandle {
        sim,
        requests: tx,
        state,
        thread: Some(thread),
    })
}

impl RunHandle {
    pub fn state(&self) -> RunState {
        *self.state.0.lock().expect("run state poisoned")
    }

    pub fn status(&self) -> RunStatus {
        let state = self.state();
        let sim = self.read();
        let end = sim.end();
        RunStatus {
            state,
            sim_time: sim.now(),
            end,
            progress: if end.0 == 0 {
                1.0
            } else {
                sim.now().0 as f64 / end.0 as f64
            },
            speed: sim.config().speed,
            stats: sim.stats(),
            pending_downlinks: sim.downlinks().pending_len(),
        }
    }

    /// Read access to the simulation. Hold it briefly: the run thread
    /// waits for it.
    pub fn read(&self) -> RwLockReadGuard<'_, Simulation> {
        self.sim.read().expect("simulation lock poisoned")
    }

    pub fn shared(&self) -> Arc<RwLock<Simulation>> {
        Arc::clone(&self.sim)
    }

    /// Blocks until the scenario has been simulated to its end (or stopped).
    pub fn wait(&self) -> RunState {
        let (lock, cvar) = &*self.state;
        let guard = cvar
            .wait_while(lock.lock().expect("run state poisoned"), |s| {
                *s == RunState::Running
            })
            .expect("run state poisoned");
        *guard
    }

    pub fn wait_timeout(&self, timeout: Duration) -> RunState {
        let (lock, cvar) = &*self.state;
        let (guard, _) = cvar
            .wait_timeout_while(lock.lock().expect("run state poisoned"), timeout, |s| {
                *s == RunState::Running
            })
            .expect("run state poisoned");
        *guard
    }

    pub fn enqueue_downlink(
        &self,
        device_id: &str,
        fport: u16,
        payload_b64: &str,
    ) -> Result<DownlinkCommand, ControlError> {
        let (reply, rx) = mpsc::channel();
        self.requests
            .send(Request::Downlink {
                device_id: device_id.to_string(),
                fport,
                payload_b64: payload_b64.to_string(),
                reply,
            })
            .map_err(|_| ControlError::Stopped)?;
        Ok(rx.recv().map_err(|_| ControlError::Stopped)??)
    }

    pub fn subscribe(&self) -> Receiver<StreamEvent> {
        self.read().subscribe()
    }

    pub fn stop(&mut self) {
        let _ = self.requests.send(Request::Stop);
        if let Some(t) = self.thread.take() {
            if t.join().is_err() {
                warn!("run thread panicked");
            }
        }
    }
}

impl Drop for RunHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn set_state(state: &StateCell, s: RunState) {
    let (lock, cvar) = &**state;
    *lock.lock().expect("run state poisoned") = s;
    cvar.notify_all();
}

fn run_loop(
    sim: Arc<RwLock<Simulation>>,
    rx: Receiver<Request>,
    state: StateCell,
    speed: Speed,
    summary: Option<PathBuf>,
) {
    let write = || sim.write().expect("simulation lock poisoned");
    // returns false on stop
    let handle = |req: Request| -> bool {
        match req {
            Request::Downlink {
                device_id,
                fport,
                payload_b64,
                reply,
            } => {
                let r = write().enqueue_downlink(&device_id, fport, &payload_b64);
                let _ = reply.send(r);
                true
            }
            Request::Stop => false,
        }
    };
    let started = Instant::now();
    let mut completed = false;

    loop {
        let next = sim.read().expect("simulation lock poisoned").next_time();
        let Some(next) = next else {
            if !completed {
                completed = true;
                {
                    let mut s = write();
                    s.run_to_end();
                    s.flush_outputs();
                }
                if let Some(path) = &summary {
                    write_summary(&sim.read().expect("simulation lock poisoned"), path);
                }
                info!("scenario complete");
                set_state(&state, RunState::Completed);
            }
            // stay up for late commands until told to stop
            match rx.recv() {
                Ok(Request::Stop) => break,
                Ok(req) => {
                    handle(req);
                    continue;
                }
                Err(_) => break,
            }
        };

        match speed {
            Speed::Factor(k) => {
                let due = started + Duration::from_secs_f64(next.as_secs_f64() / k);
                let now = Instant::now();
                if due > now {
                    match rx.recv_timeout(due - now) {
                        Ok(req) => {
                            let paced = SimTime::from_secs_f64(started.elapsed().as_secs_f64() * k);
                            write().advance_clock(paced.min(next));
                            if handle(req) {
                                continue;
                            }
                            break;
                        }
                        Err(RecvTimeoutError::Timeout) => {}
                        Err(RecvTimeoutError::Disconnected) => break,
                    }
                }
                write().run_until(next);
            }
            Speed::Max => {
                let mut stop = false;
                while let Ok(req) = rx.try_recv() {
                    if !handle(req) {
                        stop = true;
                        break;
                    }
                }
                if stop {
                    break;
                }
                let mut s = write();
                for _ in 0..BATCH {
                    if s.step().is_none() {
                        break;
                    }
                }
            }
        }
    }
    if !completed {
        set_state(&state, RunState::Stopped);
    }
}

#[derive(Serialize)]
struct Summary {
    end: SimTime,
    stats: RunStats,
    nodes: Vec<crate::sim::NodeEnergy>,
}

fn write_summary(sim: &Simulation, path: &Path) {
    let summary = Summary {
        end: sim.end(),
        stats: sim.stats(),
        nodes: sim.energy(),
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    if let Err(e) = fs::write(path, text) {
        warn!(error = %e, path = %path.display(), "could not write run summary");
    }
}
