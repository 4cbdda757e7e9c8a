//! Scenario description: nodes, gateways, run length and pacing.
//!
//! Scenarios are written in TOML (or JSON over the API). Everything except
//! node and gateway positions has a default:
//!
//! ```toml
//! seed = 42
//! duration_s = 86400
//! speed = "max"          # or a real-time multiplier such as 60
//!
//! [[gateways]]
//! id = "gw-lido"
//! lat = 45.418
//! lon = 12.371
//! range_km = 15
//!
//! [[nodes]]
//! id = "node-1"
//! lat = 45.437
//! lon = 12.333
//! profile = "regulator"  # or "ideal"
//!
//! [nodes.calibration.ph]
//! gain = 1.02
//! offset = -0.05
//!
//! [nodes.environment.temperature]
//! signal = { kind = "diurnal", mean = 17.5, amplitude = 4.0 }
//! noise_sd = 0.05
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::{Gateway, DEFAULT_RANGE_KM};
use crate::node::{
    BatteryPack, Calibration, CalibrationTable, EnvironmentSpec, GpsConfig, NodeConfig, ProfileKind, Sensor,
    TimeToFix,
};
use crate::pipeline::RetentionPolicy;
use crate::time::SimDuration;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpeedRepr", into = "SpeedRepr")]
pub enum Speed {
    /// As fast as possible.
    #[default]
    Max,
    /// Simulated seconds per wall-clock second.
    Factor(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum SpeedRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<SpeedRepr> for Speed {
    type Error = String;
    fn try_from(r: SpeedRepr) -> Result<Self, Self::Error> {
        match r {
            SpeedRepr::Number(x) => Ok(Speed::Factor(x)),
            SpeedRepr::Text(s) => s.parse(),
        }
    }
}

impl From<Speed> for SpeedRepr {
    fn from(s: Speed) -> Self {
        match s {
            Speed::Max => SpeedRepr::Text("max".into()),
            Speed::Factor(x) => SpeedRepr::Number(x),
        }
    }
}

impl std::str::FromStr for Speed {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "max" {
            return Ok(Speed::Max);
        }
        s.parse::<f64>()
            .map(Speed::Factor)
            .map_err(|_| format!("speed must be a number or \"max\", got `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayDef {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default = "default_range")]
    pub range_km: f64,
}

fn default_range() -> f64 {
    DEFAULT_RANGE_KM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDef {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default = "default_period")]
    pub sampling_period_s: f64,
    #[serde(default = "default_profile")]
    pub profile: ProfileKind,
    #[serde(default)]
    pub calibration: BTreeMap<Sensor, Calibration>,
    #[serde(default)]
    pub battery: BatteryPack,
    #[serde(default)]
    pub gps: GpsConfig,
    #[serde(default)]
    pub environment: Option<EnvironmentSpec>,
    /// Defaults to a value derived from the scenario seed and node index.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_period() -> f64 {
    600.0
}

fn default_profile() -> ProfileKind {
    ProfileKind::Regulator
}

impl NodeDef {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64) -> Self {
        Self {
            id: id.into(),
            lat,
            lon,
            sampling_period_s: default_period(),
            profile: default_profile(),
            calibration: BTreeMap::new(),
            battery: BatteryPack::default(),
            gps: GpsConfig::default(),
            environment: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetentionDef {
    pub max_age_days: f64,
}

impl Default for RetentionDef {
    fn default() -> Self {
        Self { max_age_days: 90.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default)]
    pub speed: Speed,
    #[serde(default)]
    pub retention: RetentionDef,
    /// Probability that an uplink is lost regardless of coverage.
    #[serde(default)]
    pub loss_probability: f64,
    #[serde(default = "default_rx_delay")]
    pub rx_delay_s: f64,
    #[serde(default)]
    pub gateways: Vec<GatewayDef>,
    #[serde(default)]
    pub nodes: Vec<NodeDef>,
}

fn default_rx_delay() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub struct ConfigError {
    pub errors: Vec<FieldError>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid scenario:")?;
        for e in &self.errors {
            write!(f, "\n  {}: {}", e.field, e.message)?;
        }
        Ok(())
    }
}

impl ConfigError {
    fn single(field: &str, message: impl Into<String>) -> Self {
        Self {
            errors: vec![FieldError {
                field: field.to_string(),
                message: message.into(),
            }],
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::single("<file>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::single("<body>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Three gateways around a lagoon and three floating nodes inside it.
    pub fn lagoon_default() -> Self {
        Self {
            seed: 1,
            duration_s: 86_400.0,
            speed: Speed::Max,
            retention: RetentionDef::default(),
            loss_probability: 0.0,
            rx_delay_s: default_rx_delay(),
            gateways: vec![
                GatewayDef {
                    id: "gw-north".into(),
                    lat: 45.497,
                    lon: 12.420,
                    range_km: DEFAULT_RANGE_KM,
                },
                GatewayDef {
                    id: "gw-centre".into(),
                    lat: 45.418,
                    lon: 12.371,
                    range_km: DEFAULT_RANGE_KM,
                },
                GatewayDef {
                    id: "gw-south".into(),
                    lat: 45.226,
                    lon: 12.279,
                    range_km: DEFAULT_RANGE_KM,
                },
            ],
            nodes: vec![
                NodeDef::new("node-1", 45.4370, 12.3330),
                NodeDef::new("node-2", 45.4830, 12.4700),
                NodeDef::new("node-3", 45.2890, 12.2560),
            ],
        }
    }

    pub fn duration(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.duration_s)
    }

    pub fn retention_policy(&self) -> RetentionPolicy {
        RetentionPolicy {
            max_age: SimDuration::from_secs_f64(self.retention.max_age_days * 86_400.0),
        }
    }

    pub fn gateways(&self) -> Vec<Gateway> {
        self.gateways
            .iter()
            .map(|g| Gateway::new(g.id.clone(), g.lat, g.lon, g.range_km))
            .collect()
    }

    pub fn node_seed(&self, index: usize) -> u64 {
        self.nodes[index].seed.unwrap_or_else(|| {
            self.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(index as u64 + 1)
        })
    }

    pub fn node_configs(&self) -> Vec<(NodeConfig, EnvironmentSpec)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let cfg = NodeConfig {
                    device_id: n.id.clone(),
                    lat: n.lat,
                    lon: n.lon,
                    sampling_period: SimDuration::from_secs_f64(n.sampling_period_s),
                    profile: n.profile,
                    calibration: CalibrationTable(n.calibration.clone()),
                    pack: n.battery,
                    gps: n.gps,
                    seed: self.node_seed(i),
                };
                (cfg, n.environment.clone().unwrap_or_default())
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let mut err = |field: String, message: String| errors.push(FieldError { field, message });

        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            err("duration_s".into(), "must be > 0".into());
        }
        if let Speed::Factor(x) = self.speed {
            if !(x >= 1.0 && x.is_finite()) {
                err(
                    "speed".into(),
                    "real-time multiplier must be >= 1, or \"max\"".into(),
                );
            }
        }
        if !(self.retention.max_age_days > 0.0 && self.retention.max_age_days.is_finite()) {
            err("retention.max_age_days".into(), "must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.loss_probability) {
            err("loss_probability".into(), "must be within [0, 1]".into());
        }
        if !(self.rx_delay_s >= 0.0 && self.rx_delay_s.is_finite()) {
            err("rx_delay_s".into(), "must be >= 0".into());
        }
        if self.gateways.is_empty() {
            err("gateways".into(), "at least one gateway is required".into());
        }
        if self.nodes.is_empty() {
            err("nodes".into(), "at least one node is required".into());
        }

        let mut ids = HashSet::new();
        for (i, g) in self.gateways.iter().enumerate() {
            let f = |name: &str| format!("gateways[{i}].{name}");
            if g.id.is_empty() || !ids.insert(g.id.clone()) {
                err(f("id"), "must be non-empty and unique".into());
            }
            check_position(g.lat, g.lon, &f, &mut err);
            if !(g.range_km > 0.0 && g.range_km.is_finite()) {
                err(f("range_km"), "must be > 0".into());
            }
        }

        let mut ids = HashSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let f = |name: &str| format!("nodes[{i}].{name}");
            if n.id.is_empty() || n.id.contains([',', '\n', '\r']) {
                err(
                    f("id"),
                    "must be non-empty and free of commas and newlines".into(),
                );
            } else if !ids.insert(n.id.clone()) {
                err(f("id"), format!("duplicate node id `{}`", n.id));
            }
            check_position(n.lat, n.lon, &f, &mut err);
            // active part of the cycle is 217.36 s
            if !(n.sampling_period_s > 217.36 && n.sampling_period_s.is_finite()) {
                err(
                    f("sampling_period_s"),
                    "must exceed the 217.36 s active part of the cycle".into(),
                );
            }
            for (sensor, cal) in &n.calibration {
                if Calibration::new(cal.gain, cal.offset).is_err() {
                    err(
                        f(&format!("calibration.{}", sensor.name())),
                        "gain must be finite and non-zero".into(),
                    );
                }
            }
            let b = &n.battery;
            if !(b.cell_capacity_mah > 0.0 && b.cell_energy_wh > 0.0 && b.series > 0 && b.parallel > 0) {
                err(
                    f("battery"),
                    "capacity, energy and cell counts must be > 0".into(),
                );
            }
            if !(n.gps.searching_current_ma >= 0.0 && n.gps.searching_current_ma.is_finite()) {
                err(f("gps.searching_current_ma"), "must be >= 0".into());
            }
            if !(n.gps.error_deg >= 0.0 && n.gps.error_deg.is_finite()) {
                err(f("gps.error_deg"), "must be >= 0".into());
            }
            match n.gps.time_to_fix {
                TimeToFix::Uniform { min_s, max_s }
                    if !(0.0 <= min_s && min_s <= max_s && max_s.is_finite()) =>
                {
                    err(
                        f("gps.time_to_fix"),
                        "uniform bounds need 0 <= min_s <= max_s".into(),
                    )
                }
                TimeToFix::Fixed { secs } if !(secs >= 0.0 && secs.is_finite()) => {
                    err(f("gps.time_to_fix"), "secs must be >= 0".into())
                }
                _ => {}
            }
            if let Some(env) = &n.environment {
                for (sensor, s) in &env.0 {
                    if let Err(m) = s.signal.validate() {
                        err(f(&format!("environment.{}.signal", sensor.name())), m);
                    }
                    if !(s.noise_sd >= 0.0 && s.noise_sd.is_finite()) {
                        err(
                            f(&format!("environment.{}.noise_sd", sensor.name())),
                            "must be >= 0".into(),
                        );
                    }
                }
            }
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { errors })
        }
    }
}

fn check_position(lat: f64, lon: f64, f: &dyn Fn(&str) -> String, err: &mut impl FnMut(String, String)) {
    if !(-90.0..=90.0).contains(&lat) {
        err(f("lat"), "must be within [-90, 90]".into());
    }
    if !(-180.0..=180.0).contains(&lon) {
        err(f("lon"), "must be within [-180, 180]".into());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        duration_s = 3600
        [[gateways]]
        id = "gw"
        lat = 45.4
        lon = 12.3
        [[nodes]]
        id = "node-1"
        lat = 45.41
        lon = 12.31
    "#;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = ScenarioConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.speed, Speed::Max);
        assert_eq!(cfg.gateways[0].range_km, 15.0);
        assert_eq!(cfg.nodes[0].sampling_period_s, 600.0);
        assert_eq!(cfg.nodes[0].profile, ProfileKind::Regulator);
        assert_eq!(
            cfg.retention_policy().max_age,
            SimDuration::from_secs(90 * 86_400)
        );
    }

    #[test]
    fn full_node_definition_parses() {
        let text = format!(
            "{MINIMAL}\n{}",
            r#"
            sampling_period_s = 900
            profile = "ideal"
            seed = 5
            [nodes.calibration.ph]
            gain = 1.1
            offset = -0.2
            [nodes.gps]
            error_deg = 0.0002
            time_to_fix = { kind = "never" }
            [nodes.environment.temperature]
            signal = { kind = "constant", value = 20.0 }
            "#
        );
        let cfg = ScenarioConfig::from_toml(&text).unwrap();
        let n = &cfg.nodes[0];
        assert_eq!(n.profile, ProfileKind::Ideal);
        assert_eq!(n.calibration[&Sensor::Ph].gain, 1.1);
        assert_eq!(n.gps.time_to_fix, TimeToFix::Never);
        assert_eq!(cfg.node_seed(0), 5);
        let (nc, env) = &cfg.node_configs()[0];
        assert_eq!(nc.sampling_period, SimDuration::from_secs(900));
        // unspecified sensors keep their defaults once completed
        assert_eq!(env.completed().0.len(), 6);
    }

    #[test]
    fn speed_forms() {
        let cfg = ScenarioConfig::from_toml(&format!("speed = 60\n{MINIMAL}")).unwrap();
        assert_eq!(cfg.speed, Speed::Factor(60.0));
        assert!(ScenarioConfig::from_toml(&format!("speed = \"fast\"\n{MINIMAL}")).is_err());
        assert!(ScenarioConfig::from_toml(&format!("speed = 0.5\n{MINIMAL}")).is_err());
    }

    #[test]
    fn field_level_errors() {
        let mut cfg = ScenarioConfig::from_toml(MINIMAL).unwrap();
        cfg.duration_s = 0.0;
        cfg.nodes[0].lat = 123.0;
        cfg.nodes.push(NodeDef::new("node-1", 45.0, 12.0));
        cfg.gateways[0].range_km = 0.0;
        let e = cfg.validate().unwrap_err();
        let fields: Vec<&str> = e.errors.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"duration_s"));
        assert!(fields.contains(&"nodes[0].lat"));
        assert!(fields.contains(&"nodes[1].id"));
        assert!(fields.contains(&"gateways[0].range_km"));
    }

    #[test]
    fn empty_lists_rejected() {
        let e = ScenarioConfig::from_toml("duration_s = 10").unwrap_err();
        assert_eq!(e.errors.len(), 2);
    }

    #[test]
    fn default_scenario_is_valid_and_round_trips() {
        let cfg = ScenarioConfig::lagoon_default();
        cfg.validate().unwrap();
        let back = ScenarioConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_json(&json).unwrap(), cfg);
    }

    #[test]
    fn default_nodes_are_covered() {
        let cfg = ScenarioConfig::lagoon_default();
        let gws = cfg.gateways();
        for n in &cfg.nodes {
            assert!(gws.iter().any(|g| g.covers(n.lat, n.lon)), "{} uncovered", n.id);
        }
    }
}
