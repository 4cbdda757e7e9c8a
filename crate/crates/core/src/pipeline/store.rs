//! In-memory time-series store with retention and optional append-only
//! persistence.
//!
//! Persistence lines are `time,device_id,series,value`, where `time` is
//! seconds with millisecond precision (`217.360`) and `value` uses the
//! shortest decimal that round-trips the stored `f64`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::Series;
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub device_id: String,
    pub series: Series,
    pub time: SimTime,
    pub value: f64,
}

impl SeriesPoint {
    pub fn to_line(&self) -> String {
        format!("{},{},{},{}", self.time, self.device_id, self.series, self.value)
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let mut it = line.splitn(4, ',');
        let (Some(t), Some(dev), Some(series), Some(value)) = (it.next(), it.next(), it.next(), it.next())
        else {
            return Err(format!("expected 4 comma-separated fields: `{line}`"));
        };
        let secs: f64 = t.parse().map_err(|_| format!("bad time `{t}`"))?;
        Ok(SeriesPoint {
            device_id: dev.to_string(),
            series: series.parse().map_err(|e| format!("{e}"))?,
            time: SimTime::from_secs_f64(secs),
            value: value.parse().map_err(|_| format!("bad value `{value}`"))?,
        })
    }
}

/// Reads a persistence file back into points, in file order.
pub fn read_points<R: BufRead>(reader: R) -> Result<Vec<SeriesPoint>, String> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(SeriesPoint::parse_line(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    pub max_age: SimDuration,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self {
            max_age: SimDuration::from_secs(90 * 86_400),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Raw,
    Mean,
    Min,
    Max,
}

impl FromStr for Aggregation {
    type Err = QueryError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Aggregation::Raw),
            "mean" => Ok(Aggregation::Mean),
            "min" => Ok(Aggregation::Min),
            "max" => Ok(Aggregation::Max),
            other => Err(QueryError::UnknownAggregation(other.to_string())),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Raw => "raw",
            Aggregation::Mean => "mean",
            Aggregation::Min => "min",
            Aggregation::Max => "max",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("unknown series `{0}`")]
    UnknownSeries(String),
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("unknown aggregation `{0}` (expected raw|mean|min|max)")]
    UnknownAggregation(String),
    #[error("query range is inverted: from {from} > to {to}")]
    InvertedRange { from: SimTime, to: SimTime },
    #[error("aggregated queries need a bucket > 0")]
    ZeroBucket,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("point ({device_id}, {series}, {time}) already stored")]
    Duplicate {
        device_id: String,
        series: Series,
        time: SimTime,
    },
    #[error("non-finite value for ({device_id}, {series})")]
    NonFinite { device_id: String, series: Series },
    #[error("persistence write failed: {0}")]
    Io(#[from] io::Error),
}

type SeriesMap = BTreeMap<Series, BTreeMap<SimTime, f64>>;

pub struct TimeSeriesStore {
    data: BTreeMap<String, SeriesMap>,
    devices: BTreeSet<String>,
    retention: RetentionPolicy,
    len: usize,
    persist: Option<Box<dyn Write + Send + Sync>>,
}

impl fmt::Debug for TimeSeriesStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimeSeriesStore")
            .field("devices", &self.devices)
            .field("len", &self.len)
            .field("retention", &self.retention)
            .field("persistent", &self.persist.is_some())
            .finish()
    }
}

impl Default for TimeSeriesStore {
    fn default() -> Self {
        Self::new(RetentionPolicy::default())
    }
}

impl TimeSeriesStore {
    pub fn new(retention: RetentionPolicy) -> Self {
        Self {
            data: BTreeMap::new(),
            devices: BTreeSet::new(),
            retention,
            len: 0,
            persist: None,
        }
    }

    /// Appends every stored point to `w` from now on.
    pub fn with_persistence(mut self, w: Box<dyn Write + Send + Sync>) -> Self {
        self.persist = Some(w);
        self
    }

    pub fn retention(&self) -> RetentionPolicy {
        self.retention
    }

    pub fn register_device(&mut self, device_id: &str) {
        self.devices.insert(device_id.to_string());
    }

    pub fn has_device(&self, device_id: &str) -> bool {
        self.devices.contains(device_id)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Inserts all points or none.
    pub fn insert_batch(&mut self, points: &[SeriesPoint]) -> Result<(), StoreError> {
        let mut batch_keys = BTreeSet::new();
        for p in points {
            if !p.value.is_finite() {
                return Err(StoreError::NonFinite {
                    device_id: p.device_id.clone(),
                    series: p.series,
                });
            }
            let exists = self
                .data
                .get(&p.device_id)
                .and_then(|m| m.get(&p.series))
                .is_some_and(|s| s.contains_key(&p.time));
            if exists || !batch_keys.insert((&p.device_id, p.series, p.time)) {
                return Err(StoreError::Duplicate {
                    device_id: p.device_id.clone(),
                    series: p.series,
                    time: p.time,
                });
            }
        }
        for p in points {
            self.devices.insert(p.device_id.clone());
            self.data
                .entry(p.device_id.clone())
                .or_default()
                .entry(p.series)
                .or_default()
                .insert(p.time, p.value);
            self.len += 1;
        }
        if let Some(w) = self.persist.as_mut() {
            for p in points {
                writeln!(w, "{}", p.to_line())?;
            }
            w.flush()?;
        }
        Ok(())
    }

    /// Points of one series in `[from, to]`, time-ascending. Aggregated
    /// buckets start at `from`; empty buckets are omitted.
    pub fn query(
        &self,
        device_id: &str,
        series: &str,
        from: SimTime,
        to: SimTime,
        agg: Aggregation,
        bucket: SimDuration,
    ) -> Result<Vec<(SimTime, f64)>, QueryError> {
        let series: Series = series
            .parse()
            .map_err(|_| QueryError::UnknownSeries(series.to_string()))?;
        if !self.devices.contains(device_id) {
            return Err(QueryError::UnknownDevice(device_id.to_string()));
        }
        if from > to {
            return Err(QueryError::InvertedRange { from, to });
        }
        if agg != Aggregation::Raw && bucket.0 == 0 {
            return Err(QueryError::ZeroBucket);
        }
        let Some(points) = self.data.get(device_id).and_then(|m| m.get(&series)) else {
            return Ok(Vec::new());
        };
        let range = points.range(from..=to).map(|(t, v)| (*t, *v));
        if agg == Aggregation::Raw {
            return Ok(range.collect());
        }
        let mut out: Vec<(SimTime, f64)> = Vec::new();
        let mut current: Option<(u64, f64, f64, f64, usize)> = None; // idx, sum, min, max, n
        let close = |c: (u64, f64, f64, f64, usize), out: &mut Vec<(SimTime, f64)>| {
            let (idx, sum, min, max, n) = c;
            let v = match agg {
                Aggregation::Mean => sum / n as f64,
                Aggregation::Min => min,
                Aggregation::Max => max,
                Aggregation::Raw => unreachable!(),
            };
            out.push((SimTime(from.0 + idx * bucket.0), v));
        };
        for (t, v) in range {
            let idx = (t.0 - from.0) / bucket.0;
            match current.as_mut() {
                Some(c) if c.0 == idx => {
                    c.1 += v;
                    c.2 = c.2.min(v);
                    c.3 = c.3.max(v);
                    c.4 += 1;
                }
                _ => {
                    if let Some(c) = current.take() {
                        close(c, &mut out);
                    }
                    current = Some((idx, v, v, v, 1));
                }
            }
        }
        if let Some(c) = current {
            close(c, &mut out);
        }
        Ok(out)
    }

    /// Removes points older than `now - max_age`.
    pub fn expire(&mut self, now: SimTime) -> usize {
        let cutoff = now.saturating_sub(self.retention.max_age);
        let mut removed = 0;
        for series in self.data.values_mut() {
            for points in series.values_mut() {
                let keep = points.split_off(&cutoff);
                removed += points.len();
                *points = keep;
            }
        }
        self.len -= removed;
        removed
    }

    /// Every stored point ordered by (time, device, series).
    pub fn all_points(&self) -> Vec<SeriesPoint> {
        let mut out: Vec<SeriesPoint> = self
            .data
            .iter()
            .flat_map(|(dev, m)| {
                m.iter().flat_map(move |(s, pts)| {
                    pts.iter().map(move |(t, v)| SeriesPoint {
                        device_id: dev.clone(),
                        series: *s,
                        time: *t,
                        value: *v,
                    })
                })
            })
            .collect();
        sort_points(&mut out);
        out
    }
}

pub fn sort_points(points: &mut [SeriesPoint]) {
    points.sort_by(|a, b| (a.time, &a.device_id, a.series).cmp(&(b.time, &b.device_id, b.series)));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl FromStr for ExportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(format!("unknown export format `{other}` (expected csv|jsonl)")),
        }
    }
}

/// Writes points sorted by (time, device, series).
pub fn export_points<W: Write>(points: &[SeriesPoint], format: ExportFormat, mut out: W) -> io::Result<()> {
    let mut sorted = points.to_vec();
    sort_points(&mut sorted);
    match format {
        ExportFormat::Csv => {
            writeln!(out, "time,device_id,series,value")?;
            for p in &sorted {
                writeln!(out, "{}", p.to_line())?;
            }
        }
        ExportFormat::Jsonl => {
            for p in &sorted {
                let line = serde_json::json!({
                    "time": p.time.as_secs_f64(),
                    "device_id": p.device_id,
                    "series": p.series,
                    "value": p.value,
                });
                writeln!(out, "{line}")?;
            }
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(dev: &str, s: Series, secs: u64, v: f64) -> SeriesPoint {
        SeriesPoint {
            device_id: dev.into(),
            series: s,
            time: SimTime(secs * 1000),
            value: v,
        }
    }

    fn store_with(points: &[SeriesPoint]) -> TimeSeriesStore {
        let mut s = TimeSeriesStore::default();
        s.insert_batch(points).unwrap();
        s
    }

    #[test]
    fn raw_query_empty_range() {
        let s = store_with(&[pt("a", Series::Ph, 100, 8.0)]);
        let r = s
            .query(
                "a",
                "ph",
                SimTime(0),
                SimTime(50_000),
                Aggregation::Raw,
                SimDuration::ZERO,
            )
            .unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn mean_of_constant_one_bucket() {
        let pts: Vec<_> = (0..6)
            .map(|k| pt("a", Series::Temperature, 600 * k + 217, 20.0))
            .collect();
        let s = store_with(&pts);
        let r = s
            .query(
                "a",
                "temperature",
                SimTime(0),
                SimTime(3_600_000),
                Aggregation::Mean,
                SimDuration::from_secs(3_601),
            )
            .unwrap();
        assert_eq!(r, vec![(SimTime(0), 20.0)]);
    }

    #[test]
    fn max_and_min_laws() {
        let s = store_with(&[
            pt("a", Series::Ec, 1, 1.0),
            pt("a", Series::Ec, 2, 3.0),
            pt("a", Series::Ec, 3, 2.0),
        ]);
        let q = |agg| {
            s.query(
                "a",
                "ec",
                SimTime(0),
                SimTime(10_000),
                agg,
                SimDuration::from_secs(100),
            )
            .unwrap()
        };
        assert_eq!(q(Aggregation::Max), vec![(SimTime(0), 3.0)]);
        assert_eq!(q(Aggregation::Min), vec![(SimTime(0), 1.0)]);
    }

    #[test]
    fn buckets_align_to_from() {
        let s = store_with(&[
            pt("a", Series::Ec, 10, 1.0),
            pt("a", Series::Ec, 14, 3.0),
            pt("a", Series::Ec, 16, 5.0),
            pt("a", Series::Ec, 40, 7.0),
        ]);
        let r = s
            .query(
                "a",
                "ec",
                SimTime(10_000),
                SimTime(60_000),
                Aggregation::Mean,
                SimDuration::from_secs(5),
            )
            .unwrap();
        assert_eq!(
            r,
            vec![
                (SimTime(10_000), 2.0),
                (SimTime(15_000), 5.0),
                (SimTime(40_000), 7.0)
            ]
        );
    }

    #[test]
    fn query_errors() {
        let mut s = TimeSeriesStore::default();
        s.register_device("a");
        let any =
            |dev: &str, series: &str, from, to, agg, bucket| s.query(dev, series, from, to, agg, bucket);
        assert_eq!(
            any(
                "a",
                "salinity",
                SimTime(0),
                SimTime(1),
                Aggregation::Raw,
                SimDuration::ZERO
            ),
            Err(QueryError::UnknownSeries("salinity".into()))
        );
        assert_eq!(
            any(
                "zz",
                "ph",
                SimTime(0),
                SimTime(1),
                Aggregation::Raw,
                SimDuration::ZERO
            ),
            Err(QueryError::UnknownDevice("zz".into()))
        );
        assert_eq!(
            any(
                "a",
                "ph",
                SimTime(0),
                SimTime(1),
                Aggregation::Mean,
                SimDuration::ZERO
            ),
            Err(QueryError::ZeroBucket)
        );
        assert!(matches!(
            any(
                "a",
                "ph",
                SimTime(5),
                SimTime(1),
                Aggregation::Raw,
                SimDuration::ZERO
            ),
            Err(QueryError::InvertedRange { .. })
        ));
        // registered but silent device
        assert_eq!(
            any(
                "a",
                "ph",
                SimTime(0),
                SimTime(1),
                Aggregation::Raw,
                SimDuration::ZERO
            ),
            Ok(vec![])
        );
    }

    #[test]
    fn duplicates_rejected_atomically() {
        let mut s = store_with(&[pt("a", Series::Ph, 1, 8.0)]);
        let err = s.insert_batch(&[pt("a", Series::Ec, 1, 3.0), pt("a", Series::Ph, 1, 8.1)]);
        assert!(matches!(err, Err(StoreError::Duplicate { .. })));
        assert_eq!(s.len(), 1);
        let err = s.insert_batch(&[pt("a", Series::Do, 9, f64::NAN)]);
        assert!(matches!(err, Err(StoreError::NonFinite { .. })));
    }

    #[test]
    fn expiry_fresh_and_stale() {
        let mut s = TimeSeriesStore::new(RetentionPolicy {
            max_age: SimDuration::from_secs(100),
        });
        s.insert_batch(&[pt("a", Series::Ph, 50, 1.0), pt("a", Series::Ph, 60, 1.0)])
            .unwrap();
        assert_eq!(s.expire(SimTime(100_000)), 0);
        assert_eq!(s.expire(SimTime(1_000_000)), 2);
        assert!(s.is_empty());
    }

    #[test]
    fn persistence_lines_parse_back() {
        let p = pt("node-1", Series::GpsLat, 217, 45.4408);
        assert_eq!(p.to_line(), "217.000,node-1,gps_lat,45.4408");
        assert_eq!(SeriesPoint::parse_line(&p.to_line()).unwrap(), p);
        assert!(SeriesPoint::parse_line("1.0,a,ph").is_err());
        assert!(SeriesPoint::parse_line("1.0,a,salinity,3").is_err());
    }

    #[test]
    fn export_formats() {
        let pts = vec![pt("b", Series::Ph, 2, 8.0), pt("a", Series::Ec, 2, 40.5)];
        let mut csv = Vec::new();
        export_points(&pts, ExportFormat::Csv, &mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "time,device_id,series,value\n2.000,a,ec,40.5\n2.000,b,ph,8\n"
        );
        let mut jsonl = Vec::new();
        export_points(&pts, ExportFormat::Jsonl, &mut jsonl).unwrap();
        let text = String::from_utf8(jsonl).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["series"], "ec");
        assert_eq!(first["time"], 2.0);
    }
}
