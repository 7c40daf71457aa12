//! ADS-B parsing, 1 Hz trajectory assembly with gap imputation, arrival
//! extraction and label outlier removal.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::airspace::{
    crossings, heading_delta, match_threshold, normalize_deg, physical_runway, zone_of_crossing, AirspaceGeometry,
    Boundary, Direction, EntryZone, LatLon, RunwayLayout,
};
use crate::error::{CoreError, Result};

pub const DEFAULT_MAX_GAP: i64 = 10;
/// RECAT code assigned when the aircraft type cannot be resolved (Upper Medium).
pub const RECAT_FALLBACK: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdsbPoint {
    pub aircraft_id: String,
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    pub ground_speed: f64,
    pub heading: f64,
    pub imputed: bool,
}

/// One report of a trajectory; the aircraft id lives on the trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    pub ground_speed: f64,
    pub heading: f64,
    pub imputed: bool,
}

impl TrackPoint {
    pub fn new(timestamp: i64, p: LatLon, alt: f64, ground_speed: f64, heading: f64) -> Self {
        Self { timestamp, lat: p.lat, lon: p.lon, alt, ground_speed, heading, imputed: false }
    }

    pub fn position(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub aircraft_id: String,
    pub points: Vec<TrackPoint>,
}

impl Trajectory {
    pub fn start(&self) -> i64 {
        self.points.first().map_or(0, |p| p.timestamp)
    }

    pub fn end(&self) -> i64 {
        self.points.last().map_or(0, |p| p.timestamp)
    }

    /// Point at `t`, by offset on the 1 Hz grid.
    pub fn at(&self, t: i64) -> Option<&TrackPoint> {
        let i = usize::try_from(t - self.start()).ok()?;
        self.points.get(i).filter(|p| p.timestamp == t)
    }

    /// Points with timestamp in `[from, to]`.
    pub fn window(&self, from: i64, to: i64) -> &[TrackPoint] {
        let lo = self.points.partition_point(|p| p.timestamp < from);
        let hi = self.points.partition_point(|p| p.timestamp <= to);
        &self.points[lo..hi.max(lo)]
    }

    pub fn to_points(&self) -> impl Iterator<Item = AdsbPoint> + '_ {
        self.points.iter().map(|p| AdsbPoint {
            aircraft_id: self.aircraft_id.clone(),
            timestamp: p.timestamp,
            lat: p.lat,
            lon: p.lon,
            alt: p.alt,
            ground_speed: p.ground_speed,
            heading: p.heading,
            imputed: p.imputed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalRecord {
    pub aircraft_id: String,
    pub runway: String,
    pub threshold: String,
    pub t_trc: i64,
    pub t_thr: i64,
    pub label_seconds: i64,
    pub entry_zone: EntryZone,
    pub recat: u8,
    pub recat_resolved: bool,
}

/// Header names of the seven required ADS-B columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub id: String,
    pub time: String,
    pub lat: String,
    pub lon: String,
    pub alt: String,
    pub gs: String,
    pub trk: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            time: "time".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            alt: "alt".into(),
            gs: "gs".into(),
            trk: "trk".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedAdsb {
    pub points: Vec<AdsbPoint>,
    pub skipped: usize,
}

fn parse_time(s: &str) -> Option<i64> {
    let s = s.trim();
    s.parse::<i64>().ok().or_else(|| {
        let v: f64 = s.parse().ok()?;
        (v.is_finite() && v.fract() == 0.0).then_some(v as i64)
    })
}

fn parse_row(rec: &csv::StringRecord, idx: &[usize; 7]) -> Option<AdsbPoint> {
    let field = |k: usize| rec.get(idx[k]).map(str::trim);
    let num = |k: usize| field(k)?.parse::<f64>().ok().filter(|v| v.is_finite());
    let id = field(0)?;
    if id.is_empty() {
        return None;
    }
    let p = AdsbPoint {
        aircraft_id: id.to_string(),
        timestamp: parse_time(field(1)?)?,
        lat: num(2)?,
        lon: num(3)?,
        alt: num(4)?,
        ground_speed: num(5)?,
        heading: normalize_deg(num(6)?),
        imputed: false,
    };
    let valid = (-90.0..=90.0).contains(&p.lat) && (-180.0..=180.0).contains(&p.lon) && p.ground_speed >= 0.0;
    valid.then_some(p)
}

/// Reads an ADS-B CSV. Malformed rows are skipped and counted.
pub fn parse_adsb<R: Read>(input: R, schema: &ColumnMap) -> Result<ParsedAdsb> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CoreError::Schema(format!("missing required column '{name}'")))
    };
    let idx = [
        find(&schema.id)?,
        find(&schema.time)?,
        find(&schema.lat)?,
        find(&schema.lon)?,
        find(&schema.alt)?,
        find(&schema.gs)?,
        find(&schema.trk)?,
    ];
    let mut out = ParsedAdsb::default();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                out.skipped += 1;
                continue;
            }
        };
        match parse_row(&rec, &idx) {
            Some(p) => out.points.push(p),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Writes points in the canonical `id,time,lat,lon,alt,gs,trk` layout.
pub fn write_adsb<'a, W: Write>(out: W, points: impl IntoIterator<Item = &'a AdsbPoint>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "time", "lat", "lon", "alt", "gs", "trk"])?;
    for p in points {
        w.write_record(&[
            p.aircraft_id.clone(),
            p.timestamp.to_string(),
            format!("{:.7}", p.lat),
            format!("{:.7}", p.lon),
            format!("{:.1}", p.alt),
            format!("{:.2}", p.ground_speed),
            format!("{:.2}", p.heading),
        ])?;
    }
    w.flush().map_err(|e| CoreError::io("<adsb csv>", e))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assembled {
    pub trajectories: Vec<Trajectory>,
    /// Gaps filled linearly because the segment had fewer than three real points.
    pub linear_fallbacks: usize,
}

/// Lagrange quadratic through `(x[k], y[k])` evaluated at `t`.
fn quadratic(x: [f64; 3], y: [f64; 3], t: f64) -> f64 {
    let l0 = (t - x[1]) * (t - x[2]) / ((x[0] - x[1]) * (x[0] - x[2]));
    let l1 = (t - x[0]) * (t - x[2]) / ((x[1] - x[0]) * (x[1] - x[2]));
    let l2 = (t - x[0]) * (t - x[1]) / ((x[2] - x[0]) * (x[2] - x[1]));
    y[0] * l0 + y[1] * l1 + y[2] * l2
}

/// Fills the 1 Hz gaps of a segment of real points (all gaps ≤ max_gap).
fn fill_segment(real: &[TrackPoint], fallbacks: &mut usize) -> Vec<TrackPoint> {
    let mut out = Vec::with_capacity((real[real.len() - 1].timestamp - real[0].timestamp + 1) as usize);
    for i in 0..real.len() - 1 {
        let (a, b) = (&real[i], &real[i + 1]);
        out.push(*a);
        let gap = b.timestamp - a.timestamp;
        if gap < 2 {
            continue;
        }
        // third support point: nearest real neighbour outside the gap, earlier on ties
        let before = (i > 0).then(|| (a.timestamp - real[i - 1].timestamp, i - 1));
        let after = real.get(i + 2).map(|p| (p.timestamp - b.timestamp, i + 2));
        let third = match (before, after) {
            (Some(x), Some(y)) => Some(if x.0 <= y.0 { x.1 } else { y.1 }),
            (x, y) => x.or(y).map(|v| v.1),
        };
        let support = third.map(|k| {
            let mut idx = [k, i, i + 1];
            idx.sort_unstable();
            idx.map(|j| &real[j])
        });
        if support.is_none() {
            *fallbacks += 1;
        }
        let t0 = a.timestamp;
        for t in t0 + 1..b.timestamp {
            let frac = (t - t0) as f64 / gap as f64;
            let lerp = |u: f64, v: f64| u + frac * (v - u);
            let (lat, lon) = match support {
                Some(s) => {
                    let x = s.map(|p| (p.timestamp - t0) as f64);
                    let tt = (t - t0) as f64;
                    (quadratic(x, s.map(|p| p.lat), tt), quadratic(x, s.map(|p| p.lon), tt))
                }
                None => (lerp(a.lat, b.lat), lerp(a.lon, b.lon)),
            };
            out.push(TrackPoint {
                timestamp: t,
                lat,
                lon,
                alt: lerp(a.alt, b.alt),
                ground_speed: lerp(a.ground_speed, b.ground_speed),
                heading: normalize_deg(a.heading + frac * heading_delta(a.heading, b.heading)),
                imputed: true,
            });
        }
    }
    out.push(real[real.len() - 1]);
    out
}

/// Groups points per aircraft, imputes gaps up to `max_gap` seconds and
/// splits tracks at longer gaps. Fragments after the first are named
/// `<id>#<k>`. Duplicate timestamps keep the first report.
pub fn assemble_trajectories(points: Vec<AdsbPoint>, max_gap: i64) -> Result<Assembled> {
    if max_gap < 1 {
        return Err(CoreError::Config(format!("max_gap must be >= 1, got {max_gap}")));
    }
    let mut groups: BTreeMap<String, Vec<TrackPoint>> = BTreeMap::new();
    for p in points {
        groups.entry(p.aircraft_id).or_default().push(TrackPoint {
            timestamp: p.timestamp,
            lat: p.lat,
            lon: p.lon,
            alt: p.alt,
            ground_speed: p.ground_speed,
            heading: p.heading,
            imputed: p.imputed,
        });
    }
    let mut out = Assembled::default();
    for (id, mut pts) in groups {
        pts.sort_by_key(|p| p.timestamp);
        pts.dedup_by_key(|p| p.timestamp);
        let mut fragment = 0;
        let mut start = 0;
        for end in 1..=pts.len() {
            let split = end == pts.len() || pts[end].timestamp - pts[end - 1].timestamp > max_gap;
            if !split {
                continue;
            }
            let seg = &pts[start..end];
            start = end;
            if seg.len() < 2 {
                continue;
            }
            let name = if fragment == 0 { id.clone() } else { format!("{id}#{fragment}") };
            fragment += 1;
            out.trajectories.push(Trajectory { aircraft_id: name, points: fill_segment(seg, &mut out.linear_fallbacks) });
        }
    }
    Ok(out)
}

/// Arrival records for every trajectory that crosses the TRC inbound and then
/// reaches a threshold, using the last inbound crossing before landing.
/// Sorted by `(t_trc, aircraft_id)`.
pub fn extract_arrivals(trajs: &[Trajectory], geometry: &AirspaceGeometry, runways: &RunwayLayout) -> Vec<ArrivalRecord> {
    let mut out: Vec<ArrivalRecord> = trajs
        .iter()
        .filter_map(|traj| {
            let (threshold, t_thr) = match_threshold(traj, runways)?;
            let crossing = crossings(traj, geometry, Boundary::Trc)
                .into_iter()
                .rfind(|c| c.direction == Direction::Inbound && c.second() < t_thr)?;
            let t_trc = crossing.second();
            Some(ArrivalRecord {
                aircraft_id: traj.aircraft_id.clone(),
                runway: physical_runway(&threshold),
                threshold,
                t_trc,
                t_thr,
                label_seconds: t_thr - t_trc,
                entry_zone: zone_of_crossing(geometry, &crossing),
                recat: RECAT_FALLBACK,
                recat_resolved: false,
            })
        })
        .collect();
    out.sort_by(|a, b| (a.t_trc, &a.aircraft_id).cmp(&(b.t_trc, &b.aircraft_id)));
    out
}

/// Mean and population standard deviation of the labels.
pub fn label_stats(records: &[ArrivalRecord]) -> (f64, f64) {
    let n = records.len() as f64;
    if records.is_empty() {
        return (0.0, 0.0);
    }
    let mean = records.iter().map(|r| r.label_seconds as f64).sum::<f64>() / n;
    let var = records.iter().map(|r| (r.label_seconds as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Drops records farther than three standard deviations from `mean`.
pub fn remove_outliers_with(records: Vec<ArrivalRecord>, mean: f64, std: f64) -> Vec<ArrivalRecord> {
    if std == 0.0 {
        return records;
    }
    records.into_iter().filter(|r| (r.label_seconds as f64 - mean).abs() <= 3.0 * std).collect()
}

/// Single-pass 3σ label filter.
pub fn remove_outliers(records: Vec<ArrivalRecord>) -> Vec<ArrivalRecord> {
    if records.len() < 2 {
        return records;
    }
    let (mean, std) = label_stats(&records);
    remove_outliers_with(records, mean, std)
}
