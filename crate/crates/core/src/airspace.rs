//! Spherical geodesy and terminal-area geometry: research circle (TRC),
//! extended boundary (TBX), entry zones, runway thresholds and runway
//! operation features.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ingest::{ArrivalRecord, TrackPoint, Trajectory};

pub const EARTH_RADIUS_NM: f64 = 3440.065;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub const fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// Haversine distance in nautical miles.
pub fn great_circle_nm(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = p2 - p1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_NM * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing in degrees, `[0, 360)`.
pub fn bearing_deg(from: LatLon, to: LatLon) -> f64 {
    let (p1, p2) = (from.lat.to_radians(), to.lat.to_radians());
    let dlon = (to.lon - from.lon).to_radians();
    let y = dlon.sin() * p2.cos();
    let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dlon.cos();
    normalize_deg(y.atan2(x).to_degrees())
}

/// Point reached from `from` after `dist_nm` along initial `bearing`.
pub fn destination(from: LatLon, bearing: f64, dist_nm: f64) -> LatLon {
    let d = dist_nm / EARTH_RADIUS_NM;
    let b = bearing.to_radians();
    let p1 = from.lat.to_radians();
    let l1 = from.lon.to_radians();
    let p2 = (p1.sin() * d.cos() + p1.cos() * d.sin() * b.cos()).asin();
    let l2 = l1 + (b.sin() * d.sin() * p1.cos()).atan2(d.cos() - p1.sin() * p2.sin());
    LatLon::new(p2.to_degrees(), (l2.to_degrees() + 540.0) % 360.0 - 180.0)
}

pub fn normalize_deg(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Signed smallest rotation from heading `a` to heading `b`, in `(-180, 180]`.
pub fn heading_delta(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl BBox {
    pub fn contains(&self, p: LatLon) -> bool {
        (self.lon_min..=self.lon_max).contains(&p.lon) && (self.lat_min..=self.lat_max).contains(&p.lat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AirspaceGeometry {
    pub center: LatLon,
    pub trc_radius_nm: f64,
    pub tbx_radius_nm: f64,
    pub raster_bbox: BBox,
}

impl Default for AirspaceGeometry {
    /// Singapore Changi reference point with a 50 NM research circle.
    fn default() -> Self {
        Self {
            center: LatLon::new(1.3644, 103.9915),
            trc_radius_nm: 50.0,
            tbx_radius_nm: 60.0,
            raster_bbox: BBox { lon_min: 103.0, lon_max: 105.0, lat_min: 0.5, lat_max: 2.25 },
        }
    }
}

impl AirspaceGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.trc_radius_nm > 0.0 && self.trc_radius_nm < self.tbx_radius_nm) {
            return Err(CoreError::Geometry(format!(
                "need 0 < trc ({}) < tbx ({})",
                self.trc_radius_nm, self.tbx_radius_nm
            )));
        }
        let r = self.trc_radius_nm;
        for b in [0.0, 90.0, 180.0, 270.0] {
            if !self.raster_bbox.contains(destination(self.center, b, r)) {
                return Err(CoreError::Geometry("raster bbox does not contain the TRC disc".into()));
            }
        }
        Ok(())
    }

    pub fn distance_nm(&self, p: LatLon) -> f64 {
        great_circle_nm(self.center, p)
    }

    pub fn radius(&self, boundary: Boundary) -> f64 {
        match boundary {
            Boundary::Trc => self.trc_radius_nm,
            Boundary::Tbx => self.tbx_radius_nm,
        }
    }

    pub fn in_trc(&self, p: LatLon) -> bool {
        self.distance_nm(p) <= self.trc_radius_nm
    }

    /// Annulus between the research circle and the extended boundary.
    pub fn in_tbe(&self, p: LatLon) -> bool {
        let d = self.distance_nm(p);
        d > self.trc_radius_nm && d <= self.tbx_radius_nm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Trc,
    Tbx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Inbound,
    Outbound,
}

/// A boundary crossing: interpolated time and position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub time: f64,
    pub position: LatLon,
    pub direction: Direction,
}

impl Crossing {
    /// Crossing time rounded to the 1 Hz grid.
    pub fn second(&self) -> i64 {
        self.time.round() as i64
    }
}

/// Every crossing of `boundary`, in time order. A point exactly on the
/// boundary is the crossing point.
pub fn crossings(traj: &Trajectory, geometry: &AirspaceGeometry, boundary: Boundary) -> Vec<Crossing> {
    let r = geometry.radius(boundary);
    let dist: Vec<f64> = traj.points.iter().map(|p| geometry.distance_nm(p.position())).collect();
    let mut out = Vec::new();
    for i in 1..traj.points.len() {
        let (d0, d1) = (dist[i - 1], dist[i]);
        let direction = if d0 > r && d1 <= r {
            Direction::Inbound
        } else if d0 <= r && d1 > r {
            Direction::Outbound
        } else {
            continue;
        };
        let frac = (d0 - r) / (d0 - d1);
        out.push(interpolate_crossing(&traj.points[i - 1], &traj.points[i], frac, direction));
    }
    out
}

fn interpolate_crossing(a: &TrackPoint, b: &TrackPoint, frac: f64, direction: Direction) -> Crossing {
    let frac = frac.clamp(0.0, 1.0);
    Crossing {
        time: a.timestamp as f64 + frac * (b.timestamp - a.timestamp) as f64,
        position: LatLon::new(a.lat + frac * (b.lat - a.lat), a.lon + frac * (b.lon - a.lon)),
        direction,
    }
}

/// First crossing of `boundary` in `direction`, rounded to whole seconds.
pub fn crossing_time(
    traj: &Trajectory,
    geometry: &AirspaceGeometry,
    boundary: Boundary,
    direction: Direction,
) -> Option<i64> {
    crossings(traj, geometry, boundary)
        .into_iter()
        .find(|c| c.direction == direction)
        .map(|c| c.second())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntryZone {
    N,
    E,
    S,
    W,
}

impl EntryZone {
    /// Quadrants centred on the cardinal bearings, half-open clockwise.
    pub fn from_bearing(bearing: f64) -> Self {
        let b = normalize_deg(bearing);
        if !(45.0..315.0).contains(&b) {
            EntryZone::N
        } else if b < 135.0 {
            EntryZone::E
        } else if b < 225.0 {
            EntryZone::S
        } else {
            EntryZone::W
        }
    }

    pub fn center_bearing(self) -> f64 {
        match self {
            EntryZone::N => 0.0,
            EntryZone::E => 90.0,
            EntryZone::S => 180.0,
            EntryZone::W => 270.0,
        }
    }

    pub const ALL: [EntryZone; 4] = [EntryZone::N, EntryZone::E, EntryZone::S, EntryZone::W];
}

impl fmt::Display for EntryZone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

pub fn zone_of_crossing(geometry: &AirspaceGeometry, c: &Crossing) -> EntryZone {
    EntryZone::from_bearing(bearing_deg(geometry.center, c.position))
}

/// Zone of the first inbound research-circle crossing.
pub fn entry_zone(traj: &Trajectory, geometry: &AirspaceGeometry) -> Result<EntryZone> {
    crossings(traj, geometry, Boundary::Trc)
        .iter()
        .find(|c| c.direction == Direction::Inbound)
        .map(|c| zone_of_crossing(geometry, c))
        .ok_or_else(|| CoreError::Data(format!("{} never crosses the TRC inbound", traj.aircraft_id)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunwayThreshold {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub bearing: f64,
    #[serde(rename = "capture_radius_nm")]
    pub capture_radius_nm: f64,
}

impl RunwayThreshold {
    pub fn position(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGates {
    pub max_alt_ft: f64,
    pub max_speed_kt: f64,
}

impl Default for ThresholdGates {
    fn default() -> Self {
        Self { max_alt_ft: 1000.0, max_speed_kt: 200.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunwayLayout {
    pub thresholds: Vec<RunwayThreshold>,
    #[serde(default)]
    pub gates: ThresholdGates,
}

/// Name of the opposite end of a runway: "02L" -> "20R", "20C" -> "02C".
pub fn reciprocal_threshold(name: &str) -> Option<String> {
    let digits: String = name.chars().take_while(|c| c.is_ascii_digit()).collect();
    let num: u32 = digits.parse().ok()?;
    if !(1..=36).contains(&num) {
        return None;
    }
    let suffix = &name[digits.len()..];
    let recip = (num + 17) % 36 + 1;
    let side = match suffix {
        "L" => "R",
        "R" => "L",
        "C" => "C",
        "" => "",
        _ => return None,
    };
    Some(format!("{recip:02}{side}"))
}

/// Physical runway designator, lower-numbered end first ("02L20R").
pub fn physical_runway(threshold: &str) -> String {
    match reciprocal_threshold(threshold) {
        Some(r) if r.as_str() < threshold => format!("{r}{threshold}"),
        Some(r) => format!("{threshold}{r}"),
        None => threshold.to_string(),
    }
}

impl RunwayLayout {
    /// Two parallel runways at Changi (02L/20R and 02C/20C).
    pub fn changi() -> Self {
        let mk = |name: &str, p: LatLon, bearing: f64| RunwayThreshold {
            name: name.into(),
            lat: p.lat,
            lon: p.lon,
            bearing,
            capture_radius_nm: 0.5,
        };
        let r1_south = LatLon::new(1.3280, 103.9840);
        let r2_south = LatLon::new(1.3390, 104.0030);
        let len = 2.16;
        let r1_north = destination(r1_south, 23.0, len);
        let r2_north = destination(r2_south, 23.0, len);
        Self {
            thresholds: vec![
                mk("02L", r1_south, 23.0),
                mk("20R", r1_north, 203.0),
                mk("02C", r2_south, 23.0),
                mk("20C", r2_north, 203.0),
            ],
            gates: ThresholdGates::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.thresholds {
            if !seen.insert(t.name.as_str()) {
                return Err(CoreError::Config(format!("duplicate threshold {}", t.name)));
            }
            if t.capture_radius_nm <= 0.0 {
                return Err(CoreError::Config(format!("threshold {} needs capture_radius > 0", t.name)));
            }
        }
        if self.thresholds.is_empty() {
            return Err(CoreError::Config("runway layout has no thresholds".into()));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&RunwayThreshold> {
        self.thresholds.iter().find(|t| t.name == name)
    }

    /// Sorted physical runway names.
    pub fn physical_runways(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.thresholds.iter().map(|t| physical_runway(&t.name)).collect();
        set.into_iter().collect()
    }

    /// Loads the JSON list form `[{name, lat, lon, bearing, capture_radius_nm}]`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let thresholds: Vec<RunwayThreshold> = serde_json::from_str(&text)?;
        let layout = Self { thresholds, gates: ThresholdGates::default() };
        layout.validate()?;
        Ok(layout)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.thresholds)?;
        std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }
}

fn passes_gates(p: &TrackPoint, gates: &ThresholdGates) -> bool {
    p.alt < gates.max_alt_ft && p.ground_speed < gates.max_speed_kt
}

/// Nearest threshold whose capture disc contains `p`.
fn capturing_threshold<'a>(p: &TrackPoint, runways: &'a RunwayLayout) -> Option<(&'a RunwayThreshold, f64)> {
    runways
        .thresholds
        .iter()
        .map(|t| (t, great_circle_nm(t.position(), p.position())))
        .filter(|(t, d)| *d <= t.capture_radius_nm)
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Landing threshold and time: the first point inside a capture disc that
/// passes the altitude and speed gates opens a run; the run's closest approach
/// to that threshold is the threshold time.
pub fn match_threshold(traj: &Trajectory, runways: &RunwayLayout) -> Option<(String, i64)> {
    let gates = &runways.gates;
    let mut found: Option<(&RunwayThreshold, f64, i64)> = None;
    for p in &traj.points {
        let gated = passes_gates(p, gates);
        match found {
            None => {
                if gated {
                    if let Some((t, d)) = capturing_threshold(p, runways) {
                        found = Some((t, d, p.timestamp));
                    }
                }
            }
            Some((t, best, _)) => {
                let d = great_circle_nm(t.position(), p.position());
                if !gated || d > t.capture_radius_nm {
                    break;
                }
                if d < best {
                    found = Some((t, d, p.timestamp));
                }
            }
        }
    }
    found.map(|(t, _, ts)| (t.name.clone(), ts))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunwayOpsFeatures {
    pub arrivals_per_runway: BTreeMap<String, u32>,
    pub runway_change_label: u8,
}

impl RunwayOpsFeatures {
    pub fn count(&self, runway: &str) -> u32 {
        self.arrivals_per_runway.get(runway).copied().unwrap_or(0)
    }
}

/// Landings per physical runway with `t_thr` in `[t_ref - delta, t_ref]`, and
/// whether any runway landed on more than one threshold in that window.
pub fn runway_ops_features(arrivals: &[ArrivalRecord], t_ref: i64, delta: i64) -> RunwayOpsFeatures {
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    let mut used: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for a in arrivals.iter().filter(|a| a.t_thr >= t_ref - delta && a.t_thr <= t_ref) {
        *counts.entry(a.runway.clone()).or_default() += 1;
        used.entry(a.runway.as_str()).or_default().insert(a.threshold.as_str());
    }
    let changed = used.values().any(|s| s.len() > 1);
    RunwayOpsFeatures { arrivals_per_runway: counts, runway_change_label: u8::from(changed) }
}
