//! Synthetic terminal-area arrival traffic with known ground truth.
//!
//! Each aircraft spawns outside the TBX on a radial of its entry zone, flies
//! inbound to a fix 40 NM out, optionally flies racetrack orbits there, then
//! follows a dog-leg (downwind, base) onto a 10 NM final and lands. Holding
//! probability grows with the number of arrivals already inside the TRC and
//! with the holding status of the leading aircraft.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::airspace::{
    bearing_deg, destination, great_circle_nm, heading_delta, normalize_deg, physical_runway, AirspaceGeometry,
    EntryZone, LatLon, RunwayLayout,
};
use crate::dataset::{write_fpl, write_metar, write_recat_map, FlightPlan, MetarRow};
use crate::error::{CoreError, Result};
use crate::ingest::{write_adsb, AdsbPoint};

/// Singapore local midnight, 1 November 2022.
pub const DEFAULT_START_EPOCH: i64 = 1_667_232_000;

const SPAWN_NM: f64 = 63.0;
const HOLD_FIX_NM: f64 = 40.0;
const FINAL_NM: f64 = 10.0;
const DOWNWIND_OFFSET_NM: f64 = 8.0;
const TURN_DEG_PER_S: f64 = 3.0;
const GLIDE_FT_PER_NM: f64 = 318.0;
const THRESHOLD_CROSSING_FT: f64 = 50.0;
const ROLLOUT_NM: f64 = 0.8;
const ROLLOUT_KT: f64 = 110.0;

/// Aircraft types per RECAT code, light (0) to super heavy (5).
pub const RECAT_TYPES: [&[&str]; 6] = [
    &["C172", "PC12"],
    &["AT72", "DH8D", "E190"],
    &["A320", "A321", "B738", "B38M"],
    &["A332", "A333", "B788", "B789"],
    &["B77W", "A359", "B744"],
    &["A388"],
];

/// Relative TMA speed per RECAT code.
const RECAT_SPEED: [f64; 6] = [0.9, 1.04, 1.0, 0.98, 0.97, 0.93];
/// Final approach speed per RECAT code, knots.
const RECAT_FINAL_KT: [f64; 6] = [110.0, 125.0, 140.0, 148.0, 152.0, 155.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub start_epoch: i64,
    pub duration_hours: f64,
    pub arrival_rate_per_hour: f64,
    /// Rate multiplier during local peak hours.
    pub peak_factor: f64,
    pub tz_offset_hours: i32,
    /// Weights for N, E, S, W.
    pub zone_mix: [f64; 4],
    /// Speed range in the TBE annulus, knots.
    pub tbe_speed_kt: [f64; 2],
    pub hold_prob_base: f64,
    /// Airborne arrivals inside the TRC above which holds become likelier.
    pub congestion_threshold: usize,
    pub congestion_coupling: f64,
    pub lead_hold_coupling: f64,
    pub max_hold_prob: f64,
    /// Speed reduction applied to aircraft that will hold, knots.
    pub hold_speed_drop_kt: f64,
    pub hold_leg_s: f64,
    pub max_orbits: u32,
    /// Landing direction flips with this period; 0 disables changes.
    pub runway_change_every_hours: f64,
    pub recat_mix: [f64; 6],
    pub unknown_type_rate: f64,
    pub runway_capacity_per_hour: f64,
    pub metar_interval_s: i64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            start_epoch: DEFAULT_START_EPOCH,
            duration_hours: 6.0,
            arrival_rate_per_hour: 28.0,
            peak_factor: 1.4,
            tz_offset_hours: 8,
            zone_mix: [0.3, 0.2, 0.25, 0.25],
            tbe_speed_kt: [230.0, 290.0],
            hold_prob_base: 0.03,
            congestion_threshold: 10,
            congestion_coupling: 0.05,
            lead_hold_coupling: 0.25,
            max_hold_prob: 0.8,
            hold_speed_drop_kt: 25.0,
            hold_leg_s: 60.0,
            max_orbits: 3,
            runway_change_every_hours: 5.0,
            recat_mix: [0.0, 0.1, 0.5, 0.22, 0.14, 0.04],
            unknown_type_rate: 0.01,
            runway_capacity_per_hour: 40.0,
            metar_interval_s: 1800,
        }
    }
}

fn check_weights(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(CoreError::Config(format!("{name} must be non-negative and sum to 1")));
    }
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CoreError::Config(format!("{name} must be in [0, 1], got {p}")));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_hours > 0.0 && self.arrival_rate_per_hour > 0.0 && self.peak_factor > 0.0) {
            return Err(CoreError::Config("duration, arrival rate and peak factor must be positive".into()));
        }
        let [lo, hi] = self.tbe_speed_kt;
        if !(lo > 160.0 && hi >= lo && hi < 400.0) {
            return Err(CoreError::Config(format!("tbe_speed_kt [{lo}, {hi}] outside (160, 400)")));
        }
        if lo - self.hold_speed_drop_kt < 160.0 {
            return Err(CoreError::Config("hold_speed_drop_kt leaves TBE speed below 160 kt".into()));
        }
        check_weights("zone_mix", &self.zone_mix)?;
        check_weights("recat_mix", &self.recat_mix)?;
        for (n, p) in [
            ("hold_prob_base", self.hold_prob_base),
            ("congestion_coupling", self.congestion_coupling),
            ("lead_hold_coupling", self.lead_hold_coupling),
            ("max_hold_prob", self.max_hold_prob),
            ("unknown_type_rate", self.unknown_type_rate),
        ] {
            check_prob(n, p)?;
        }
        if self.hold_leg_s < 0.0 || self.metar_interval_s <= 0 || self.max_orbits == 0 {
            return Err(CoreError::Config("hold_leg_s >= 0, metar_interval_s > 0, max_orbits > 0 required".into()));
        }
        let peak_rate = self.arrival_rate_per_hour * self.peak_factor.max(1.0);
        if peak_rate > 2.0 * self.runway_capacity_per_hour {
            return Err(CoreError::Config(format!(
                "peak arrival rate {peak_rate:.1}/h exceeds two-runway capacity {:.1}/h",
                2.0 * self.runway_capacity_per_hour
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn end_epoch(&self) -> i64 {
        self.start_epoch + (self.duration_hours * 3600.0).round() as i64
    }

    fn is_peak(&self, t: i64) -> bool {
        crate::dataset::seasonality(t, self.tz_offset_hours).0 == 1
    }

    /// Landing direction index at `t`: 0 lands on the 02 ends, 1 on the 20 ends.
    pub fn direction_at(&self, t: f64) -> usize {
        if self.runway_change_every_hours <= 0.0 {
            return 0;
        }
        let period = self.runway_change_every_hours * 3600.0;
        (((t - self.start_epoch as f64) / period).floor().max(0.0) as usize) % 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub aircraft_id: String,
    pub actype: String,
    pub recat: u8,
    pub entry_zone: EntryZone,
    pub threshold: String,
    pub runway: String,
    pub t_trc: i64,
    pub t_thr: i64,
    pub label: i64,
    pub label_no_hold: i64,
    pub holds: u32,
    pub tbe_speed: f64,
    /// Airborne arrivals inside the TRC when this aircraft crossed it.
    pub pressure: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SimOutput {
    pub points: Vec<AdsbPoint>,
    pub metar: Vec<MetarRow>,
    pub flight_plans: Vec<FlightPlan>,
    pub recat_map: Vec<(String, u8)>,
    pub truth: Vec<TruthRecord>,
}

impl SimOutput {
    /// Writes `adsb.csv`, `metar.csv`, `fpl.csv`, `recat.csv`, `truth.csv`
    /// and `runways.json` into `dir`.
    pub fn write_dir(&self, dir: &Path, runways: &RunwayLayout) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p).map(std::io::BufWriter::new).map_err(|e| CoreError::io(p, e))
        };
        write_adsb(create("adsb.csv")?, &self.points)?;
        write_metar(create("metar.csv")?, &self.metar)?;
        write_fpl(create("fpl.csv")?, &self.flight_plans)?;
        write_recat_map(create("recat.csv")?, &self.recat_map)?;
        let mut w = csv::Writer::from_writer(create("truth.csv")?);
        for t in &self.truth {
            w.serialize(t)?;
        }
        w.flush().map_err(|e| CoreError::io(dir.join("truth.csv"), e))?;
        runways.save(&dir.join("runways.json"))
    }
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(CoreError::from)).collect()
}

/// Piecewise-linear path; every edge carries its speed and nominal heading.
struct Path2 {
    vertices: Vec<LatLon>,
    times: Vec<f64>,
    speeds: Vec<f64>,
    headings: Vec<f64>,
    holding: Vec<bool>,
}

impl Path2 {
    fn new(start: LatLon, t0: f64) -> Self {
        Self { vertices: vec![start], times: vec![t0], speeds: vec![], headings: vec![], holding: vec![] }
    }

    fn last(&self) -> LatLon {
        self.vertices[self.vertices.len() - 1]
    }

    fn now(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    fn push(&mut self, to: LatLon, speed: f64, heading: f64, dist: f64, holding: bool) {
        let t = self.now() + dist / speed * 3600.0;
        self.vertices.push(to);
        self.times.push(t);
        self.speeds.push(speed);
        self.headings.push(normalize_deg(heading));
        self.holding.push(holding);
    }

    fn line_to(&mut self, to: LatLon, speed: f64) {
        let from = self.last();
        let dist = great_circle_nm(from, to);
        if dist < 1e-9 {
            return;
        }
        self.push(to, speed, bearing_deg(from, to), dist, false);
    }

    fn heading_run(&mut self, heading: f64, seconds: f64, speed: f64) {
        let dist = speed * seconds / 3600.0;
        let to = destination(self.last(), heading, dist);
        self.push(to, speed, heading, dist, true);
    }

    /// Right-hand racetrack entered on `heading`; each orbit is two 180°
    /// rate-one turns joined by straight legs.
    fn racetrack(&mut self, heading: f64, orbits: u32, leg_s: f64, speed: f64) {
        let steps = (180.0 / TURN_DEG_PER_S).round() as usize;
        let mut h = heading;
        for _ in 0..orbits {
            for _ in 0..2 {
                for _ in 0..steps {
                    h += TURN_DEG_PER_S;
                    self.heading_run(h, 1.0, speed);
                }
                if leg_s > 0.0 {
                    self.heading_run(h, leg_s, speed);
                }
            }
        }
    }
}

/// Point at `(x, y)` NM in the frame of a threshold: x along the landing
/// direction, y to its right.
fn runway_frame(thr: LatLon, bearing: f64, x: f64, y: f64) -> LatLon {
    destination(destination(thr, bearing, x), bearing + 90.0, y)
}

fn to_runway_frame(thr: LatLon, bearing: f64, p: LatLon) -> (f64, f64) {
    let d = great_circle_nm(thr, p);
    let rel = heading_delta(bearing, bearing_deg(thr, p)).to_radians();
    (d * rel.cos(), d * rel.sin())
}

fn pick<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Landing thresholds grouped as `[02 ends, 20 ends]` by runway bearing.
fn thresholds_by_direction(runways: &RunwayLayout) -> Result<[Vec<usize>; 2]> {
    let mut dirs: [Vec<usize>; 2] = [vec![], vec![]];
    for (i, t) in runways.thresholds.iter().enumerate() {
        let b = normalize_deg(t.bearing);
        dirs[usize::from((90.0..270.0).contains(&b))].push(i);
    }
    if dirs.iter().any(|d| d.is_empty()) {
        return Err(CoreError::Config("simulation needs thresholds landing in both directions".into()));
    }
    Ok(dirs)
}

struct Flight {
    truth: TruthRecord,
    path: Path2,
    threshold_vertex: usize,
    cruise_ft: f64,
}

/// Remaining along-track distance to the threshold at each vertex, skipping holds.
fn remaining_nm(path: &Path2, thr_vertex: usize) -> Vec<f64> {
    let n = path.vertices.len();
    let mut rem = vec![0.0; n];
    for i in (0..thr_vertex).rev() {
        let d = if path.holding[i] { 0.0 } else { great_circle_nm(path.vertices[i], path.vertices[i + 1]) };
        rem[i] = rem[i + 1] + d;
    }
    rem
}

fn sample_flight(f: &Flight, out: &mut Vec<AdsbPoint>) {
    let p = &f.path;
    let rem = remaining_nm(p, f.threshold_vertex);
    let alt_at = |i: usize| {
        if i > f.threshold_vertex {
            0.0
        } else {
            (THRESHOLD_CROSSING_FT + GLIDE_FT_PER_NM * rem[i]).min(f.cruise_ft)
        }
    };
    let t_start = p.times[0].ceil() as i64;
    let t_end = p.now().floor() as i64;
    let mut e = 0;
    for t in t_start..=t_end {
        let tf = t as f64;
        while e + 1 < p.speeds.len() && p.times[e + 1] <= tf {
            e += 1;
        }
        let span = p.times[e + 1] - p.times[e];
        let frac = ((tf - p.times[e]) / span).clamp(0.0, 1.0);
        let (a, b) = (p.vertices[e], p.vertices[e + 1]);
        out.push(AdsbPoint {
            aircraft_id: f.truth.aircraft_id.clone(),
            timestamp: t,
            lat: a.lat + frac * (b.lat - a.lat),
            lon: a.lon + frac * (b.lon - a.lon),
            alt: alt_at(e) + frac * (alt_at(e + 1) - alt_at(e)),
            ground_speed: p.speeds[e],
            heading: p.headings[e],
            imputed: false,
        });
    }
}

/// Generates a scenario. Aircraft are produced in TRC-arrival order so each
/// hold decision sees the traffic already inside the TRC.
pub fn generate(cfg: &ScenarioConfig, geometry: &AirspaceGeometry, runways: &RunwayLayout) -> Result<SimOutput> {
    cfg.validate()?;
    geometry.validate()?;
    runways.validate()?;
    let by_dir = thresholds_by_direction(runways)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let end = cfg.end_epoch() as f64;

    // thinned Poisson process of planned TRC arrival times
    let peak_rate = cfg.arrival_rate_per_hour * cfg.peak_factor.max(1.0);
    let mut arrivals = Vec::new();
    let mut t = cfg.start_epoch as f64 + 600.0;
    loop {
        t += -(1.0 - rng.gen::<f64>()).ln() / peak_rate * 3600.0;
        if t >= end {
            break;
        }
        let rate = cfg.arrival_rate_per_hour * if cfg.is_peak(t as i64) { cfg.peak_factor } else { 1.0 };
        if rng.gen::<f64>() < rate / peak_rate {
            arrivals.push(t);
        }
    }

    let metar = generate_metar(cfg, &mut rng);
    let mut flights: Vec<Flight> = Vec::with_capacity(arrivals.len());
    for (k, &t_plan) in arrivals.iter().enumerate() {
        let id = format!("SIM{:05}", k + 1);
        let zone = EntryZone::ALL[pick(&mut rng, &cfg.zone_mix)];
        let bearing = zone.center_bearing() + rng.gen_range(-30.0..30.0);
        let recat = pick(&mut rng, &cfg.recat_mix);
        let actype = if rng.gen::<f64>() < cfg.unknown_type_rate {
            "ZZZZ".to_string()
        } else {
            let types = RECAT_TYPES[recat];
            types[rng.gen_range(0..types.len())].to_string()
        };
        let speed_factor = RECAT_SPEED[recat];
        let base_tbe = rng.gen_range(cfg.tbe_speed_kt[0]..=cfg.tbe_speed_kt[1]);

        let pressure = flights
            .iter()
            .filter(|f| (f.truth.t_thr as f64) > t_plan && (f.truth.t_trc as f64) <= t_plan)
            .count();
        let lead = flights
            .iter()
            .filter(|f| (f.truth.t_thr as f64) > t_plan)
            .max_by(|a, b| a.truth.t_trc.cmp(&b.truth.t_trc));
        let lead_held = lead.is_some_and(|f| f.truth.holds > 0);
        let p_hold = (cfg.hold_prob_base
            + cfg.congestion_coupling * pressure.saturating_sub(cfg.congestion_threshold) as f64
            + if lead_held { cfg.lead_hold_coupling } else { 0.0 })
        .min(cfg.max_hold_prob);
        let holds = if rng.gen::<f64>() < p_hold {
            let extra = pressure.saturating_sub(cfg.congestion_threshold) as u32 / 3;
            (1 + extra + u32::from(rng.gen::<f64>() < 0.3)).min(cfg.max_orbits)
        } else {
            0
        };
        let v_e = (base_tbe - if holds > 0 { cfg.hold_speed_drop_kt } else { 0.0 }) * speed_factor;
        let v_e = v_e.max(160.0);
        let v_in = (v_e - rng.gen_range(0.0..25.0)).max(170.0);
        let v_hold = v_in.min(220.0);
        let v_app = rng.gen_range(190.0..225.0) * speed_factor.min(1.0);

        let direction = cfg.direction_at(t_plan);
        let choices = &by_dir[direction];
        let thr = &runways.thresholds[choices[rng.gen_range(0..choices.len())]];
        let thr_pos = thr.position();

        // stronger reported wind slows the final approach
        let wind = crate::dataset::join_weather(t_plan as i64, &metar).map_or(0.0, |w| w[1]);
        let v_final = RECAT_FINAL_KT[recat] + rng.gen_range(-5.0..5.0) - wind * 0.5;

        let spawn = destination(geometry.center, bearing, SPAWN_NM);
        let trc_point = destination(geometry.center, bearing, geometry.trc_radius_nm);
        let fix = destination(geometry.center, bearing, HOLD_FIX_NM);
        let t_spawn = (t_plan - (SPAWN_NM - geometry.trc_radius_nm) / v_e * 3600.0).floor();
        let mut path = Path2::new(spawn, t_spawn);
        path.line_to(trc_point, v_e);
        let t_trc_exact = path.now();
        path.line_to(fix, v_in);
        let inbound = path.headings[path.headings.len() - 1];
        let before_hold = path.now();
        if holds > 0 {
            path.racetrack(inbound, holds, cfg.hold_leg_s, v_hold);
        }
        let hold_time = path.now() - before_hold;

        let (hx, hy) = to_runway_frame(thr_pos, thr.bearing, path.last());
        let faf = runway_frame(thr_pos, thr.bearing, -FINAL_NM, 0.0);
        if hx >= -FINAL_NM {
            let side = if hy >= 0.0 { 1.0 } else { -1.0 };
            let d1 = runway_frame(thr_pos, thr.bearing, hx.min(12.0), side * DOWNWIND_OFFSET_NM);
            let d2 = runway_frame(thr_pos, thr.bearing, -FINAL_NM - 6.0, side * DOWNWIND_OFFSET_NM);
            path.line_to(d1, v_app);
            path.line_to(d2, v_app);
        }
        path.line_to(faf, v_app.min(200.0));
        path.line_to(thr_pos, v_final);
        let threshold_vertex = path.vertices.len() - 1;
        let t_thr_exact = path.now();
        path.line_to(destination(thr_pos, thr.bearing, ROLLOUT_NM), ROLLOUT_KT);

        let t_trc = t_trc_exact.round() as i64;
        let t_thr = t_thr_exact.round() as i64;
        let truth = TruthRecord {
            aircraft_id: id,
            actype,
            recat: recat as u8,
            entry_zone: zone,
            threshold: thr.name.clone(),
            runway: physical_runway(&thr.name),
            t_trc,
            t_thr,
            label: t_thr - t_trc,
            label_no_hold: (t_thr_exact - hold_time).round() as i64 - t_trc,
            holds,
            tbe_speed: v_e,
            pressure,
        };
        let cruise_ft = rng.gen_range(11_000.0..16_000.0_f64).round();
        flights.push(Flight { truth, path, threshold_vertex, cruise_ft });
    }

    let mut out = SimOutput::default();
    for f in &flights {
        sample_flight(f, &mut out.points);
    }
    out.truth = flights.into_iter().map(|f| f.truth).collect();
    out.flight_plans =
        out.truth.iter().map(|t| FlightPlan { aircraft_id: t.aircraft_id.clone(), actype: t.actype.clone() }).collect();
    let mut map = BTreeMap::new();
    for (code, types) in RECAT_TYPES.iter().enumerate() {
        for t in *types {
            map.insert(t.to_string(), code as u8);
        }
    }
    out.recat_map = map.into_iter().collect();
    out.metar = metar;
    Ok(out)
}

/// Half-hourly reports; wind favours the active landing direction.
fn generate_metar<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Vec<MetarRow> {
    let mut rows = Vec::new();
    let mut t = cfg.start_epoch - cfg.metar_interval_s;
    let mut sknt: f64 = rng.gen_range(4.0..12.0);
    while t <= cfg.end_epoch() + cfg.metar_interval_s {
        let dir = cfg.direction_at(t as f64);
        let drct = normalize_deg([20.0, 200.0][dir] + rng.gen_range(-40.0..40.0)).round();
        sknt = (sknt + rng.gen_range(-3.0..3.0)).clamp(2.0, 22.0).round();
        let gust = (sknt > 12.0 && rng.gen::<f64>() < 0.5).then(|| sknt + rng.gen_range(6.0..14.0_f64).round());
        let skyc1 = ["FEW", "SCT", "BKN", "OVC"][rng.gen_range(0..4)].to_string();
        rows.push(MetarRow {
            time: t,
            drct: Some(drct),
            sknt: Some(sknt),
            gust,
            vsby: Some((rng.gen_range(4.0..10.0_f64) * 10.0).round() / 10.0),
            skyl1: Some(rng.gen_range(10.0..50.0_f64).round() * 100.0),
            skyc1,
        });
        t += cfg.metar_interval_s;
    }
    rows
}

/// Deletes interior reports of each aircraft with probability `rate`,
/// copying all other rows verbatim. Endpoints of every track are kept.
pub fn inject_gaps<R: Read, W: Write>(input: R, output: W, rate: f64, seed: u64) -> Result<usize> {
    if !(0.0..=0.2).contains(&rate) {
        return Err(CoreError::Config(format!("gap rate must be in [0, 0.2], got {rate}")));
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h.trim() == "id")
        .ok_or_else(|| CoreError::Schema("missing required column 'id'".into()))?;
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let mut first: BTreeMap<&str, usize> = BTreeMap::new();
    let mut last: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let id = r.get(id_col).unwrap_or("");
        first.entry(id).or_insert(i);
        last.insert(id, i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = csv::Writer::from_writer(output);
    w.write_record(&headers)?;
    let mut deleted = 0;
    for (i, r) in records.iter().enumerate() {
        let id = r.get(id_col).unwrap_or("");
        let endpoint = first[id] == i || last[id] == i;
        let drop = rng.gen::<f64>() < rate;
        if drop && !endpoint {
            deleted += 1;
            continue;
        }
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CoreError::io("<adsb csv>", e))?;
    Ok(deleted)
}
