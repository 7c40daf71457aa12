//! Sample assembly: weather join, seasonality, RECAT lookup, runway and
//! holding features, images, plus split, normalization and the manifest.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Timelike};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::airspace::{runway_ops_features, AirspaceGeometry, RunwayLayout};
use crate::error::{CoreError, Result};
use crate::holding::{detect_holding, holding_features, tbe_mean_speed, HoldingParams};
use crate::ingest::{ArrivalRecord, Trajectory, RECAT_FALLBACK};
use crate::raster::{render, TrajectoryImage};

pub const TABULAR_DIM: usize = 12;
pub const HOLDING_DIM: usize = 5;
/// Oldest METAR report accepted for a reference time.
pub const METAR_MAX_AGE_S: i64 = 7200;

pub const TABULAR_NAMES: [&str; TABULAR_DIM] = [
    "arrivals_runway_1",
    "arrivals_runway_2",
    "runway_change_label",
    "drct",
    "sknt",
    "gust",
    "vsby",
    "skyl1",
    "skyc1",
    "is_peakhour",
    "is_weekday",
    "recat",
];
pub const HOLDING_NAMES: [&str; HOLDING_DIM] = ["total_arrivals", "dt_trc", "dv_avg", "dv_lead", "lead_holding"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetarRow {
    pub time: i64,
    pub drct: Option<f64>,
    pub sknt: Option<f64>,
    pub gust: Option<f64>,
    pub vsby: Option<f64>,
    pub skyl1: Option<f64>,
    pub skyc1: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlightPlan {
    pub aircraft_id: String,
    pub actype: String,
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

/// Reads `time,drct,sknt,gust,vsby,skyl1,skyc1`, sorted by time on return.
pub fn read_metar<R: Read>(r: R) -> Result<Vec<MetarRow>> {
    let mut rows: Vec<MetarRow> = csv_reader(r).deserialize().collect::<std::result::Result<_, _>>()?;
    rows.sort_by_key(|m| m.time);
    Ok(rows)
}

pub fn write_metar<W: Write>(w: W, rows: &[MetarRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CoreError::io("<metar csv>", e))
}

pub fn read_fpl<R: Read>(r: R) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for row in csv_reader(r).deserialize::<FlightPlan>() {
        let row = row?;
        out.insert(row.aircraft_id, row.actype);
    }
    Ok(out)
}

pub fn write_fpl<W: Write>(w: W, rows: &[FlightPlan]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CoreError::io("<fpl csv>", e))
}

/// Reads `actype,recat_code`.
pub fn read_recat_map<R: Read>(r: R) -> Result<BTreeMap<String, u8>> {
    #[derive(Deserialize)]
    struct Row {
        actype: String,
        recat_code: u8,
    }
    let mut out = BTreeMap::new();
    for row in csv_reader(r).deserialize::<Row>() {
        let row = row?;
        if row.recat_code > 5 {
            return Err(CoreError::Data(format!("RECAT code {} for {} outside 0..=5", row.recat_code, row.actype)));
        }
        out.insert(row.actype, row.recat_code);
    }
    Ok(out)
}

pub fn write_recat_map<W: Write>(w: W, rows: &[(String, u8)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["actype", "recat_code"])?;
    for (t, c) in rows {
        w.write_record([t.as_str(), &c.to_string()])?;
    }
    w.flush().map_err(|e| CoreError::io("<recat csv>", e))
}

/// `[drct, sknt, gust, vsby, skyl1, skyc1]` from the latest report at or
/// before `t_ref`. Missing gust means calm (0); missing direction 0;
/// missing visibility 10 miles; missing ceiling 0. BKN/OVC cover is 1.
pub fn join_weather(t_ref: i64, metar: &[MetarRow]) -> Result<[f64; 6]> {
    let idx = metar.partition_point(|m| m.time <= t_ref);
    let row = idx
        .checked_sub(1)
        .map(|i| &metar[i])
        .filter(|m| t_ref - m.time <= METAR_MAX_AGE_S)
        .ok_or_else(|| CoreError::Data(format!("no METAR report within 2 h before {t_ref}")))?;
    let cover = matches!(row.skyc1.trim().to_ascii_uppercase().as_str(), "BKN" | "OVC");
    Ok([
        row.drct.unwrap_or(0.0),
        row.sknt.unwrap_or(0.0),
        row.gust.unwrap_or(0.0),
        row.vsby.unwrap_or(10.0),
        row.skyl1.unwrap_or(0.0),
        f64::from(u8::from(cover)),
    ])
}

/// `(is_peakhour, is_weekday)` in local time; peak is 07-10 and 17-21.
pub fn seasonality(t_ref: i64, tz_offset_hours: i32) -> (u8, u8) {
    let local = t_ref + i64::from(tz_offset_hours) * 3600;
    let dt = DateTime::from_timestamp(local, 0).unwrap_or_default().naive_utc();
    let hour = dt.hour();
    let peak = (7..10).contains(&hour) || (17..21).contains(&hour);
    let weekday = dt.weekday().num_days_from_monday() < 5;
    (u8::from(peak), u8::from(weekday))
}

/// Flight-plan lookup key: trajectory fragments `<id>#k` share the plan of `<id>`.
fn base_id(id: &str) -> &str {
    id.split('#').next().unwrap_or(id)
}

/// RECAT code for an aircraft, or the fallback with `resolved = false`.
pub fn resolve_recat(id: &str, fpl: &BTreeMap<String, String>, map: &BTreeMap<String, u8>) -> (u8, bool) {
    fpl.get(base_id(id))
        .and_then(|t| map.get(t.trim()))
        .map_or((RECAT_FALLBACK, false), |&c| (c, true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSample {
    pub aircraft_id: String,
    pub t_ref: i64,
    /// Image path relative to the dataset directory.
    pub image: String,
    pub tabular: [f64; TABULAR_DIM],
    pub holding: [f64; HOLDING_DIM],
    pub label_seconds: f64,
    pub recat_resolved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    pub tau_s: i64,
    pub delta_s: i64,
    pub img_size: u32,
    pub tz_offset_hours: i32,
    pub holding: HoldingParams,
    pub threads: usize,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self { tau_s: 60, delta_s: 600, img_size: 64, tz_offset_hours: 8, holding: HoldingParams::default(), threads: 1 }
    }
}

pub struct BuildInputs<'a> {
    pub arrivals: &'a [ArrivalRecord],
    pub trajectories: &'a [Trajectory],
    pub metar: &'a [MetarRow],
    pub fpl: &'a BTreeMap<String, String>,
    pub recat_map: &'a BTreeMap<String, u8>,
    pub geometry: &'a AirspaceGeometry,
    pub runways: &'a RunwayLayout,
}

#[derive(Debug, Clone, Default)]
pub struct BuildOutput {
    pub samples: Vec<ArrivalSample>,
    pub images: Vec<TrajectoryImage>,
    /// Detected holding status per arrival.
    pub holdings: BTreeMap<String, bool>,
    pub skipped: Vec<(String, String)>,
}

/// Runs `f` over `items` on up to `threads` scoped workers; results keep input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<U>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Composes one sample per arrival. Arrivals whose features cannot be built
/// are skipped and reported. Output is ordered by `(t_trc, aircraft_id)`.
pub fn build_samples(inputs: &BuildInputs<'_>, params: &BuildParams) -> BuildOutput {
    let geometry = inputs.geometry;
    let by_id: BTreeMap<&str, &Trajectory> =
        inputs.trajectories.iter().map(|t| (t.aircraft_id.as_str(), t)).collect();
    let mut arrivals: Vec<ArrivalRecord> = inputs.arrivals.to_vec();
    arrivals.sort_by(|a, b| (a.t_trc, &a.aircraft_id).cmp(&(b.t_trc, &b.aircraft_id)));
    for a in &mut arrivals {
        let (code, ok) = resolve_recat(&a.aircraft_id, inputs.fpl, inputs.recat_map);
        a.recat = code;
        a.recat_resolved = ok;
    }

    let per_arrival = par_map(&arrivals, params.threads, |a| {
        let traj = by_id.get(a.aircraft_id.as_str());
        let speed = traj.and_then(|t| tbe_mean_speed(t, geometry).ok()).map(|s| s.v_e);
        let held = traj.is_some_and(|t| detect_holding(t, geometry, &params.holding).holding);
        (speed, held)
    });
    let mut speeds = BTreeMap::new();
    let mut holdings = BTreeMap::new();
    for (a, (speed, held)) in arrivals.iter().zip(&per_arrival) {
        if let Some(v) = speed {
            speeds.insert(a.aircraft_id.clone(), *v);
        }
        holdings.insert(a.aircraft_id.clone(), *held);
    }

    let mut spans: Vec<&Trajectory> = inputs.trajectories.iter().collect();
    spans.sort_by_key(|t| t.start());
    let max_len = spans.iter().map(|t| t.end() - t.start()).max().unwrap_or(0);
    let runway_names = inputs.runways.physical_runways();

    let results = par_map(&arrivals, params.threads, |a| -> Result<(ArrivalSample, TrajectoryImage)> {
        let t_ref = a.t_trc;
        let target = by_id
            .get(a.aircraft_id.as_str())
            .ok_or_else(|| CoreError::Data(format!("no trajectory for {}", a.aircraft_id)))?;
        let from = t_ref - params.tau_s;
        let lo = spans.partition_point(|t| t.start() < from - max_len);
        let hi = spans.partition_point(|t| t.start() <= t_ref);
        let others: Vec<&Trajectory> = spans[lo..hi]
            .iter()
            .copied()
            .filter(|t| t.end() >= from && t.aircraft_id != a.aircraft_id)
            .collect();
        let img = render(target, &others, geometry, t_ref, params.tau_s, params.img_size, params.img_size)?;
        let ops = runway_ops_features(&arrivals, t_ref, params.delta_s);
        let count = |i: usize| runway_names.get(i).map_or(0.0, |r| f64::from(ops.count(r)));
        let weather = join_weather(t_ref, inputs.metar)?;
        let (peak, weekday) = seasonality(t_ref, params.tz_offset_hours);
        let hf = holding_features(a, &arrivals, &speeds, &holdings, params.delta_s);
        let tabular = [
            count(0),
            count(1),
            f64::from(ops.runway_change_label),
            weather[0],
            weather[1],
            weather[2],
            weather[3],
            weather[4],
            weather[5],
            f64::from(peak),
            f64::from(weekday),
            f64::from(a.recat),
        ];
        let sample = ArrivalSample {
            aircraft_id: a.aircraft_id.clone(),
            t_ref,
            image: format!("images/{}", img.file_name()),
            tabular,
            holding: hf.to_vec(),
            label_seconds: a.label_seconds as f64,
            recat_resolved: a.recat_resolved,
        };
        Ok((sample, img))
    });

    let mut out = BuildOutput { holdings, ..BuildOutput::default() };
    for (a, r) in arrivals.iter().zip(results) {
        match r {
            Ok((s, img)) if s.tabular.iter().chain(&s.holding).all(|v| v.is_finite()) => {
                out.samples.push(s);
                out.images.push(img);
            }
            Ok(_) => out.skipped.push((a.aircraft_id.clone(), "non-finite feature".into())),
            Err(e) => {
                log::warn!("skipping {}: {e}", a.aircraft_id);
                out.skipped.push((a.aircraft_id.clone(), e.to_string()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`; validation and test get `floor(n * ratio)`
/// each and training takes the remainder.
pub fn split(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    let (tr, va, te) = ratios;
    if (tr + va + te - 1.0).abs() > 1e-9 || [tr, va, te].iter().any(|r| *r < 0.0) {
        return Err(CoreError::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    if n < 3 {
        return Err(CoreError::Data(format!("need at least 3 samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // tolerate 0.15 * 100 = 15.000000000000002
    let size = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
    let (n_val, n_test) = (size(va), size(te));
    let test = idx.split_off(n - n_test);
    let val = idx.split_off(n - n_test - n_val);
    Ok(SplitIndices { train: idx, val, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub tabular_mean: Vec<f64>,
    pub tabular_std: Vec<f64>,
    pub holding_mean: Vec<f64>,
    pub holding_std: Vec<f64>,
}

/// Column means and population standard deviations; zero spread becomes 1.
fn column_stats<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.clone().count().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
    (mean, std)
}

impl Normalizer {
    /// Fits z-score statistics on training samples only.
    pub fn fit(train: &[ArrivalSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(CoreError::Data("cannot fit a normalizer on an empty training set".into()));
        }
        let (tabular_mean, tabular_std) = column_stats(train.iter().map(|s| &s.tabular[..]), TABULAR_DIM);
        let (holding_mean, holding_std) = column_stats(train.iter().map(|s| &s.holding[..]), HOLDING_DIM);
        Ok(Self { tabular_mean, tabular_std, holding_mean, holding_std })
    }

    /// Normalizes feature vectors in place; labels are left in seconds.
    pub fn apply(&self, samples: &mut [ArrivalSample]) {
        for s in samples {
            for (i, v) in s.tabular.iter_mut().enumerate() {
                *v = (*v - self.tabular_mean[i]) / self.tabular_std[i];
            }
            for (i, v) in s.holding.iter_mut().enumerate() {
                *v = (*v - self.holding_mean[i]) / self.holding_std[i];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    image: String,
    tabular: Vec<f64>,
    holding: Vec<f64>,
    label_s: f64,
    #[serde(default)]
    t_ref: Option<i64>,
    #[serde(default = "yes")]
    recat_resolved: bool,
}

fn yes() -> bool {
    true
}

/// One JSON object per sample: `{id, image, tabular, holding, label_s}`.
pub fn write_manifest<W: Write>(mut w: W, samples: &[ArrivalSample]) -> Result<()> {
    for s in samples {
        let line = ManifestLine {
            id: s.aircraft_id.clone(),
            image: s.image.clone(),
            tabular: s.tabular.to_vec(),
            holding: s.holding.to_vec(),
            label_s: s.label_seconds,
            t_ref: Some(s.t_ref),
            recat_resolved: s.recat_resolved,
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w).map_err(|e| CoreError::io("<manifest>", e))?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ArrivalSample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| CoreError::io("<manifest>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)?;
        let tabular: [f64; TABULAR_DIM] = m
            .tabular
            .try_into()
            .map_err(|_| CoreError::Data(format!("manifest line {}: tabular must have 12 values", n + 1)))?;
        let holding: [f64; HOLDING_DIM] = m
            .holding
            .try_into()
            .map_err(|_| CoreError::Data(format!("manifest line {}: holding must have 5 values", n + 1)))?;
        if !(m.label_s > 0.0) {
            return Err(CoreError::Data(format!("manifest line {}: label must be positive", n + 1)));
        }
        out.push(ArrivalSample {
            aircraft_id: m.id,
            t_ref: m.t_ref.unwrap_or(0),
            image: m.image,
            tabular,
            holding,
            label_seconds: m.label_s,
            recat_resolved: m.recat_resolved,
        });
    }
    Ok(out)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}
